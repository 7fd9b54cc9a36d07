"""Semi-implicit time integration of the regularized map/spinor system,
energy bookkeeping, singular-time detection with restarts, and the
continuation of the regularization exponent down toward 1.

The map update treats the Laplacian implicitly in Fourier space with all
nonlinear terms explicit, projects back onto the target nodewise, and then
re-solves the spinor constraint at the new map.  The energy ledger records
the half-weighted dissipation W = (1/2) int (1+|grad u|^2)^(alpha-1)
|du/dt|^2, so the exact balance law reads

    E_alpha(t) - E_alpha(0) + 2*alpha * int_0^t W = 0,

discretized to first order in dt.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .dirac import (
    ConstraintSolution,
    KernelTracker,
    TwistedSpinorField,
    apply_spin_matrix,
    assemble_operator,
    solve_constraint,
    CLIFFORD,
)
from .errors import (
    ContinuationAborted,
    KernelNotMinimal,
    RestartExhausted,
    StepRejected,
)
from .geometry import MapField, smooth_field


# ---------------------------------------------------------------------------
# energies and right-hand sides


def dirichlet_energy(u: MapField) -> float:
    return 0.5 * u.domain.integrate(u.grad_norm2())


def energy_alpha(u: MapField, alpha: float) -> float:
    return 0.5 * u.domain.integrate((1.0 + u.grad_norm2()) ** alpha)


def action(u: MapField, psi: TwistedSpinorField | None, alpha: float) -> float:
    """L_alpha(u, psi): regularized map energy plus the Dirac pairing."""
    total = energy_alpha(u, alpha)
    if psi is not None:
        op = assemble_operator(u)
        dpsi = op.apply_field(psi.values[..., None])[..., 0]
        total += 0.5 * np.real(u.domain.l2_inner(psi.values, dpsi))
    return total


def f1_term(u: MapField) -> np.ndarray:
    """F1^A = -pi^A_{BC}(u) <grad u^B, grad u^C>; minus the trace of the
    second fundamental form along the map."""
    t, d = u.target, u.domain
    w = t.project(u.values)
    H = t.proj_hessian(w)
    gw = d.grad(w)
    contraction = np.einsum("bxyB,bxyC->xyBC", gw, gw)
    return -np.einsum("xyABC,xyBC->xyA", H, contraction)


def _spinor_currents(psi: TwistedSpinorField) -> list[np.ndarray]:
    """J_beta[D,F] = Re<psi^D, e_beta . psi^F> per node (antisymmetric)."""
    out = []
    for beta in range(2):
        cp = apply_spin_matrix(CLIFFORD[beta], psi.values, spin_axis=2)
        out.append(np.real(np.einsum("xysD,xysF->xyDF", np.conj(psi.values), cp)))
    return out


def f2_term(u: MapField, psi: TwistedSpinorField | None) -> np.ndarray:
    """F2^A = -pi^A_B pi^C_{BD} pi^C_{EF} Re<psi^D, grad u^E . psi^F>."""
    t, d = u.target, u.domain
    q = t.ambient_dim
    if psi is None:
        return np.zeros((d.n1, d.n2, q))
    w = t.project(u.values)
    H = t.proj_hessian(w)
    P = t.tangent_projector(w)
    gw = d.grad(w)
    M = np.zeros((d.n1, d.n2, q, q))
    for beta, J in enumerate(_spinor_currents(psi)):
        K = np.einsum("xyCEF,xyE->xyCF", H, gw[beta])
        M += np.einsum("xyCF,xyDF->xyCD", K, J)
    out = np.einsum("xyCBD,xyCD->xyB", H, M)
    return -np.einsum("xyAB,xyB->xyA", P, out)


def curvature_force(u: MapField, psi: TwistedSpinorField | None) -> np.ndarray:
    """The spinor curvature force paired against map variations; equals
    -F2 and satisfies <psi, (D_v Dirac) psi> = 2 <curvature_force, v>."""
    return -f2_term(u, psi)


def hessian_coupling(u: MapField) -> np.ndarray:
    """(grad^2_{bg} u^B grad_b u^B grad_g u^A) / (1 + |grad u|^2)."""
    d = u.domain
    w = u.target.project(u.values)
    gw = d.grad(w)
    denom = 1.0 + np.sum(gw[0] ** 2 + gw[1] ** 2, axis=-1)
    out = np.zeros_like(w)
    for b in range(2):
        for g in range(2):
            hess = d.deriv2(w, b, g)
            s = np.einsum("xyB,xyB->xy", hess, gw[b])
            out += s[..., None] * gw[g]
    return out / denom[..., None]


def map_rhs(
    u: MapField, psi: TwistedSpinorField | None, alpha: float
) -> np.ndarray:
    """Right-hand side of the Euclidean-form evolution equation:

        Lap u + 2(alpha-1) * hessian_coupling + F1
              + F2 / (alpha (1+|grad u|^2)^(alpha-1)).

    At alpha = 1 with psi = 0 this is exactly the harmonic map flow field.
    """
    d = u.domain
    w = u.target.project(u.values)
    rhs = d.laplacian(w) + f1_term(u)
    if alpha != 1.0:
        rhs += 2.0 * (alpha - 1.0) * hessian_coupling(u)
    if psi is not None:
        gn = np.sum(d.grad(w)[0] ** 2 + d.grad(w)[1] ** 2, axis=-1)
        weight = alpha * (1.0 + gn) ** (alpha - 1.0)
        rhs += f2_term(u, psi) / weight[..., None]
    return rhs


def el_residual(
    u: MapField, psi: TwistedSpinorField | None, alpha: float
) -> tuple[float, float]:
    """(map, spinor) L^2 residuals of the critical-point equations; the map
    part is the weighted Euler-Lagrange defect alpha*(1+|grad u|^2)^(alpha-1)
    times the evolution field."""
    d = u.domain
    weight = alpha * (1.0 + u.grad_norm2()) ** (alpha - 1.0)
    f = weight[..., None] * map_rhs(u, psi, alpha)
    map_res = d.l2_norm(f)
    spinor_res = 0.0
    if psi is not None:
        op = assemble_operator(u)
        spinor_res = d.l2_norm(op.apply_field(psi.values[..., None])[..., 0])
    return map_res, spinor_res


def variational_consistency_check(
    u: MapField,
    psi: TwistedSpinorField | None,
    alpha: float,
    eta: np.ndarray,
    fd_step: float = 1e-3,
) -> float:
    """Relative mismatch between <weighted rhs, eta> and the central finite
    difference of E_alpha(pi(u + t*eta)).

    Along constraint solutions the spinor term contributes nothing to the
    first variation (the curvature pairing vanishes on the kernel), so the
    identity holds for psi = 0 and for kernel spinors alike.
    """
    d = u.domain
    weight = alpha * (1.0 + u.grad_norm2()) ** (alpha - 1.0)
    f = weight[..., None] * map_rhs(u, psi, alpha)
    lhs = d.integrate(np.einsum("xyA,xyA->xy", f, eta))

    def e_of(t):
        vals = u.target.project(u.values + t * eta)
        return energy_alpha(MapField(vals, d, u.target), alpha)

    rhs = -(e_of(fd_step) - e_of(-fd_step)) / (2.0 * fd_step)
    # the floor keeps the ratio meaningful at critical points, where both
    # sides vanish and only O(fd_step^2) noise remains
    scale = max(abs(lhs), abs(rhs), fd_step * energy_alpha(u, alpha))
    return abs(lhs - rhs) / scale


def curvature_pairing_check(
    u: MapField,
    psi: TwistedSpinorField,
    v: np.ndarray,
    fd_step: float = 2e-4,
) -> tuple[float, float, float]:
    """Tests <psi, (D_v Dirac) psi> = 2 <curvature_force, v>.

    The left side is a Richardson-extrapolated central finite difference of
    the assembled-operator quadratic form along u + s*v (the h^2 truncation
    term cancels, leaving the roundoff floor).  Returns (lhs, rhs,
    relative error).
    """
    d = u.domain

    def quad(s):
        up = MapField(u.values + s * v, d, u.target)
        op = assemble_operator(up)
        out = op.apply_field(psi.values[..., None])[..., 0]
        return np.real(d.l2_inner(psi.values, out))

    def central(h):
        return (quad(h) - quad(-h)) / (2.0 * h)

    lhs = (4.0 * central(fd_step / 2.0) - central(fd_step)) / 3.0
    force = curvature_force(u, psi)
    rhs = 2.0 * d.integrate(np.einsum("xyA,xyA->xy", force, v))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return lhs, rhs, abs(lhs - rhs) / scale


# ---------------------------------------------------------------------------
# flow configuration and state


@dataclass
class FlowConfig:
    """Parameters of one flow run (a single regularization exponent)."""

    alpha: float = 1.1
    dt: float = 1e-3
    t_max: float = 1.0
    tau_stat: float | None = None  # default 1e-8 * domain area
    tau_ker: float | None = None  # default 1e-6 * operator radius estimate
    lambda_min: float = 1e-3
    tau_e_rel: float = 1e-10
    spinor: bool = True
    restart_max_attempts: int = 40
    restart_amplitudes: tuple = (0.05, 0.025, 0.0125)
    ball_radius: float | None = None
    seed: int = 0
    max_rejects: int = 10
    sample_stride: int = 1
    tracker_k: int = 6
    dense_dim_max: int = 2100

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if self.dt <= 0 or self.t_max <= 0:
            raise ValueError("dt and t_max must be positive")

    def stationarity_threshold(self, domain) -> float:
        return (
            1e-8 * domain.area if self.tau_stat is None else float(self.tau_stat)
        )


@dataclass
class FlowState:
    t: float
    u: MapField
    psi: TwistedSpinorField | None
    alpha: float
    report: object = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class FlowEvent:
    kind: str  # Stationary | SingularTime | Restart | BlowupSuspected | StepRejected
    time: float
    payload: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    states: list
    events: list
    times: list
    energies: list
    dissipations: list  # half-weighted W per accepted step
    dts: list
    config: FlowConfig
    final_state: FlowState = None

    def energy_identity_residual(self, upto: int | None = None) -> float:
        """|E(t_k) - E(0) + 2 alpha sum dt_j W_j| over the accepted window."""
        k = len(self.dts) if upto is None else upto
        acc = sum(dt * w for dt, w in zip(self.dts[:k], self.dissipations[:k]))
        return abs(
            self.energies[k] - self.energies[0] + 2.0 * self.config.alpha * acc
        )


def _singular(report, cfg: FlowConfig) -> bool:
    floor = max(10.0 * report.tau_ker, cfg.lambda_min)
    return report.kernel_dim_complex != 2 or report.gap < floor


def _solve_spinor(u, psi_ref, cfg, tracker):
    sol = solve_constraint(
        u,
        psi_ref,
        phase_ref=psi_ref,
        tracker=tracker,
        tau_ker=cfg.tau_ker,
    )
    if _singular(sol.report, cfg):
        raise KernelNotMinimal(sol.report.kernel_dim_complex, sol.report.gap)
    return sol


def step(
    state: FlowState, dt: float, cfg: FlowConfig, tracker: KernelTracker | None = None
) -> tuple[FlowState, dict]:
    """One semi-implicit step: implicit Laplacian, explicit nonlinearities,
    nodewise projection, then constraint re-solve.

    Rejects the step (halving dt, up to cfg.max_rejects times) if the
    regularized energy increases by more than tau_e_rel * E(0).
    """
    u, psi, alpha = state.u, state.psi, state.alpha
    d = u.domain
    e_old = energy_alpha(u, alpha)
    tau_e = cfg.tau_e_rel * e_old
    explicit = map_rhs(u, psi, alpha) - d.laplacian(u.target.project(u.values))
    rejected = 0
    dt_try = dt
    while True:
        unew_vals = d.implicit_heat_solve(u.values + dt_try * explicit, dt_try)
        unew = MapField(u.target.project(unew_vals), d, u.target)
        e_new = energy_alpha(unew, alpha)
        if e_new <= e_old + tau_e or rejected >= cfg.max_rejects:
            break
        rejected += 1
        dt_try *= 0.5
    if e_new > e_old + tau_e:
        raise StepRejected(
            f"energy increased by {e_new - e_old:.3e} after "
            f"{rejected} halvings at t={state.t:.4f}"
        )
    dudt = (unew.values - u.values) / dt_try
    gn = u.grad_norm2()
    w_diss = 0.5 * d.integrate(
        (1.0 + gn) ** (alpha - 1.0) * np.sum(dudt**2, axis=-1)
    )
    dissipation = d.integrate(np.sum(dudt**2, axis=-1))
    weight = alpha * (1.0 + gn) ** (alpha - 1.0)
    map_residual = d.l2_norm(
        weight[..., None] * (explicit + d.laplacian(u.target.project(u.values)))
    )

    psi_new = None
    report = None
    spinor_res = 0.0
    if cfg.spinor and psi is not None:
        sol = _solve_spinor(unew, psi, cfg, tracker)
        psi_new = sol.psi
        report = sol.report
        spinor_res = sol.residual

    diag = {
        "dt": dt_try,
        "rejected": rejected,
        "E_alpha": e_new,
        "E_dirichlet": dirichlet_energy(unew),
        "dissipation": dissipation,
        "W": w_diss,
        "map_residual": map_residual,
        "gap_lambda": report.gap if report is not None else float("nan"),
        "kernel_dim": report.kernel_dim_complex if report is not None else 0,
        "psi_l2": psi_new.l2_norm() if psi_new is not None else 0.0,
        "spinor_residual": spinor_res,
    }
    new_state = FlowState(
        t=state.t + dt_try, u=unew, psi=psi_new, alpha=alpha, report=report
    )
    new_state.diagnostics = diag
    return new_state, diag


def restart_map(
    state: FlowState,
    cfg: FlowConfig,
    tracker: KernelTracker | None,
    rng: np.random.Generator,
) -> tuple[FlowState, dict]:
    """Perturb-and-test restart after a singular time.

    Samples projected smooth perturbations over the amplitude schedule and
    accepts the first candidate with minimal isolated kernel, strictly
    lower regularized energy, and unchanged homotopy invariants.
    """
    u, alpha = state.u, state.alpha
    e_cur = energy_alpha(u, alpha)
    inv_cur = analysis.homotopy_invariants(u)

    # no-op guard: state may already be fine
    try:
        sol = _solve_spinor(u, state.psi, cfg, tracker)
        new = FlowState(t=state.t, u=u, psi=sol.psi, alpha=alpha, report=sol.report)
        return new, {"attempts": 0, "E_before": e_cur, "E_after": e_cur}
    except KernelNotMinimal:
        pass

    attempts = 0
    for amp in cfg.restart_amplitudes:
        per_amp = max(1, cfg.restart_max_attempts // len(cfg.restart_amplitudes))
        for _ in range(per_amp):
            attempts += 1
            eta = smooth_field(u.domain, rng, u.target.ambient_dim, amp)
            cand = MapField(
                u.target.project(u.values + eta), u.domain, u.target
            )
            e_cand = energy_alpha(cand, alpha)
            if e_cand >= e_cur:
                continue
            try:
                if analysis.homotopy_invariants(cand) != inv_cur:
                    continue
            except Exception:
                continue
            try:
                # candidates are near the current map, so the warm tracker
                # subspace remains a good start for their eigensolves
                sol = solve_constraint(
                    cand, None, tracker=tracker, tau_ker=cfg.tau_ker
                )
            except KernelNotMinimal:
                continue
            if _singular(sol.report, cfg):
                continue
            new = FlowState(
                t=state.t, u=cand, psi=sol.psi, alpha=alpha, report=sol.report
            )
            info = {
                "attempts": attempts,
                "E_before": e_cur,
                "E_after": e_cand,
                "amplitude": amp,
            }
            return new, info
    raise RestartExhausted(
        f"no acceptable restart candidate after {attempts} attempts"
    )


def run_flow(
    cfg: FlowConfig,
    u0: MapField,
    psi0: TwistedSpinorField | None = None,
    tracker: KernelTracker | None = None,
    rng: np.random.Generator | None = None,
    prepared: bool = False,
    t0: float = 0.0,
) -> Trajectory:
    """Evolve until stationarity, the absolute time cfg.t_max, or a
    terminal failure.

    With cfg.spinor the initial spinor is (re)solved from psi0 (or a fresh
    kernel eigenvector); singular times trigger the restart policy.
    ``prepared`` skips the initial projection and constraint solve and
    ``t0`` sets the starting clock, so a checkpointed state resumes
    bit-identically.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if tracker is None and cfg.spinor:
        tracker = KernelTracker(k=cfg.tracker_k, dense_dim_max=cfg.dense_dim_max)
    tau_stat = cfg.stationarity_threshold(u0.domain)

    events: list[FlowEvent] = []
    psi = psi0 if prepared else None
    report = None
    residual0 = 0.0
    if cfg.spinor and not prepared:
        sol = solve_constraint(
            u0.projected(), psi0, phase_ref=psi0, tracker=tracker,
            tau_ker=cfg.tau_ker,
        )
        if _singular(sol.report, cfg):
            raise KernelNotMinimal(sol.report.kernel_dim_complex, sol.report.gap)
        psi = sol.psi
        report = sol.report
        residual0 = sol.residual
    if not prepared:
        u0 = u0.projected()

    state = FlowState(t=t0, u=u0, psi=psi, alpha=cfg.alpha, report=report)
    e0 = energy_alpha(u0, cfg.alpha)
    w0 = cfg.alpha * (1.0 + u0.grad_norm2()) ** (cfg.alpha - 1.0)
    map_res0 = u0.domain.l2_norm(w0[..., None] * map_rhs(u0, psi, cfg.alpha))
    state.diagnostics = {
        "dt": 0.0,
        "E_alpha": e0,
        "E_dirichlet": dirichlet_energy(u0),
        "dissipation": float("nan"),
        "W": 0.0,
        "map_residual": map_res0,
        "gap_lambda": report.gap if report is not None else float("nan"),
        "kernel_dim": report.kernel_dim_complex if report is not None else 0,
        "psi_l2": psi.l2_norm() if psi is not None else 0.0,
        "spinor_residual": residual0,
    }
    traj = Trajectory(
        states=[state],
        events=[],
        times=[t0],
        energies=[e0],
        dissipations=[],
        dts=[],
        config=cfg,
        final_state=state,
    )

    nsteps = 0
    while state.t < cfg.t_max - 1e-14:
        try:
            new_state, diag = step(state, cfg.dt, cfg, tracker)
        except KernelNotMinimal as exc:
            events.append(
                FlowEvent(
                    "SingularTime",
                    state.t,
                    {"kernel_dim": exc.kernel_dim, "gap": exc.gap},
                )
            )
            try:
                state, info = restart_map(state, cfg, tracker, rng)
            except RestartExhausted as rexc:
                events.append(FlowEvent("RestartExhausted", state.t, {}))
                traj.events = events
                traj.final_state = state
                raise RestartExhausted(str(rexc)) from rexc
            events.append(FlowEvent("Restart", state.t, info))
            traj.states.append(state)
            traj.times.append(state.t)
            traj.energies.append(energy_alpha(state.u, cfg.alpha))
            traj.dissipations.append(0.0)
            traj.dts.append(0.0)
            continue
        if diag["rejected"]:
            events.append(
                FlowEvent("StepRejected", state.t, {"halvings": diag["rejected"]})
            )
        state = new_state
        nsteps += 1
        traj.times.append(state.t)
        traj.energies.append(diag["E_alpha"])
        traj.dissipations.append(diag["W"])
        traj.dts.append(diag["dt"])
        if nsteps % cfg.sample_stride == 0:
            traj.states.append(state)
        if diag["dissipation"] < tau_stat:
            events.append(
                FlowEvent("Stationary", state.t, {"dissipation": diag["dissipation"]})
            )
            break
    traj.events = events
    traj.final_state = state
    if traj.states[-1] is not state:
        traj.states.append(state)
    return traj


@dataclass
class ContinuationResult:
    stages: list  # (alpha, Trajectory)
    concentration: object
    psi_norms: list


def alpha_continuation(
    cfg: FlowConfig,
    alphas,
    u0: MapField,
    psi0: TwistedSpinorField | None = None,
    warm_start: bool = True,
    conc_radii=None,
    conc_threshold: float | None = None,
) -> ContinuationResult:
    """Run the flow for each exponent in a strictly decreasing schedule,
    warm-starting each stage from the previous converged state, and scan
    the tail for energy concentration (candidate bubble nodes)."""
    alphas = list(alphas)
    if any(a2 >= a1 for a1, a2 in zip(alphas, alphas[1:])):
        raise ValueError("alpha schedule must be strictly decreasing")
    if alphas and alphas[-1] < 1.0:
        raise ValueError("alpha schedule must stay >= 1")

    stages = []
    psi_norms = []
    u_cur, psi_cur = u0, psi0
    for a in alphas:
        stage_cfg = replace(cfg, alpha=a)
        try:
            traj = run_flow(stage_cfg, u_cur, psi_cur)
        except Exception as exc:
            raise ContinuationAborted(
                f"stage alpha={a} failed: {exc}",
                partial=ContinuationResult(stages, None, psi_norms),
            ) from exc
        stages.append((a, traj))
        final = traj.final_state
        psi_norms.append(final.psi.l2_norm() if final.psi is not None else 0.0)
        if warm_start:
            u_cur, psi_cur = final.u, final.psi

    tail = [traj.final_state.u for _, traj in stages[-max(1, len(stages) // 2 + 1) :]]
    h = max(u0.domain.spacings)
    radii = conc_radii if conc_radii is not None else (8 * h, 4 * h, 2 * h)
    e0 = dirichlet_energy(u0.projected())
    eps = conc_threshold if conc_threshold is not None else 0.1 * max(e0, 1e-12)
    conc = analysis.concentration_monitor(tail, radii, eps)
    return ContinuationResult(stages=stages, concentration=conc, psi_norms=psi_norms)
