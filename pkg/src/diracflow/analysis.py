"""Localized energies, concentration monitoring, Sobolev diagnostics, and
discrete homotopy invariants."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AngleJumpTooLarge, DegreeNotNearInteger, RadiusTooSmall
from .geometry import CircleProduct, MapField, Sphere


def local_energy(u: MapField, center: tuple[int, int], radius: float) -> float:
    """Dirichlet energy of u on the torus ball of the given radius around a
    grid node: (1/2) sum_{ball} |grad u|^2 dA."""
    d = u.domain
    if radius < 2.0 * max(d.spacings):
        raise RadiusTooSmall(f"radius {radius} below two grid cells")
    mask = d.torus_distances(*center) <= radius
    dens = 0.5 * u.grad_norm2()
    return float(np.sum(dens[mask]) * d.cell_area)


def local_energy_field(u: MapField, radius: float) -> np.ndarray:
    """Local energies at every node, computed by convolving the energy
    density with the ball indicator (FFT over the torus)."""
    d = u.domain
    if radius < 2.0 * max(d.spacings):
        raise RadiusTooSmall(f"radius {radius} below two grid cells")
    dens = 0.5 * u.grad_norm2() * d.cell_area
    mask = (d.torus_distances(0, 0) <= radius).astype(float)
    conv = np.real(np.fft.ifft2(np.fft.fft2(dens) * np.fft.fft2(mask)))
    return conv


@dataclass
class ConcentrationReport:
    """Nodes whose local energy stays above the threshold at every radius of
    the shrinking schedule, for every state examined."""

    flagged: list
    radii: tuple
    threshold: float
    local_energies: dict  # radius -> (n1, n2) array from the last state

    @property
    def empty(self) -> bool:
        return len(self.flagged) == 0

    def to_json_dict(self) -> dict:
        return {
            "flagged_nodes": [list(map(int, n)) for n in self.flagged],
            "radii": [float(r) for r in self.radii],
            "threshold": float(self.threshold),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)


def concentration_monitor(
    states, radii, threshold: float
) -> ConcentrationReport:
    """Discrete liminf of local energies over a trajectory tail or alpha
    sequence: a node is flagged when its local energy is >= threshold for
    every state and every radius in the schedule."""
    states = list(states)
    if not states:
        raise ValueError("need at least one state")
    maps = [s if isinstance(s, MapField) else s.u for s in states]
    d = maps[0].domain
    keep = np.ones((d.n1, d.n2), dtype=bool)
    last_fields = {}
    for u in maps:
        for r in radii:
            le = local_energy_field(u, r)
            keep &= le >= threshold
            last_fields[float(r)] = le
    flagged = [tuple(idx) for idx in np.argwhere(keep)]
    return ConcentrationReport(
        flagged=flagged,
        radii=tuple(radii),
        threshold=float(threshold),
        local_energies=last_fields,
    )


def sobolev_diagnostic(psi, u: MapField, p: float) -> tuple[float, float, float]:
    """(||psi||_{W^{1,p}}, ||D psi||_{L^p}, ||psi||_{L^p}) with spectral
    gradients; the test suite bounds the first by the others empirically."""
    if not (1.0 < p < 2.0):
        raise ValueError("p must lie in (1, 2)")
    from .dirac import assemble_operator  # local import to avoid cycle

    d = u.domain

    def lp(f):
        mags = np.sqrt(np.sum(np.abs(f) ** 2, axis=tuple(range(2, f.ndim))))
        return float((np.sum(mags**p) * d.cell_area) ** (1.0 / p))

    g = np.stack(
        [d.spinor_deriv(psi.values, 0), d.spinor_deriv(psi.values, 1)], axis=2
    )
    lp_psi = lp(psi.values)
    lp_grad = lp(np.moveaxis(g, 2, -1))
    w1p = (lp_psi**p + lp_grad**p) ** (1.0 / p)
    op = assemble_operator(u)
    dpsi = op.apply_field(psi.values[..., None])[..., 0]
    return w1p, lp(dpsi), lp_psi


def winding_numbers(u: MapField) -> tuple:
    """Winding of each circle factor along each torus generator, via summed
    angle increments; raises when any increment reaches pi."""
    t = u.target
    w = t.project(u.values)
    out = []
    for i in range(len(t.radii)):
        theta = np.arctan2(w[..., 2 * i + 1], w[..., 2 * i])
        for axis in (0, 1):
            dth = np.diff(theta, axis=axis, append=np.take(theta, [0], axis=axis))
            dth = np.mod(dth + np.pi, 2 * np.pi) - np.pi
            if np.max(np.abs(dth)) >= np.pi * (1 - 1e-9):
                raise AngleJumpTooLarge(
                    "angle increment >= pi; refine the grid"
                )
            total = np.sum(dth, axis=axis)
            k = total / (2 * np.pi)
            k0 = int(np.round(k.ravel()[0]))
            if np.max(np.abs(k - k0)) > 1e-6:
                raise AngleJumpTooLarge("winding number varies across lines")
            out.append(k0)
    return tuple(out)


def sphere_degree(u: MapField) -> int:
    """Degree of a map into S^2 by signed spherical-triangle areas over the
    grid triangulation, snapped to the nearest integer."""
    t = u.target
    w = t.project(u.values) / t.radius
    w00 = w
    w10 = np.roll(w, -1, axis=0)
    w01 = np.roll(w, -1, axis=1)
    w11 = np.roll(np.roll(w, -1, axis=0), -1, axis=1)
    total = _triangle_areas(w00, w10, w11) + _triangle_areas(w00, w11, w01)
    deg = float(np.sum(total) / (4.0 * np.pi))
    snapped = int(np.round(deg))
    if abs(deg - snapped) > 0.1:
        raise DegreeNotNearInteger(f"degree sum {deg:.4f} not near an integer")
    return snapped


def _triangle_areas(a, b, c):
    """Signed spherical areas of unit-vector triangles (van Oosterom-
    Strackee numerator with orientation from the scalar triple product)."""
    triple = np.einsum("xya,xya->xy", a, np.cross(b, c))
    denom = (
        1.0
        + np.einsum("xya,xya->xy", a, b)
        + np.einsum("xya,xya->xy", b, c)
        + np.einsum("xya,xya->xy", a, c)
    )
    return 2.0 * np.arctan2(triple, denom)


def homotopy_invariants(u: MapField) -> tuple:
    """Integer invariants of the homotopy class: winding numbers for circle
    products, the degree for S^2.  Higher spheres only get the trivial
    invariant here."""
    t = u.target
    if isinstance(t, CircleProduct):
        return winding_numbers(u)
    if isinstance(t, Sphere) and t.intrinsic_dim == 2:
        return (sphere_degree(u),)
    return ()
