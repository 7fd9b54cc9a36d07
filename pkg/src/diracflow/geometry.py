"""Discrete flat spin 2-torus and embedded target-manifold calculus.

The domain is a flat 2-torus with spectral (Fourier) differentiation and a
spin structure given by periodic/antiperiodic flags per direction.  Targets
are restricted to round spheres S^n in R^{n+1} and products of circles
(S^1)^n in R^{2n}: both admit closed-form nearest-point projection,
geodesics and parallel transport, so every operation below has an exact
reference the test suite can check against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BeyondInjectivity, NotTangent, TubeViolation

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# domain


@dataclass
class TorusDomain:
    """Uniform grid on a flat 2-torus [0,L1) x [0,L2) with a spin structure.

    ``antiperiodic`` flags the spinor boundary condition per direction;
    map fields are always periodic.  Discrete L^2 inner products use
    ``cell_area`` as the quadrature weight.
    """

    n1: int
    n2: int
    L1: float = TWO_PI
    L2: float = TWO_PI
    antiperiodic: tuple[bool, bool] = (False, False)

    def __post_init__(self):
        for n in (self.n1, self.n2):
            if n < 4 or n % 2 != 0:
                raise ValueError("grid resolutions must be even and >= 4")
        if self.L1 <= 0 or self.L2 <= 0:
            raise ValueError("side lengths must be positive")
        self.antiperiodic = (bool(self.antiperiodic[0]), bool(self.antiperiodic[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def cell_area(self) -> float:
        return self.L1 * self.L2 / (self.n1 * self.n2)

    @property
    def area(self) -> float:
        return self.L1 * self.L2

    @property
    def spacings(self) -> tuple[float, float]:
        return (self.L1 / self.n1, self.L2 / self.n2)

    @property
    def spin_shifts(self) -> tuple[float, float]:
        """Half-integer Fourier shifts: 1/2 per antiperiodic direction."""
        return tuple(0.5 if a else 0.0 for a in self.antiperiodic)

    @cached_property
    def x1(self) -> np.ndarray:
        return np.broadcast_to(
            (np.arange(self.n1) * self.L1 / self.n1)[:, None], self.shape
        ).copy()

    @cached_property
    def x2(self) -> np.ndarray:
        return np.broadcast_to(
            (np.arange(self.n2) * self.L2 / self.n2)[None, :], self.shape
        ).copy()

    def _wavenumbers(self, axis: int, shift: float = 0.0) -> np.ndarray:
        n = (self.n1, self.n2)[axis]
        L = (self.L1, self.L2)[axis]
        k = np.fft.fftfreq(n, d=1.0 / n)
        return TWO_PI * (k + shift) / L

    def _bshape(self, axis: int, ndim: int) -> tuple:
        s = [1] * ndim
        s[axis] = -1
        return tuple(s)

    # -- real (map) fields ---------------------------------------------------

    def deriv(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Spectral first derivative of a periodic real field along axis 0/1.

        The Nyquist multiplier is zeroed so the operator is exactly
        antisymmetric and real-for-real.
        """
        w = self._wavenumbers(axis)
        n = (self.n1, self.n2)[axis]
        w = w.copy()
        w[n // 2] = 0.0
        mult = (1j * w).reshape(self._bshape(axis, f.ndim))
        return np.real(np.fft.ifft(mult * np.fft.fft(f, axis=axis), axis=axis))

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Gradient of a periodic field; returns shape (2,) + f.shape."""
        return np.stack([self.deriv(f, 0), self.deriv(f, 1)])

    def deriv2(self, f: np.ndarray, a: int, b: int) -> np.ndarray:
        """Second derivative d_a d_b of a periodic real field."""
        if a == b:
            w = self._wavenumbers(a)
            mult = (-(w**2)).reshape(self._bshape(a, f.ndim))
            return np.real(np.fft.ifft(mult * np.fft.fft(f, axis=a), axis=a))
        return self.deriv(self.deriv(f, a), b)

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.deriv2(f, 0, 0) + self.deriv2(f, 1, 1)

    def implicit_heat_solve(self, f: np.ndarray, dt: float) -> np.ndarray:
        """Solve (I - dt*Laplacian) u = f spectrally for a periodic field."""
        w1 = self._wavenumbers(0).reshape(-1, *([1] * (f.ndim - 1)))
        w2 = self._wavenumbers(1).reshape(1, -1, *([1] * (f.ndim - 2)))
        fh = np.fft.fft2(f, axes=(0, 1))
        fh /= 1.0 + dt * (w1**2 + w2**2)
        return np.real(np.fft.ifft2(fh, axes=(0, 1)))

    # -- spinor fields -------------------------------------------------------

    @cached_property
    def _spinor_phases(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-axis trivialization phases exp(i*pi*x/L) for antiperiodic
        directions (ones when periodic)."""
        out = []
        for axis, flag in enumerate(self.antiperiodic):
            n = (self.n1, self.n2)[axis]
            if flag:
                out.append(np.exp(1j * np.pi * np.arange(n) / n))
            else:
                out.append(np.ones(n, dtype=complex))
        return tuple(out)

    def spinor_deriv(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Spectral derivative of a complex spinor-component field.

        Respects the spin structure: antiperiodic directions use the
        half-integer shifted frequencies.  Acts along spatial axis 0 or 1;
        trailing axes (spinor slot, ambient index, block) broadcast.
        """
        shift = self.spin_shifts[axis]
        w = self._wavenumbers(axis, shift)
        mult = (1j * w).reshape(self._bshape(axis, f.ndim))
        if shift == 0.0:
            return np.fft.ifft(mult * np.fft.fft(f, axis=axis), axis=axis)
        phase = self._spinor_phases[axis].reshape(self._bshape(axis, f.ndim))
        g = f * np.conj(phase)
        return phase * np.fft.ifft(mult * np.fft.fft(g, axis=axis), axis=axis)

    def spinor_helmholtz_solve(self, f: np.ndarray, c2: float) -> np.ndarray:
        """Apply (-free_laplacian + c2)^-1 per component, spin-structure aware."""
        s1, s2 = self.spin_shifts
        w1 = self._wavenumbers(0, s1).reshape(self._bshape(0, f.ndim))
        w2 = self._wavenumbers(1, s2).reshape(self._bshape(1, f.ndim))
        g = f
        p1 = p2 = None
        if s1 != 0.0:
            p1 = self._spinor_phases[0].reshape(self._bshape(0, f.ndim))
            g = g * np.conj(p1)
        if s2 != 0.0:
            p2 = self._spinor_phases[1].reshape(self._bshape(1, f.ndim))
            g = g * np.conj(p2)
        gh = np.fft.fft2(g, axes=(0, 1))
        gh /= w1**2 + w2**2 + c2
        g = np.fft.ifft2(gh, axes=(0, 1))
        if p1 is not None:
            g = g * p1
        if p2 is not None:
            g = g * p2
        return g

    def free_spectral_radius(self) -> float:
        """Largest |k+s| over the grid frequency window."""
        s1, s2 = self.spin_shifts
        w1 = np.abs(self._wavenumbers(0, s1)).max()
        w2 = np.abs(self._wavenumbers(1, s2)).max()
        return float(np.hypot(w1, w2))

    # -- quadrature ----------------------------------------------------------

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(f) * self.cell_area)

    def l2_inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """Weighted L^2 pairing, conjugate-linear in the first slot."""
        return complex(np.vdot(f, g) * self.cell_area)

    def l2_norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(f) ** 2) * self.cell_area))

    # -- torus metric on the grid --------------------------------------------

    def torus_distances(self, i: int, j: int) -> np.ndarray:
        """Geodesic distance on the flat torus from node (i, j) to all nodes.

        Computed from wrapped integer cell offsets so that equal offsets give
        bitwise-equal distances for every center (ball memberships at exact
        boundary radii stay consistent across centers).
        """
        o1 = np.abs(np.arange(self.n1) - i)
        o1 = np.minimum(o1, self.n1 - o1)
        o2 = np.abs(np.arange(self.n2) - j)
        o2 = np.minimum(o2, self.n2 - o2)
        d1 = o1 * (self.L1 / self.n1)
        d2 = o2 * (self.L2 / self.n2)
        return np.hypot(d1[:, None], d2[None, :])


def smooth_field(
    domain: TorusDomain,
    rng: np.random.Generator,
    components: int,
    amplitude: float = 1.0,
    kmax: int = 2,
) -> np.ndarray:
    """Random band-limited real field, shape (n1, n2, components).

    Sum of Fourier modes with |k_i| <= kmax and normal coefficients, scaled
    so the pointwise sup is about ``amplitude``.
    """
    f = np.zeros((domain.n1, domain.n2, components))
    x1, x2 = domain.x1, domain.x2
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(-kmax, kmax + 1):
            c = rng.standard_normal(components)
            s = rng.standard_normal(components)
            ph = TWO_PI * (k1 * x1 / domain.L1 + k2 * x2 / domain.L2)
            f += np.cos(ph)[:, :, None] * c + np.sin(ph)[:, :, None] * s
    sup = np.max(np.abs(f))
    if sup > 0:
        f *= amplitude / sup
    return f


# ---------------------------------------------------------------------------
# targets


class TargetManifold:
    """Embedded closed target N in R^q with closed-form projection calculus.

    Subclasses provide the nearest-point projection and its first two
    derivatives, geodesics and parallel transport.  All point arguments are
    arrays of shape (..., q) and operations vectorize over leading axes.
    """

    ambient_dim: int
    intrinsic_dim: int
    kind: str

    # subclass API ------------------------------------------------------------

    def _project(self, z):
        raise NotImplementedError

    def proj_jacobian(self, z):
        raise NotImplementedError

    def proj_hessian(self, z):
        raise NotImplementedError

    def ambient_distance_to_target(self, z):
        raise NotImplementedError

    def exp_map(self, p, v):
        raise NotImplementedError

    def log_map(self, p, q):
        raise NotImplementedError

    def transport_matrix(self, p, q):
        """Ambient rotation realizing parallel transport from p to q,
        shape (..., q, q).  Acts as the identity on normal directions of the
        geodesic plane, so it also transports frames."""
        raise NotImplementedError

    @property
    def tube_radius(self) -> float:
        raise NotImplementedError

    @property
    def weingarten_bound(self) -> float:
        raise NotImplementedError

    @property
    def injectivity_radius(self) -> float:
        raise NotImplementedError

    def base_point(self) -> np.ndarray:
        raise NotImplementedError

    def random_points(self, rng, n):
        raise NotImplementedError

    def tangent_basis(self, p):
        """Orthonormal tangent frames, shape (..., q, intrinsic_dim)."""
        raise NotImplementedError

    # shared operations --------------------------------------------------------

    def check_tube(self, z):
        d = self.ambient_distance_to_target(z)
        if np.any(d > self.tube_radius * (1 + 1e-12)):
            raise TubeViolation(
                f"distance to target {np.max(d):.3e} exceeds tube radius "
                f"{self.tube_radius:.3e}"
            )

    def project(self, z):
        """Nearest-point projection pi: N_delta -> N."""
        self.check_tube(z)
        return self._project(z)

    def tangent_projector(self, p):
        """Orthogonal projector onto T_pN for p on N (= proj_jacobian there)."""
        return self.proj_jacobian(p)

    def check_tangent(self, p, X, tol=1e-10):
        P = self.tangent_projector(p)
        res = np.einsum("...ab,...b->...a", P, X) - X
        scale = max(1.0, float(np.max(np.linalg.norm(X, axis=-1))))
        if np.max(np.linalg.norm(res, axis=-1)) > tol * scale:
            raise NotTangent("vector not tangent to target at base point")

    def second_fundamental_form(self, p, X, Y, tol=1e-10):
        """II(X, Y) at p on N; normal-valued, symmetric, bilinear."""
        self.check_tangent(p, X, tol)
        self.check_tangent(p, Y, tol)
        H = self.proj_hessian(p)
        return np.einsum("...abc,...b,...c->...a", H, X, Y)

    def geodesic_distance(self, p, q):
        v = self.log_map(p, q)
        return np.linalg.norm(v, axis=-1)

    def parallel_transport(self, p, q, X, tol=1e-10):
        self.check_tangent(p, X, tol)
        R = self.transport_matrix(p, q)
        return np.einsum("...ab,...b->...a", R, X)

    def distance_comparison(self, p, q):
        """Ratio d^N(p,q) / |p-q|_2, with the p = q limit reported as 1."""
        dN = np.asarray(self.geodesic_distance(p, q), dtype=float)
        chord = np.asarray(np.linalg.norm(np.asarray(q) - np.asarray(p), axis=-1))
        out = np.ones_like(dN)
        nz = chord > 0
        out[nz] = dN[nz] / chord[nz]
        return out if out.ndim else float(out)


class Sphere(TargetManifold):
    """Round sphere S^n of radius r embedded in R^{n+1}."""

    kind = "sphere"

    def __init__(self, intrinsic_dim: int = 2, radius: float = 1.0):
        if intrinsic_dim < 1:
            raise ValueError("sphere dimension must be >= 1")
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.intrinsic_dim = intrinsic_dim
        self.ambient_dim = intrinsic_dim + 1
        self.radius = float(radius)

    @property
    def tube_radius(self) -> float:
        return self.radius / 2.0

    @property
    def weingarten_bound(self) -> float:
        return 1.0 / self.radius

    @property
    def injectivity_radius(self) -> float:
        return np.pi * self.radius

    def base_point(self):
        p = np.zeros(self.ambient_dim)
        p[-1] = self.radius
        return p

    def random_points(self, rng, n):
        z = rng.standard_normal((n, self.ambient_dim))
        return self.radius * z / np.linalg.norm(z, axis=-1, keepdims=True)

    def ambient_distance_to_target(self, z):
        return np.abs(np.linalg.norm(z, axis=-1) - self.radius)

    def _project(self, z):
        r = np.linalg.norm(z, axis=-1, keepdims=True)
        return self.radius * z / r

    def proj_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        r = np.linalg.norm(z, axis=-1)
        zh = z / r[..., None]
        eye = np.eye(self.ambient_dim)
        return (self.radius / r)[..., None, None] * (
            eye - zh[..., :, None] * zh[..., None, :]
        )

    def proj_hessian(self, z):
        z = np.asarray(z, dtype=float)
        q = self.ambient_dim
        r = np.linalg.norm(z, axis=-1)
        zh = z / r[..., None]
        eye = np.eye(q)
        d_ab_c = eye[:, :, None] * zh[..., None, None, :]
        d_ac_b = eye[:, None, :] * zh[..., None, :, None]
        d_bc_a = eye[None, :, :] * zh[..., :, None, None]
        zzz = zh[..., :, None, None] * zh[..., None, :, None] * zh[..., None, None, :]
        return (self.radius / r**2)[..., None, None, None] * (
            -(d_ab_c + d_ac_b + d_bc_a) + 3.0 * zzz
        )

    def _angles(self, p, q):
        c = np.einsum("...a,...a->...", p, q) / self.radius**2
        return np.arccos(np.clip(c, -1.0, 1.0))

    def exp_map(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        nv = np.linalg.norm(v, axis=-1)
        theta = nv / self.radius
        out = np.where(
            nv[..., None] > 0,
            np.cos(theta)[..., None] * p
            + np.sin(theta)[..., None]
            * self.radius
            * v
            / np.where(nv[..., None] > 0, nv[..., None], 1.0),
            p * np.ones_like(v[..., :1]) + 0.0 * v,
        )
        return out

    def log_map(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        theta = self._angles(p, q)
        if np.any(theta >= np.pi * (1 - 1e-9)):
            raise BeyondInjectivity("antipodal points have no unique geodesic")
        w = q - (np.einsum("...a,...a->...", q, p) / self.radius**2)[..., None] * p
        nw = np.linalg.norm(w, axis=-1)
        coef = np.where(nw > 0, self.radius * theta / np.where(nw > 0, nw, 1.0), 0.0)
        return coef[..., None] * w

    def transport_matrix(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        a = p / self.radius
        theta = self._angles(p, q)
        if np.any(theta >= np.pi * (1 - 1e-9)):
            raise BeyondInjectivity("antipodal points have no unique geodesic")
        w = q / self.radius - np.cos(theta)[..., None] * a
        nw = np.linalg.norm(w, axis=-1)
        # w direction undefined for p = q; rotation degenerates to identity
        wh = w / np.where(nw[..., None] > 0, nw[..., None], 1.0)
        eye = np.eye(self.ambient_dim)
        sin = np.sin(theta)[..., None, None]
        cosm1 = (np.cos(theta) - 1.0)[..., None, None]
        aw = a[..., :, None] * wh[..., None, :]
        wa = wh[..., :, None] * a[..., None, :]
        aa = a[..., :, None] * a[..., None, :]
        ww = wh[..., :, None] * wh[..., None, :]
        return eye + sin * (wa - aw) + cosm1 * (aa + ww)


class CircleProduct(TargetManifold):
    """Flat torus target (S^1)^n embedded in R^{2n} as a product of circles."""

    kind = "circle_product"

    def __init__(self, radii=(1.0,)):
        radii = tuple(float(r) for r in radii)
        if not radii or any(r <= 0 for r in radii):
            raise ValueError("need at least one positive radius")
        self.radii = radii
        self.intrinsic_dim = len(radii)
        self.ambient_dim = 2 * len(radii)

    @property
    def tube_radius(self) -> float:
        return min(self.radii) / 2.0

    @property
    def weingarten_bound(self) -> float:
        return 1.0 / min(self.radii)

    @property
    def injectivity_radius(self) -> float:
        return np.pi * min(self.radii)

    def base_point(self):
        p = np.zeros(self.ambient_dim)
        for i, r in enumerate(self.radii):
            p[2 * i] = r
        return p

    def random_points(self, rng, n):
        th = rng.uniform(0, TWO_PI, size=(n, len(self.radii)))
        out = np.empty((n, self.ambient_dim))
        for i, r in enumerate(self.radii):
            out[:, 2 * i] = r * np.cos(th[:, i])
            out[:, 2 * i + 1] = r * np.sin(th[:, i])
        return out

    def _factors(self, z):
        return [z[..., 2 * i : 2 * i + 2] for i in range(len(self.radii))]

    def ambient_distance_to_target(self, z):
        z = np.asarray(z, dtype=float)
        d2 = 0.0
        for i, r in enumerate(self.radii):
            ri = np.linalg.norm(z[..., 2 * i : 2 * i + 2], axis=-1)
            d2 = d2 + (ri - r) ** 2
        return np.sqrt(d2)

    def _project(self, z):
        z = np.asarray(z, dtype=float)
        out = np.empty_like(z)
        for i, r in enumerate(self.radii):
            blk = z[..., 2 * i : 2 * i + 2]
            out[..., 2 * i : 2 * i + 2] = r * blk / np.linalg.norm(
                blk, axis=-1, keepdims=True
            )
        return out

    def proj_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        q = self.ambient_dim
        out = np.zeros(z.shape[:-1] + (q, q))
        eye = np.eye(2)
        for i, r in enumerate(self.radii):
            blk = z[..., 2 * i : 2 * i + 2]
            rn = np.linalg.norm(blk, axis=-1)
            zh = blk / rn[..., None]
            out[..., 2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = (r / rn)[
                ..., None, None
            ] * (eye - zh[..., :, None] * zh[..., None, :])
        return out

    def proj_hessian(self, z):
        z = np.asarray(z, dtype=float)
        q = self.ambient_dim
        out = np.zeros(z.shape[:-1] + (q, q, q))
        eye = np.eye(2)
        for i, r in enumerate(self.radii):
            blk = z[..., 2 * i : 2 * i + 2]
            rn = np.linalg.norm(blk, axis=-1)
            zh = blk / rn[..., None]
            d_ab_c = eye[:, :, None] * zh[..., None, None, :]
            d_ac_b = eye[:, None, :] * zh[..., None, :, None]
            d_bc_a = eye[None, :, :] * zh[..., :, None, None]
            zzz = (
                zh[..., :, None, None]
                * zh[..., None, :, None]
                * zh[..., None, None, :]
            )
            s = slice(2 * i, 2 * i + 2)
            out[..., s, s, s] = (r / rn**2)[..., None, None, None] * (
                -(d_ab_c + d_ac_b + d_bc_a) + 3.0 * zzz
            )
        return out

    def _angles_of(self, z):
        return [
            np.arctan2(z[..., 2 * i + 1], z[..., 2 * i]) for i in range(len(self.radii))
        ]

    def log_map(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        out = np.empty(np.broadcast_shapes(p.shape, q.shape))
        pb = np.broadcast_to(p, out.shape)
        qb = np.broadcast_to(q, out.shape)
        for i, r in enumerate(self.radii):
            tp = np.arctan2(pb[..., 2 * i + 1], pb[..., 2 * i])
            tq = np.arctan2(qb[..., 2 * i + 1], qb[..., 2 * i])
            d = np.mod(tq - tp + np.pi, TWO_PI) - np.pi
            if np.any(np.abs(d) >= np.pi * (1 - 1e-9)):
                raise BeyondInjectivity("opposite circle points on a factor")
            tang = np.stack([-np.sin(tp), np.cos(tp)], axis=-1)
            out[..., 2 * i : 2 * i + 2] = (r * d)[..., None] * tang
        return out

    def exp_map(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.empty(np.broadcast_shapes(p.shape, v.shape))
        pb = np.broadcast_to(p, out.shape)
        vb = np.broadcast_to(v, out.shape)
        for i, r in enumerate(self.radii):
            tp = np.arctan2(pb[..., 2 * i + 1], pb[..., 2 * i])
            tang = np.stack([-np.sin(tp), np.cos(tp)], axis=-1)
            dth = np.einsum("...a,...a->...", vb[..., 2 * i : 2 * i + 2], tang) / r
            t = tp + dth
            out[..., 2 * i] = r * np.cos(t)
            out[..., 2 * i + 1] = r * np.sin(t)
        return out

    def transport_matrix(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        shape = np.broadcast_shapes(p.shape, q.shape)
        pb = np.broadcast_to(p, shape)
        qb = np.broadcast_to(q, shape)
        out = np.zeros(shape[:-1] + (self.ambient_dim, self.ambient_dim))
        for i in range(len(self.radii)):
            tp = np.arctan2(pb[..., 2 * i + 1], pb[..., 2 * i])
            tq = np.arctan2(qb[..., 2 * i + 1], qb[..., 2 * i])
            d = np.mod(tq - tp + np.pi, TWO_PI) - np.pi
            if np.any(np.abs(d) >= np.pi * (1 - 1e-9)):
                raise BeyondInjectivity("opposite circle points on a factor")
            c, s = np.cos(d), np.sin(d)
            out[..., 2 * i, 2 * i] = c
            out[..., 2 * i, 2 * i + 1] = -s
            out[..., 2 * i + 1, 2 * i] = s
            out[..., 2 * i + 1, 2 * i + 1] = c
        return out

    def geodesic_distance(self, p, q):
        v = self.log_map(p, q)
        return np.linalg.norm(v, axis=-1)


def make_target(kind: str, **kwargs) -> TargetManifold:
    if kind == "sphere":
        return Sphere(
            intrinsic_dim=kwargs.get("intrinsic_dim", 2),
            radius=kwargs.get("radius", 1.0),
        )
    if kind == "circle_product":
        return CircleProduct(radii=kwargs.get("radii", (1.0,)))
    raise ValueError(f"unknown target kind {kind!r}")


def tangent_basis(target: TargetManifold, p: np.ndarray) -> np.ndarray:
    """Orthonormal tangent frames at points p, shape (..., q, n).

    Built by Gram-Schmidt on the projected ambient basis; frames are only
    locally smooth in p, which is all the samplers here need.
    """
    p = np.asarray(p, dtype=float)
    q = target.ambient_dim
    n = target.intrinsic_dim
    flat = p.reshape(-1, q)
    P = target.tangent_projector(flat)
    frames = np.zeros((flat.shape[0], q, n))
    for m in range(flat.shape[0]):
        cols = P[m]
        order = np.argsort(-np.linalg.norm(cols, axis=0))
        basis = []
        for a in order:
            v = cols[:, a].copy()
            for b in basis:
                v -= np.dot(b, v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                basis.append(v / nv)
            if len(basis) == n:
                break
        if len(basis) < n:
            raise RuntimeError("failed to build tangent frame")
        frames[m] = np.stack(basis, axis=-1)
    return frames.reshape(p.shape[:-1] + (q, n))


Sphere.tangent_basis = lambda self, p: tangent_basis(self, p)
CircleProduct.tangent_basis = lambda self, p: tangent_basis(self, p)


# ---------------------------------------------------------------------------
# constants scheme and map fields


@dataclass
class ConstantsScheme:
    """Appendix-style smallness constants (epsilon, delta0, delta, R).

    Validated against the target at construction: 2*eps < inj(N),
    delta < min(delta0/4, eps*(1 - delta0*C)/4), R <= delta, delta0 < 1/C.
    """

    epsilon: float
    delta0: float
    delta: float
    ball_radius: float

    @classmethod
    def for_target(cls, target: TargetManifold) -> "ConstantsScheme":
        C = target.weingarten_bound
        inj = target.injectivity_radius
        delta0 = 0.5 / C
        eps = 0.25 * inj
        delta = 0.9 * min(delta0 / 4.0, eps * (1.0 - delta0 * C) / 4.0)
        return cls(epsilon=eps, delta0=delta0, delta=delta, ball_radius=delta)

    def validate(self, target: TargetManifold) -> None:
        C = target.weingarten_bound
        if not (0 < self.delta0 < 1.0 / C):
            raise ValueError("need 0 < delta0 < 1/C")
        if not (2 * self.epsilon < target.injectivity_radius):
            raise ValueError("need 2*eps < injectivity radius")
        if not (
            self.delta
            < min(self.delta0 / 4.0, self.epsilon * (1.0 - self.delta0 * C) / 4.0)
        ):
            raise ValueError("delta too large for the constants scheme")
        if not (0 < self.ball_radius <= self.delta):
            raise ValueError("need 0 < R <= delta")


@dataclass
class MapField:
    """Discrete map u: grid -> R^q, expected on (or near) the target."""

    values: np.ndarray
    domain: TorusDomain
    target: TargetManifold

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.domain.n1, self.domain.n2, self.target.ambient_dim)
        if self.values.shape != expect:
            raise ValueError(f"map values must have shape {expect}")

    def copy(self) -> "MapField":
        return MapField(self.values.copy(), self.domain, self.target)

    def on_target_residual(self) -> float:
        w = self.target.project(self.values)
        return float(np.max(np.linalg.norm(self.values - w, axis=-1)))

    def on_target(self, tol: float = 1e-9) -> bool:
        return self.on_target_residual() <= tol

    def projected(self) -> "MapField":
        return MapField(self.target.project(self.values), self.domain, self.target)

    def grad(self) -> np.ndarray:
        """Spectral gradient, shape (2, n1, n2, q)."""
        return self.domain.grad(self.values)

    def grad_norm2(self) -> np.ndarray:
        g = self.grad()
        return np.sum(g[0] ** 2 + g[1] ** 2, axis=-1)

    def c0_distance(self, other: "MapField") -> float:
        return float(np.max(np.linalg.norm(self.values - other.values, axis=-1)))


def constant_map(
    domain: TorusDomain, target: TargetManifold, point=None
) -> MapField:
    p = target.base_point() if point is None else np.asarray(point, dtype=float)
    vals = np.broadcast_to(p, (domain.n1, domain.n2, target.ambient_dim)).copy()
    return MapField(vals, domain, target)


def winding_map(
    domain: TorusDomain, target: CircleProduct, k1: int, k2: int, factor: int = 0
) -> MapField:
    """Map winding (k1, k2) times around one circle factor, constant on rest."""
    if target.kind != "circle_product":
        raise ValueError("winding initial data needs a circle-product target")
    th = TWO_PI * (k1 * domain.x1 / domain.L1 + k2 * domain.x2 / domain.L2)
    vals = np.broadcast_to(
        target.base_point(), (domain.n1, domain.n2, target.ambient_dim)
    ).copy()
    r = target.radii[factor]
    vals[:, :, 2 * factor] = r * np.cos(th)
    vals[:, :, 2 * factor + 1] = r * np.sin(th)
    return MapField(vals, domain, target)


def perturbed_map(
    base: MapField, amplitude: float, seed: int, kmax: int = 2
) -> MapField:
    """Projected smooth random perturbation of a base map."""
    rng = np.random.default_rng(seed)
    eta = smooth_field(base.domain, rng, base.target.ambient_dim, amplitude, kmax)
    vals = base.target.project(base.values + eta)
    return MapField(vals, base.domain, base.target)


def degree_one_map(
    domain: TorusDomain, target: Sphere, spread: float = 1.5, center=None
) -> MapField:
    """Degree-one map T^2 -> S^2: a smoothstep polar bump of the given
    spread wrapped over the sphere, constant (south pole) outside."""
    if target.kind != "sphere" or target.intrinsic_dim != 2:
        raise ValueError("degree-one bump needs an S^2 target")
    c1, c2 = (
        (domain.L1 / 2.0, domain.L2 / 2.0) if center is None else center
    )
    d1 = np.abs(domain.x1 - c1)
    d1 = np.minimum(d1, domain.L1 - d1)
    d2 = np.abs(domain.x2 - c2)
    d2 = np.minimum(d2, domain.L2 - d2)
    r = np.hypot(d1, d2)
    t = np.clip(r / spread, 0.0, 1.0)
    theta = np.pi * (t * t * (3.0 - 2.0 * t))
    phi = np.arctan2(-(domain.x2 - c2 + 1e-30), -(domain.x1 - c1 + 1e-30))
    vals = target.radius * np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)],
        axis=-1,
    )
    return MapField(vals, domain, target)
