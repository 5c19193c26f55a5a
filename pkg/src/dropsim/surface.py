"""Differential geometry of spherical-harmonic surfaces.

Conventions fixed here and relied on everywhere else:

  * fundamental-form labels follow the flipped layout
        E = x_phi . x_phi,  F = x_theta . x_phi,  G = x_theta . x_theta,
        L = x_phiphi . n,   M = x_thetaphi . n,   N = x_thetatheta . n,
    with W^2 = EG - F^2;
  * the unit normal n = (x_theta x x_phi)/W points OUT of the drop
    (on the unit sphere x_theta x x_phi = sin(theta) x);
  * H_mean is the signed mean curvature with 2*H_mean = div_gamma(n),
    so H_mean = +1 on the unit sphere. In terms of the forms above that is
    H_mean = -(EN - 2FM + GL)/(2W^2); K_gauss = (LN - M^2)/W^2 is exposed
    for diagnostics only.

All nonlinear products (forms, curvatures, divergences) are evaluated on a
grid upsampled by an integer factor U >= 1 and only then transformed back, to
keep aliasing below the working tolerance. The adaptive policy measures the
spectral tail of the mean curvature.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import sphgrid as sg
from .errors import DegenerateSurfaceError, DimensionMismatchError

log = logging.getLogger(__name__)


def order_of(coeffs: np.ndarray) -> int:
    n = math.isqrt(coeffs.shape[-1])
    if n * n != coeffs.shape[-1]:
        raise DimensionMismatchError(f"coefficient length {coeffs.shape[-1]} is not a square")
    return n - 1


@dataclass(frozen=True)
class SurfaceShape:
    """Three coefficient fields (x, y, z) of one closed surface."""

    coeffs: np.ndarray  # (3, (p+1)^2) complex
    p: int

    def __post_init__(self):
        if self.coeffs.shape != (3, sg.n_modes(self.p)):
            raise DimensionMismatchError(
                f"shape coefficients must be (3, {sg.n_modes(self.p)}), got {self.coeffs.shape}"
            )
        for c in self.coeffs:
            if not sg.is_real_field(c, self.p, tol=1e-8):
                raise DegenerateSurfaceError("surface coefficients lack real-field symmetry")

    def resampled(self, p_to: int) -> "SurfaceShape":
        return SurfaceShape(sg.resample(self.coeffs, self.p, p_to), p_to)

    def translated(self, vec) -> "SurfaceShape":
        c = self.coeffs.copy()
        c[:, 0] += np.asarray(vec, dtype=float) * math.sqrt(4 * math.pi)
        return SurfaceShape(c, self.p)


def from_function(p: int, fn) -> SurfaceShape:
    """Sample fn(theta, phi) -> (3, ...) on the order-p grid and transform."""
    g = sg.build_grid(p)
    th, ph = g.angles()
    vals = np.asarray(fn(th, ph), dtype=float)
    if vals.shape != (3,) + g.shape:
        raise DimensionMismatchError(f"shape function returned {vals.shape}")
    return SurfaceShape(sg.forward_transform(vals, p), p)


def from_radial(p: int, rho_fn) -> SurfaceShape:
    """Star-shaped surface x = rho(theta, phi) * rhat."""

    def fn(th, ph):
        r = rho_fn(th, ph)
        return np.stack([r * np.sin(th) * np.cos(ph), r * np.sin(th) * np.sin(ph), r * np.cos(th)])

    return from_function(p, fn)


def sphere(p: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> SurfaceShape:
    return ellipsoid(p, (radius, radius, radius), center)


def ellipsoid(p: int, semiaxes, center=(0.0, 0.0, 0.0)) -> SurfaceShape:
    a, b, c = semiaxes
    cx, cy, cz = center

    def fn(th, ph):
        return np.stack(
            [
                cx + a * np.sin(th) * np.cos(ph),
                cy + b * np.sin(th) * np.sin(ph),
                cz + c * np.cos(th),
            ]
        )

    return from_function(p, fn)


@dataclass(frozen=True)
class GeometryCache:
    """Immutable grid samples of all geometric quantities at working order q."""

    p: int             # base order of the shape
    q: int             # working (upsampled) order
    upsample: int
    grid: sg.GaussGrid
    coeffs_q: np.ndarray   # (3, (q+1)^2)
    x: np.ndarray          # (3, q+1, 2q+2) positions
    x_t: np.ndarray
    x_p: np.ndarray
    x_tt: np.ndarray
    x_tp: np.ndarray
    x_pp: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    L: np.ndarray
    M: np.ndarray
    N: np.ndarray
    W: np.ndarray
    W2: np.ndarray
    n: np.ndarray          # (3, ...) unit outward normal
    J: np.ndarray          # area dilation W / sin(theta)
    ntilde: np.ndarray     # J * n = (x_t x x_p)/sin(theta)
    H_mean: np.ndarray     # signed, 2 H = div_gamma(n)
    K_gauss: np.ndarray


def geometry(s: SurfaceShape, upsample: int = 1) -> GeometryCache:
    if upsample < 1:
        raise DimensionMismatchError("upsample factor must be >= 1")
    q = s.p * int(upsample)
    cs = sg.resample(s.coeffs, s.p, q)
    g = sg.build_grid(q)
    x = sg.inverse_transform(cs, q).real
    x_t = sg.inverse_transform(cs, q, dtheta=1).real
    x_p = sg.inverse_transform(cs, q, dphi=1).real
    x_tt = sg.inverse_transform(cs, q, dtheta=2).real
    x_tp = sg.inverse_transform(cs, q, dtheta=1, dphi=1).real
    x_pp = sg.inverse_transform(cs, q, dphi=2).real

    E = np.sum(x_p * x_p, axis=0)
    F = np.sum(x_t * x_p, axis=0)
    G = np.sum(x_t * x_t, axis=0)
    W2 = E * G - F * F
    if np.min(W2) <= 0.0:
        raise DegenerateSurfaceError(f"area element vanishes: min W^2 = {np.min(W2):.3e}")
    W = np.sqrt(W2)
    cross = np.cross(x_t, x_p, axis=0)
    n = cross / W
    L = np.sum(x_pp * n, axis=0)
    M = np.sum(x_tp * n, axis=0)
    N = np.sum(x_tt * n, axis=0)
    H = -(E * N - 2 * F * M + G * L) / (2 * W2)
    K = (L * N - M * M) / W2
    sin_t = g.sin_theta[:, None]
    return GeometryCache(
        p=s.p, q=q, upsample=int(upsample), grid=g, coeffs_q=cs,
        x=x, x_t=x_t, x_p=x_p, x_tt=x_tt, x_tp=x_tp, x_pp=x_pp,
        E=E, F=F, G=G, L=L, M=M, N=N, W=W, W2=W2,
        n=n, J=W / sin_t, ntilde=cross / sin_t, H_mean=H, K_gauss=K,
    )


def surface_integral(geo: GeometryCache, values: np.ndarray) -> np.ndarray:
    """Integral over the surface of grid values (leading dims preserved)."""
    c = np.pi / (geo.q + 1)
    return c * np.sum(values * (geo.grid.wt[:, None] * geo.J), axis=(-2, -1))


def area_volume(s: SurfaceShape, upsample: int = 2) -> tuple[float, float]:
    geo = geometry(s, upsample)
    area = float(surface_integral(geo, np.ones(geo.grid.shape)))
    volume = float(surface_integral(geo, np.sum(geo.x * geo.n, axis=0)) / 3.0)
    return area, volume


def centroid(geo: GeometryCache) -> np.ndarray:
    """Volume centroid (1/4V) * surface integral of x (x.n)."""
    xn = np.sum(geo.x * geo.n, axis=0)
    vol = float(surface_integral(geo, xn)) / 3.0
    return surface_integral(geo, geo.x * xn) / (4.0 * vol)


def mean_radius(s: SurfaceShape) -> float:
    """Radius of the sphere with the same area."""
    area, _ = area_volume(s)
    return math.sqrt(area / (4 * math.pi))


def _to_work_order(f: np.ndarray, geo: GeometryCache) -> np.ndarray:
    pf = order_of(f)
    return f if pf == geo.q else sg.resample(f, pf, geo.q)


def surf_grad(f: np.ndarray, geo: GeometryCache) -> np.ndarray:
    """Surface gradient of a scalar coefficient field, as grid values.

    grad f = [(E f_t - F f_p) x_t + (G f_p - F f_t) x_p] / W^2
    (inverse first fundamental form in the flipped labeling above).
    """
    c = _to_work_order(f, geo)
    f_t = sg.inverse_transform(c, geo.q, dtheta=1).real
    f_p = sg.inverse_transform(c, geo.q, dphi=1).real
    a = (geo.E * f_t - geo.F * f_p) / geo.W2
    b = (geo.G * f_p - geo.F * f_t) / geo.W2
    return a * geo.x_t + b * geo.x_p


def surf_div(v: np.ndarray, geo: GeometryCache, warn_tol: float = 1e-8) -> np.ndarray:
    """Surface divergence of a tangential vector grid field.

    Near-tangential inputs are projected onto the tangent plane first; a
    correction larger than warn_tol (relative) is reported as a diagnostic.

    Evaluated as the trace of the tangential Jacobian, div v = sum_i
    (grad_gamma v_i) . e_i. This is identical to the contravariant form
    (1/W)[d_theta(W v^theta) + d_phi(W v^phi)] but only ever transforms the
    Cartesian components, which are smooth scalars on the sphere; the
    contravariant components carry coordinate-pole factors whose expansions
    converge only algebraically and would ruin spectral accuracy.
    """
    if v.shape != (3,) + geo.grid.shape:
        raise DimensionMismatchError(f"expected (3, {geo.grid.shape}), got {v.shape}")
    vn = np.sum(v * geo.n, axis=0)
    scale = max(1e-300, float(np.max(np.abs(v))))
    if np.max(np.abs(vn)) > warn_tol * scale:
        log.warning("surf_div input off-tangent by %.2e (relative); projecting", np.max(np.abs(vn)) / scale)
    vt = v - vn * geo.n
    cs = sg.forward_transform(vt, geo.q)
    f_t = sg.inverse_transform(cs, geo.q, dtheta=1).real
    f_p = sg.inverse_transform(cs, geo.q, dphi=1).real
    a = (geo.E * f_t - geo.F * f_p) / geo.W2
    b = (geo.G * f_p - geo.F * f_t) / geo.W2
    return np.sum(a * geo.x_t + b * geo.x_p, axis=0)


def laplace_beltrami(f: np.ndarray, geo: GeometryCache) -> np.ndarray:
    """Laplace-Beltrami of a scalar coefficient field, as grid values."""
    return surf_div(surf_grad(f, geo), geo, warn_tol=np.inf)


def laplace_beltrami_coeffs(f: np.ndarray, geo: GeometryCache, p_out: int | None = None) -> np.ndarray:
    """Same, returned as coefficients truncated to p_out (default: base order)."""
    vals = laplace_beltrami(f, geo)
    c = sg.forward_transform(vals, geo.q)
    return sg.resample(c, geo.q, p_out if p_out is not None else geo.p)


def adaptive_upsample_rate(s: SurfaceShape, tol: float = 1e-8, u_max: int = 4) -> int:
    """Smallest U with the curvature-spectrum tail above degree p*U/(U+1)
    below tol; returns u_max (with a diagnostic) when no U suffices.

    The tail is measured on the mean-curvature spectrum computed at a fixed
    probe upsampling of 2.
    """
    probe = geometry(s, 2)
    ch = sg.forward_transform(probe.H_mean, probe.q)
    energy = sg.spectral_energy(ch, probe.q)
    total = math.sqrt(float(np.sum(energy**2)))
    if total == 0.0:
        return 1
    for u in range(1, u_max + 1):
        cut = (s.p * u) // (u + 1)
        tail = math.sqrt(float(np.sum(energy[cut + 1 :] ** 2)))
        if tail <= tol * total:
            return u
    log.warning("adaptive upsample hit cap U=%d (curvature tail %.2e)", u_max, tail / total)
    return u_max


def interfacial_force(s: SurfaceShape, gamma: np.ndarray | None, eos, geo: GeometryCache) -> np.ndarray:
    """Traction jump 2 sigma(Gamma) H n - grad_gamma sigma(Gamma) as grid values.

    gamma None or eos None means a clean interface (sigma = 1).
    """
    from .surfactant import eos_sigma

    if gamma is None or eos is None:
        return 2.0 * geo.H_mean * geo.n
    gv = sg.inverse_transform(_to_work_order(gamma, geo), geo.q).real
    sigma = eos_sigma(gv, eos)
    cs = sg.forward_transform(sigma, geo.q)
    marangoni = surf_grad(cs, geo)
    return 2.0 * sigma * geo.H_mean * geo.n - marangoni
