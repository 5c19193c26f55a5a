"""Grid-quality maintenance for spectral surfaces.

Advection drags grid points tangentially and piles spectral mass into
degrees the shape itself does not need.  The fix is to re-parameterize:
flow the grid along the negative surface-projected gradient of a
filtered spectral energy until the high-degree tail is gone.  Tracking
ANGLES in the original parameterization, rather than the points
themselves, keeps every evaluated position exactly on the original
surface and carries any surface field (the surfactant concentration)
along at spectral accuracy: both are re-evaluations of the frozen
original expansions at the final angles.  The legacy point-marching
variant is kept for comparison; its grid leaves the surface by an
amount that grows with the pseudo time step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import sphgrid as sg
from . import surface as sf
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReparamConfig:
    """Knobs for the pseudo-time energy descent.

    p_cutoff: coefficient-mass tail fraction the adaptive cutoff pins;
    filter: "lowpass" zeroes everything below the cutoff and weights the
    rest by 1, "ramp" weights the rest by n/p; eps: stop when the
    surface-projected gradient (relative to the mean radius) drops below
    this; dtau: pseudo time step, halved whenever the energy would grow;
    u_rep: working upsample factor.
    """

    p_cutoff: float = 1e-3
    filter: str = "lowpass"
    eps: float = 1e-4
    i_max: int = 30
    dtau: float = 1.0
    u_rep: int = 2

    def __post_init__(self):
        if not 0.0 < self.p_cutoff < 1.0:
            raise ConfigError(f"p_cutoff must be in (0, 1), got {self.p_cutoff}")
        if self.i_max < 1:
            raise ConfigError(f"i_max must be >= 1, got {self.i_max}")
        if self.u_rep < 1:
            raise ConfigError(f"u_rep must be >= 1, got {self.u_rep}")
        if self.filter not in ("lowpass", "ramp"):
            raise ConfigError(f"unknown filter {self.filter!r}")


def attenuation(n_cutoff: int, p: int, filter: str = "lowpass") -> np.ndarray:
    """Per-mode weights a_nm: zero below the cutoff degree."""
    ns = sg.mode_degrees(p)
    if filter == "lowpass":
        return np.where(ns < n_cutoff, 0.0, 1.0)
    if filter == "ramp":
        return np.where(ns < n_cutoff, 0.0, ns / p)
    raise ConfigError(f"unknown filter {filter!r}")


def energy(coeffs: np.ndarray, a: np.ndarray) -> float:
    """E = sum_nm a_nm |c_n^m|^2, components summed for vector fields."""
    return float(np.sum(a * np.abs(np.asarray(coeffs)) ** 2))


def adaptive_cutoff(coeffs: np.ndarray, p: int, p_cutoff: float) -> int:
    """Smallest l in (1, p] whose tail mass fraction drops below p_cutoff.

    Mass is the plain coefficient-magnitude sum N2(l) = sum_{n>=l} |c_n^m|
    against N1 = N2(1); when no degree satisfies the bound the whole
    resolved band is live and the cutoff falls back to p.
    """
    c = np.asarray(coeffs, dtype=complex).reshape(-1, sg.n_modes(p))
    mags = np.sqrt(np.sum(np.abs(c) ** 2, axis=0))
    per_degree = np.array([mags[n * n : (n + 1) * (n + 1)].sum() for n in range(p + 1)])
    tails = np.cumsum(per_degree[::-1])[::-1]  # tails[l] = N2(l)
    n1 = tails[1]
    if n1 == 0.0:
        return 2
    for l in range(2, p + 1):
        if tails[l] / n1 < p_cutoff:
            return l
    log.info("adaptive cutoff found no degree below tail fraction %g, using p=%d", p_cutoff, p)
    return p


def energy_gradient(coeffs: np.ndarray, p: int, a: np.ndarray) -> np.ndarray:
    """Gradient of the discrete E with respect to the grid values.

    The forward transform is linear with node weight (pi/(p+1)) w_j, so
    dE/dx(theta_j, phi_k) = 2 (pi/(p+1)) w_j * (filtered field)(j, k),
    the filtered field being the inverse transform of a_nm c_n^m.
    """
    filt = sg.inverse_transform(np.asarray(coeffs) * a, p).real
    w = sg.build_grid(p).wt * (math.pi / (p + 1))
    return 2.0 * w[:, None] * filt


def _fold_angles(th, ph):
    # reflect at the poles, wrap in longitude
    th = np.mod(th, 2.0 * math.pi)
    refl = th > math.pi
    th = np.where(refl, 2.0 * math.pi - th, th)
    ph = np.where(refl, ph + math.pi, ph)
    return th, np.mod(ph, 2.0 * math.pi)


def _tangent_gradient(coeffs, q, a):
    """Surface-projected descent direction, plus the chart tangents.

    Descends in the L2(S2) metric: the gradient density is the filtered
    field itself, with the transform's node weight divided out.  The raw
    discrete gradient (energy_gradient) carries that weight, which decays
    like sin(theta) toward the poles and with the grid measure overall,
    so a flow along it stalls on pole rows and its time scale depends on
    the working order.
    """
    filt = sg.inverse_transform(np.asarray(coeffs) * a, q).real
    xt = sg.inverse_transform(coeffs, q, dtheta=1).real
    xp = sg.inverse_transform(coeffs, q, dphi=1).real
    n = np.cross(xt, xp, axis=0)
    n /= np.linalg.norm(n, axis=0)
    g = 2.0 * filt - n * np.sum(n * 2.0 * filt, axis=0)
    return g, xt, xp


def _angle_rates(w, xt, xp):
    """Per-node 2x2 Gram solve for (dtheta/dtau, dphi/dtau)."""
    e11 = np.sum(xt * xt, axis=0)
    e12 = np.sum(xt * xp, axis=0)
    e22 = np.sum(xp * xp, axis=0)
    b1 = np.sum(w * xt, axis=0)
    b2 = np.sum(w * xp, axis=0)
    det = e11 * e22 - e12 * e12
    ok = np.abs(det) >= 1e-14
    nbad = int(np.size(det) - np.count_nonzero(ok))
    if nbad:
        log.debug("skipping %d degenerate-chart nodes this iteration", nbad)
    safe = np.where(ok, det, 1.0)
    tdot = np.where(ok, (e22 * b1 - e12 * b2) / safe, 0.0)
    pdot = np.where(ok, (e11 * b2 - e12 * b1) / safe, 0.0)
    return tdot, pdot


def angle_reparam(
    s: sf.SurfaceShape, gamma: np.ndarray | None, cfg: ReparamConfig = ReparamConfig()
) -> tuple[sf.SurfaceShape, np.ndarray | None, int]:
    """Energy descent on the parameterization angles.

    Per pseudo step: filter weights from the adaptive cutoff, projected
    energy gradient, per-node 2x2 solve for the angle rates, forward
    Euler on the angles, then re-evaluation of the position from the
    ORIGINAL expansion so the surface never moves.  The surfactant
    expansion (if any) is re-evaluated at the final angles once.
    Returns the reparameterized shape, surfactant and the number of
    loop iterations entered.
    """
    p = s.p
    q = p * cfg.u_rep
    c0 = sg.resample(s.coeffs, p, q)  # frozen original expansion
    grid = sg.build_grid(q)
    th, ph = (arr.copy() for arr in grid.angles())
    coeffs = c0.copy()
    rad = sf.mean_radius(s)
    dtau = cfg.dtau
    it = 0
    while it < cfg.i_max:
        it += 1
        nc = adaptive_cutoff(coeffs, q, cfg.p_cutoff)
        a = attenuation(nc, q, cfg.filter)
        e0 = energy(coeffs, a)
        g, xt, xp = _tangent_gradient(coeffs, q, a)
        if np.abs(g).max() / rad < cfg.eps:
            break
        tdot, pdot = _angle_rates(-g, xt, xp)
        while True:
            th2, ph2 = _fold_angles(th + dtau * tdot, ph + dtau * pdot)
            vals = sg.evaluate(c0, q, th2.ravel(), ph2.ravel())[0].real
            c2 = sg.forward_transform(vals.reshape((3,) + grid.shape), q)
            if energy(c2, a) <= e0 * (1.0 + 1e-12):
                break
            dtau *= 0.5
            if dtau < 1e-12:
                log.warning("pseudo step underflow at iteration %d, stopping", it)
                break
        if dtau < 1e-12:
            break
        th, ph, coeffs = th2, ph2, c2
    # final projection in extended precision: the recurrence noise of the
    # order-q evaluation is what limits how exactly surfactant values track
    # the moved positions, so the last evaluate/project pass runs with
    # long-double angles and accumulators
    thl = th.ravel().astype(np.longdouble)
    phl = ph.ravel().astype(np.longdouble)
    vals = sg.evaluate(c0, q, thl, phl)[0].real
    cq = sg.forward_transform(vals.reshape((3,) + grid.shape), q)
    out_shape = sf.SurfaceShape(sg.resample(cq, q, p).astype(complex), p)
    out_gamma = None
    if gamma is not None:
        g0 = sg.resample(gamma, p, q)
        gv = sg.evaluate(g0, q, thl, phl)[0].real
        gq = sg.forward_transform(gv.reshape(grid.shape), q)
        out_gamma = sg.resample(gq, q, p).astype(complex)
    return out_shape, out_gamma, it


def point_reparam(
    s: sf.SurfaceShape, gamma: np.ndarray | None, cfg: ReparamConfig = ReparamConfig()
) -> tuple[sf.SurfaceShape, np.ndarray | None]:
    """Legacy descent: march the grid points themselves.

    Euler steps leave the surface by O(dtau * |w|^2 curvature), so volume
    drifts with the pseudo step size, and the surfactant is pinned to
    grid indices rather than to surface positions: both are the flaws the
    angle scheme removes.  Kept as the comparison baseline.
    """
    p = s.p
    q = p * cfg.u_rep
    grid = sg.build_grid(q)
    coeffs = sg.resample(s.coeffs, p, q)
    x = sg.inverse_transform(coeffs, q).real
    rad = sf.mean_radius(s)
    dtau = cfg.dtau
    it = 0
    while it < cfg.i_max:
        it += 1
        nc = adaptive_cutoff(coeffs, q, cfg.p_cutoff)
        a = attenuation(nc, q, cfg.filter)
        g, _, _ = _tangent_gradient(coeffs, q, a)
        if np.abs(g).max() / rad < cfg.eps:
            break
        # plain Euler commit, no step control: there is no frozen expansion
        # to re-evaluate from, so every step bakes its off-surface drift in
        x2 = x - dtau * g
        c2 = sg.forward_transform(x2, q)
        if not np.isfinite(c2).all():
            log.warning("point descent diverged at iteration %d, keeping last state", it)
            break
        x, coeffs = x2, c2
    out_shape = sf.SurfaceShape(sg.resample(coeffs, q, p), p)
    # gamma values stay attached to grid indices: the expansion passes
    # through unchanged
    return out_shape, None if gamma is None else gamma.copy()
