"""Layer-potential quadrature over spherical-harmonic surfaces.

Three regimes, selected by the distance between target and source surface:

* well separated: plain Gauss/trapezoid product rule on the source grid,
* intermediate: same rule on an upsampled grid,
* nearest: the target is projected onto the surface (damped Newton), the
  on-surface limit is taken from the self-interaction expansion, values at a
  short ladder of points along the surface-to-target ray are computed on the
  upsampled grid, and a 1D barycentric Lagrange interpolant through the
  ladder recovers the value at the target.

On-surface (singular) integrals use the rotation trick: for each grid
target the shape and density expansions are rotated so the target sits at
the north pole, where a modified set of latitude weights integrates the
1/r singularity accurately.  The per-target rule is linear in the density
grid values, so a dense self-interaction matrix can be assembled once per
shape and reused across solver iterations.

Kernels (x0 = target, x source point, xh = x0 - x, r = |xh|):
  single:  f/r + xh (xh . f) / r^3
  double: -6 (xh . u)(xh . n) xh / r^5
The double layer is evaluated in the principal-value sense on-surface.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import sphgrid as sg
from . import surface as sf
from .errors import DegenerateSurfaceError, NonConvergenceError

log = logging.getLogger(__name__)

_TARGET_CHUNK = 256


# ---------------------------------------------------------------------------
# regular product rule


def quad_weights(geo: sf.GeometryCache) -> np.ndarray:
    """Full scalar quadrature weights on the geometry grid.

    sum(quad_weights * f) approximates the surface integral of f.
    """
    g = geo.grid
    w = (math.pi / (g.p + 1)) * (g.wt / g.sin_theta)
    return w[:, None] * geo.W


def regular_integrate(values: np.ndarray, geo: sf.GeometryCache) -> float:
    return sf.surface_integral(geo, values)


def eval_layer(
    geo: sf.GeometryCache,
    density: np.ndarray,
    kernel: str,
    targets: np.ndarray,
) -> np.ndarray:
    """Layer potential at off-surface targets by the plain product rule.

    density: grid values, shape (3, nlat, nlon) on geo's grid.
    targets: (T, 3).  Returns (3, T).  No singularity handling: accuracy
    degrades as targets approach the surface.
    """
    if kernel not in ("single", "double"):
        raise ValueError(f"unknown kernel {kernel!r}")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    xs = geo.x.reshape(3, -1).T  # (G, 3)
    fs = np.asarray(density, dtype=float).reshape(3, -1).T  # (G, 3)
    w = quad_weights(geo).ravel()
    ns = geo.n.reshape(3, -1).T
    out = np.empty((3, len(targets)))
    for lo in range(0, len(targets), _TARGET_CHUNK):
        sel = slice(lo, lo + _TARGET_CHUNK)
        xh = targets[sel, None, :] - xs[None, :, :]  # (t, G, 3)
        r2 = np.einsum("tgi,tgi->tg", xh, xh)
        r = np.sqrt(r2)
        if kernel == "single":
            xf = np.einsum("tgi,gi->tg", xh, fs)
            vals = fs[None] / r[..., None] + xh * (xf / (r2 * r))[..., None]
            out[:, sel] = np.einsum("g,tgi->it", w, vals)
        else:
            xu = np.einsum("tgi,gi->tg", xh, fs)
            xn = np.einsum("tgi,gi->tg", xh, ns)
            c = -6.0 * w[None] * xu * xn / (r2 * r2 * r)
            out[:, sel] = np.einsum("tg,tgi->it", c, xh)
    return out


# ---------------------------------------------------------------------------
# singular rule (on-surface targets)


def singular_weights(p: int) -> np.ndarray:
    """Latitude weights integrating g(x) J / |x - pole| against the grid.

    w_j^s = pi/(p+1) * w_j^Gauss * 2 sin(theta_j/2) * sum_{n<=p} P_n(cos theta_j).
    Depends only on p.  The truncated Legendre sum is the degree-p part of
    1/(2 sin(theta/2)), so the rule is the discrete inner product of the
    smooth factor with that kernel; with these weights the unit-sphere
    potential of a unit density comes out 4 pi exactly at every p.
    """
    g = sg.build_grid(p)
    pn_sum = np.polynomial.legendre.legval(g.t, np.ones(p + 1))
    return (math.pi / (p + 1)) * g.wt * 2.0 * np.sin(g.theta / 2.0) * pn_sum


def _pointwise_rows(kernel, x0, xr, ntr, w_row, dens=None):
    """Per-node kernel contributions in the rotated frame.

    xr, ntr: rotated surface points and vector areas, (..., 3, nlat, nlon).
    w_row: singular weights broadcast over latitude.  With dens (same layout
    as xr) returns the 3-vector quadrature sum; without, returns the six
    unique components (xx, xy, xz, yy, yz, zz) of the symmetric per-node
    weight matrix B such that value = sum_nodes B . dens.
    """
    xh = x0[..., :, None, None] - xr
    r2 = np.einsum("...ijk,...ijk->...jk", xh, xh)
    r = np.sqrt(r2)
    if kernel == "single":
        jac = np.sqrt(np.einsum("...ijk,...ijk->...jk", ntr, ntr))
        base = w_row * jac / r
        quad = base / r2
        if dens is not None:
            xf = np.einsum("...ijk,...ijk->...jk", xh, dens)
            return np.einsum("...jk,...ijk->...i", base, dens) + np.einsum(
                "...jk,...ijk->...i", quad * xf, xh
            )
        comps = [
            base + quad * xh[..., 0, :, :] ** 2,
            quad * xh[..., 0, :, :] * xh[..., 1, :, :],
            quad * xh[..., 0, :, :] * xh[..., 2, :, :],
            base + quad * xh[..., 1, :, :] ** 2,
            quad * xh[..., 1, :, :] * xh[..., 2, :, :],
            base + quad * xh[..., 2, :, :] ** 2,
        ]
        return np.stack(comps, axis=-3)
    xn = np.einsum("...ijk,...ijk->...jk", xh, ntr)
    c = -6.0 * w_row * xn / (r2 * r2 * r)
    if dens is not None:
        xu = np.einsum("...ijk,...ijk->...jk", xh, dens)
        return np.einsum("...jk,...ijk->...i", c * xu, xh)
    comps = [
        c * xh[..., 0, :, :] ** 2,
        c * xh[..., 0, :, :] * xh[..., 1, :, :],
        c * xh[..., 0, :, :] * xh[..., 2, :, :],
        c * xh[..., 1, :, :] ** 2,
        c * xh[..., 1, :, :] * xh[..., 2, :, :],
        c * xh[..., 2, :, :] ** 2,
    ]
    return np.stack(comps, axis=-3)


class SelfQuad:
    """Singular quadrature engine for one shape.

    Rotations of the shape expansion are cached per latitude row; the
    density-independent self-interaction matrices are built lazily per
    kernel.  apply() uses the matrices; apply_direct() redoes the rotation
    of the density per target row and is preferred for one-off evaluations
    at large p where the matrices would not fit comfortably.
    """

    def __init__(self, s: sf.SurfaceShape):
        self.shape = s
        self.p = s.p
        self.grid = sg.build_grid(s.p)
        self.x = sg.inverse_transform(s.coeffs, s.p).real  # (3, nlat, nlon)
        self._ws = singular_weights(s.p)
        self._rows = {}
        self._mats = {}

    # rotated-frame geometry for every target in latitude row t
    def _row(self, t: int):
        if t not in self._rows:
            plan = sg._plan(self.p)
            dmats = plan.wigner_rows()[t]
            xr_c = sg.rotate_to_pole_batch(self.shape.coeffs, self.p, dmats, self.grid.phi)
            vals = sg.inverse_transform(xr_c, self.p)  # (3, K, nlat, nlon)
            vt = sg.inverse_transform(xr_c, self.p, dtheta=1)
            vp = sg.inverse_transform(xr_c, self.p, dphi=1)
            xr = vals.real.transpose(1, 0, 2, 3)  # (K, 3, nlat, nlon)
            xt = vt.real.transpose(1, 0, 2, 3)
            xp = vp.real.transpose(1, 0, 2, 3)
            ntr = np.cross(xt, xp, axisa=1, axisb=1).transpose(0, 3, 1, 2)
            ntr = ntr / self.grid.sin_theta[:, None]
            self._rows[t] = (dmats, xr, ntr)
        return self._rows[t]

    def matrices(self, kernel: str) -> np.ndarray:
        """Six (G, G) blocks (xx, xy, xz, yy, yz, zz); G = nlat*nlon."""
        if kernel not in self._mats:
            nlat, nlon = self.grid.shape
            G = nlat * nlon
            nm = sg.n_modes(self.p)
            M = np.empty((6, G, G))
            w_row = self._ws[:, None]
            for t in range(nlat):
                dmats, xr, ntr = self._row(t)
                x0 = np.ascontiguousarray(self.x[:, t, :].T)  # (K, 3)
                fields = _pointwise_rows(kernel, x0, xr, ntr, w_row)  # (K,6,nlat,nlon)
                cs = sg.synthesis_adjoint(fields.reshape(nlon * 6, nlat, nlon), self.p)
                cs = cs.reshape(nlon, 6, nm).transpose(1, 0, 2)  # (6, K, nm)
                cs = sg.rotate_adjoint_batch(cs, self.p, dmats, self.grid.phi)
                rows = sg.analysis_adjoint(cs.reshape(6 * nlon, nm), self.p).real
                M[:, t * nlon : (t + 1) * nlon, :] = rows.reshape(6, nlon, G)
            self._mats[kernel] = M
        return self._mats[kernel]

    def apply(self, density: np.ndarray, kernel: str) -> np.ndarray:
        """Self-interaction field from density grid values (3, nlat, nlon)."""
        M = self.matrices(kernel)
        d = np.asarray(density, dtype=float).reshape(3, -1)
        ox = M[0] @ d[0] + M[1] @ d[1] + M[2] @ d[2]
        oy = M[1] @ d[0] + M[3] @ d[1] + M[4] @ d[2]
        oz = M[2] @ d[0] + M[4] @ d[1] + M[5] @ d[2]
        return np.stack([ox, oy, oz]).reshape((3,) + self.grid.shape)

    def apply_direct(self, density_coeffs: np.ndarray, kernel: str) -> np.ndarray:
        """Same field, rotating the density expansion per target row."""
        nlat, nlon = self.grid.shape
        out = np.empty((3, nlat, nlon))
        w_row = self._ws[:, None]
        for t in range(nlat):
            dmats, xr, ntr = self._row(t)
            dc = sg.rotate_to_pole_batch(density_coeffs, self.p, dmats, self.grid.phi)
            dv = sg.inverse_transform(dc, self.p).real.transpose(1, 0, 2, 3)
            x0 = np.ascontiguousarray(self.x[:, t, :].T)
            out[:, t, :] = _pointwise_rows(kernel, x0, xr, ntr, w_row, dens=dv).T
        return out

    def field_coeffs(self, density: np.ndarray, kernel: str) -> np.ndarray:
        """Expansion of the self-interaction field (for near-zone limits)."""
        return sg.forward_transform(self.apply(density, kernel), self.p)


# ---------------------------------------------------------------------------
# target classification

Region = Enum("Region", ["FAR", "MID", "NEAR"])


def grid_spacing(s: sf.SurfaceShape) -> float:
    """h = R pi/(p+1) with R the mean radius sqrt(area/4pi)."""
    area, _ = sf.area_volume(s)
    return math.sqrt(area / (4 * math.pi)) * math.pi / (s.p + 1)


class CellList:
    """Uniform spatial bins over a point cloud, bin edge = search radius."""

    def __init__(self, points: np.ndarray, edge: float):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        self.edge = float(edge)
        self.origin = self.points.min(axis=0)
        keys = np.floor((self.points - self.origin) / self.edge).astype(np.int64)
        self._bins = {}
        for i, k in enumerate(map(tuple, keys)):
            self._bins.setdefault(k, []).append(i)
        self._bins = {k: np.array(v) for k, v in self._bins.items()}

    def _cands(self, x, shells: int):
        kx, ky, kz = np.floor((np.asarray(x) - self.origin) / self.edge).astype(np.int64)
        idx = []
        for dx in range(-shells, shells + 1):
            for dy in range(-shells, shells + 1):
                for dz in range(-shells, shells + 1):
                    b = self._bins.get((kx + dx, ky + dy, kz + dz))
                    if b is not None:
                        idx.append(b)
        return np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)

    def nearest(self, x) -> tuple[int, float]:
        shells = 1
        while True:
            cand = self._cands(x, shells)
            if len(cand):
                d = np.linalg.norm(self.points[cand] - x, axis=1)
                k = int(np.argmin(d))
                # points outside the searched neighborhood are > shells*edge
                # away; past 2 shells the label is FAR regardless of ties
                if d[k] <= shells * self.edge or shells > 2:
                    return int(cand[k]), float(d[k])
            shells += 1
            if shells > 64:
                d = np.linalg.norm(self.points - x, axis=1)
                k = int(np.argmin(d))
                return k, float(d[k])


@dataclass(frozen=True)
class NearParams:
    """Knobs for near-zone evaluation and classification."""

    atilde: float = 5.0  # intermediate-zone outer edge, units of h
    upsample: int = 4
    n_nodes: int = 8
    spacing: str = "sqrt"  # ladder rule, see ladder_distances()
    newton_tol: float = 1e-10
    newton_maxiter: int = 50


@dataclass(frozen=True)
class SourceQuad:
    """Everything needed to integrate over one source surface."""

    shape: sf.SurfaceShape
    h: float
    params: NearParams
    geo: sf.GeometryCache  # native order
    geo_up: sf.GeometryCache  # upsampled by params.upsample
    cells: CellList  # bins of the upsampled grid points

    @classmethod
    def build(cls, s: sf.SurfaceShape, params: NearParams = NearParams()):
        h = grid_spacing(s)
        geo = sf.geometry(s, 1)
        geo_up = sf.geometry(s, params.upsample)
        cells = CellList(geo_up.x.reshape(3, -1).T, params.atilde * h)
        return cls(s, h, params, geo, geo_up, cells)


def classify_targets(targets: np.ndarray, src: SourceQuad):
    """Labels plus nearest-grid-point seeds for one source surface.

    Distances are to the upsampled grid points (conservative: the true
    surface distance is never larger by more than the fine-grid sag).
    Returns (labels (T,), seeds (T,) flat indices into the upsampled grid,
    dists (T,)).
    """
    targets = np.atleast_2d(targets)
    labels = np.empty(len(targets), dtype=object)
    seeds = np.empty(len(targets), dtype=np.int64)
    dists = np.empty(len(targets))
    for i, x in enumerate(targets):
        k, d = src.cells.nearest(x)
        seeds[i] = k
        dists[i] = d
        if d > src.params.atilde * src.h:
            labels[i] = Region.FAR
        elif d > src.h:
            labels[i] = Region.MID
        else:
            labels[i] = Region.NEAR
    return labels, seeds, dists


# ---------------------------------------------------------------------------
# closest-point projection


@dataclass(frozen=True)
class ClosestPoint:
    theta: float
    phi: float
    x: np.ndarray
    normal: np.ndarray
    dist: float
    converged: bool
    iterations: int
    grad_norm: float


_DERIVS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


def _fgH(coeffs, p, th, ph, x0):
    v = sg.evaluate(coeffs, p, np.array([th]), np.array([ph]), derivs=_DERIVS).real
    x, xt, xp, xtt, xtp, xpp = (v[i, :, 0] for i in range(6))
    d = x - x0
    f = d @ d
    g = 2.0 * np.array([d @ xt, d @ xp])
    H = 2.0 * np.array(
        [
            [xt @ xt + d @ xtt, xt @ xp + d @ xtp],
            [xt @ xp + d @ xtp, xp @ xp + d @ xpp],
        ]
    )
    return f, g, H, x


def _fold(th, ph):
    # reflect at the poles, wrap in longitude
    th = th % (2 * math.pi)
    if th > math.pi:
        th = 2 * math.pi - th
        ph = ph + math.pi
    return th, ph % (2 * math.pi)


def closest_point(
    s: sf.SurfaceShape,
    x0: np.ndarray,
    seed: tuple[float, float],
    tol: float = 1e-10,
    maxiter: int = 50,
) -> ClosestPoint:
    """Stationary point of |x(theta,phi) - x0|^2 by damped Newton.

    The Hessian is shifted by mu*I (Levenberg), mu grows tenfold on a
    non-descent step and halves on success.  Non-convergence returns the
    best iterate with converged=False and a log record; callers decide
    whether that is fatal.

    The chart is rotated so the seed starts on the equator: minimizers at
    or near the parameterization poles are otherwise unreachable (the
    angular gradient degenerates there), and iterates stay within a grid
    spacing or so of the seed.  The returned angles are in the original
    chart.
    """
    x0 = np.asarray(x0, dtype=float)
    th0, ph0 = float(seed[0]), float(seed[1])
    alpha, beta = ph0, th0 - math.pi / 2
    coeffs = sg.rotate_expansion(s.coeffs, s.p, alpha, beta, 0.0)
    th, ph = math.pi / 2, 0.0
    f, g, H, x = _fgH(coeffs, s.p, th, ph, x0)
    mu = 1e-8
    best = (f, th, ph, x, float(np.linalg.norm(g)))
    it = 0
    converged = False
    for it in range(1, maxiter + 1):
        gn = float(np.linalg.norm(g))
        if gn < best[4]:
            best = (f, th, ph, x, gn)
        if gn < tol:
            converged = True
            break
        scale = max(abs(H[0, 0]), abs(H[1, 1]), 1.0)
        accepted = False
        for _ in range(25):
            try:
                step = np.linalg.solve(H + mu * scale * np.eye(2), -g)
            except np.linalg.LinAlgError:
                step = -g / scale
            th2, ph2 = _fold(th + step[0], ph + step[1])
            f2, g2, H2, x2 = _fgH(coeffs, s.p, th2, ph2, x0)
            if f2 <= f + 1e-15 * abs(f):
                th, ph, f, g, H, x = th2, ph2, f2, g2, H2, x2
                mu = max(mu * 0.5, 1e-14)
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            break
    if not converged:
        f, th, ph, x, gn = best
        log.warning("closest_point stalled after %d iterations, |grad|=%.2e", it, gn)
    else:
        gn = float(np.linalg.norm(g))

    # outward normal from the rotated chart, where the minimizer sits near
    # the equator: the original chart degenerates when the minimizer is a
    # parameterization pole
    v = sg.evaluate(coeffs, s.p, np.array([th]), np.array([ph]), derivs=((1, 0), (0, 1))).real
    nstar = np.cross(v[0, :, 0], v[1, :, 0])
    nstar /= np.linalg.norm(nstar)

    # map the angles back to the original chart: direction = Rz(a) Ry(b) u
    u = np.array(
        [math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)]
    )
    cb, sb = math.cos(beta), math.sin(beta)
    u = np.array([cb * u[0] + sb * u[2], u[1], -sb * u[0] + cb * u[2]])
    ca, sa = math.cos(alpha), math.sin(alpha)
    u = np.array([ca * u[0] - sa * u[1], sa * u[0] + ca * u[1], u[2]])
    th_out = math.acos(max(-1.0, min(1.0, u[2])))
    ph_out = math.atan2(u[1], u[0]) % (2 * math.pi)
    return ClosestPoint(th_out, ph_out, x, nstar, math.sqrt(max(f, 0.0)), converged, it, gn)


def signed_distance(src: SourceQuad, x0: np.ndarray) -> float:
    """Distance from x0 to the source surface, negative inside the drop."""
    x0 = np.asarray(x0, dtype=float)
    k, _ = src.cells.nearest(x0)
    nlon = src.geo_up.grid.shape[1]
    seed = (src.geo_up.grid.theta[k // nlon], src.geo_up.grid.phi[k % nlon])
    cp = closest_point(src.shape, x0, seed, src.params.newton_tol, src.params.newton_maxiter)
    if cp.dist < 1e-12:
        return 0.0
    side = 1.0 if float((x0 - cp.x) @ cp.normal) >= 0.0 else -1.0
    return side * cp.dist


# ---------------------------------------------------------------------------
# near-zone evaluation


def ladder_distances(h: float, params: NearParams) -> np.ndarray:
    """Distances of the interpolation ladder nodes from the surface point.

    "sqrt": nodes at h sqrt(l), clustered toward the surface and never more
    than a few h away (an inward ladder must not cross the drop); "uniform":
    nodes at h l, the constant-spacing comparison rule.
    """
    ls = np.arange(1, params.n_nodes + 1, dtype=float)
    if params.spacing == "sqrt":
        return h * np.sqrt(ls)
    if params.spacing == "uniform":
        return h * ls
    raise ValueError(f"unknown spacing rule {params.spacing!r}")


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    d = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(d, 1.0)
    return 1.0 / d.prod(axis=1)


def barycentric_eval(nodes, weights, values, t) -> np.ndarray:
    dt = t - nodes
    hit = np.nonzero(np.abs(dt) < 1e-14 * max(abs(t), 1.0))[0]
    if len(hit):
        return values[hit[0]]
    c = weights / dt
    return (c[:, None] * values).sum(axis=0) / c.sum()


@dataclass
class NearLadder:
    """Geometry-only interpolation data for a plan's near targets."""

    thetas: np.ndarray     # (N,) closest-point colatitudes in the source chart
    phis: np.ndarray       # (N,)
    sides: np.ndarray      # (N,) +1 outside, -1 inside
    tvals: np.ndarray      # (N,) interpolation abscissa (0 for surface hits)
    abscissas: np.ndarray  # (N, L+1) zero plus ladder node distances
    bary_w: np.ndarray     # (N, L+1)
    node_pos: np.ndarray   # (N, L, 3)


def _build_ladder(
    src: SourceQuad,
    targets: np.ndarray,
    seed_angles: list[tuple[float, float]],
    avoid: list[tuple[CellList, float]] | None,
) -> NearLadder:
    n = len(targets)
    nl = src.params.n_nodes
    thetas = np.empty(n)
    phis = np.empty(n)
    sides = np.empty(n)
    tvals = np.empty(n)
    abscissas = np.zeros((n, nl + 1))
    bary_w = np.empty((n, nl + 1))
    node_pos = np.empty((n, nl, 3))
    base = ladder_distances(src.h, src.params)
    for i, (x0, seed) in enumerate(zip(targets, seed_angles)):
        cp = closest_point(src.shape, x0, seed, src.params.newton_tol, src.params.newton_maxiter)
        nstar = cp.normal
        if cp.dist < 1e-12:
            ray, side, t = nstar, 1.0, 0.0
        else:
            ray = (x0 - cp.x) / cp.dist
            side = 1.0 if float(ray @ nstar) >= 0.0 else -1.0
            t = cp.dist
        dists = base.copy()
        nodes_x = cp.x[None, :] + dists[:, None] * ray[None, :]
        if avoid:
            for k in range(nl):
                for cl, hz in avoid:
                    _, d = cl.nearest(nodes_x[k])
                    while d <= hz:
                        dists[k] += 0.5 * hz
                        nodes_x[k] = cp.x + dists[k] * ray
                        _, d = cl.nearest(nodes_x[k])
                        log.debug("ladder node pushed outward to %.3g", dists[k])
        thetas[i], phis[i], sides[i], tvals[i] = cp.theta, cp.phi, side, t
        abscissas[i, 1:] = dists
        bary_w[i] = barycentric_weights(abscissas[i])
        node_pos[i] = nodes_x
    return NearLadder(thetas, phis, sides, tvals, abscissas, bary_w, node_pos)


class FieldPlan:
    """Frozen routing of one target set against one source surface.

    Classification, closest points, ladder node positions and interpolation
    weights depend only on the geometry, so a plan built once serves any
    density and either kernel on that geometry: iterative solves build the
    plan per time instant and reuse it across operator applications.
    """

    def __init__(self, src, targets, far, mid, near, ladder):
        self.src = src
        self.targets = targets
        self.far = far
        self.mid = mid
        self.near = near
        self.ladder = ladder

    @classmethod
    def build(
        cls,
        src: SourceQuad,
        targets: np.ndarray,
        avoid: list[tuple[CellList, float]] | None = None,
    ) -> "FieldPlan":
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        labels, seeds, _ = classify_targets(targets, src)
        far = np.nonzero(labels == Region.FAR)[0]
        mid = np.nonzero(labels == Region.MID)[0]
        near = np.nonzero(labels == Region.NEAR)[0]
        ladder = None
        if len(near):
            nlon = src.geo_up.grid.shape[1]
            seed_angles = [
                (src.geo_up.grid.theta[k // nlon], src.geo_up.grid.phi[k % nlon])
                for k in seeds[near]
            ]
            ladder = _build_ladder(src, targets[near], seed_angles, avoid)
        return cls(src, targets, far, mid, near, ladder)

    def apply(
        self,
        density: np.ndarray | None,
        kernel: str,
        self_field: np.ndarray | None = None,
        density_coeffs: np.ndarray | None = None,
        density_up: np.ndarray | None = None,
    ) -> np.ndarray:
        """Layer potential of the given density at every planned target.

        density: native-grid values (3, p+1, 2p+2); may be None when the
        plan has no far targets and both density_coeffs and density_up are
        supplied.  self_field: expansion of the on-surface self-interaction
        field (SelfQuad.field_coeffs), needed only for near targets; it is
        rebuilt on the fly when omitted.  The double-layer jump at the
        surface end of a ladder needs density_coeffs.
        """
        src = self.src
        p = src.shape.p
        if density is not None:
            density = np.asarray(density, dtype=float)
        out = np.empty((3, len(self.targets)))
        if len(self.far):
            out[:, self.far] = eval_layer(src.geo, density, kernel, self.targets[self.far])
        if not (len(self.mid) or len(self.near)):
            return out
        if density_coeffs is None and (density_up is None or kernel == "double" or self_field is None):
            if density is None:
                raise ValueError("density_coeffs required when only upsampled values are given")
            density_coeffs = sg.forward_transform(density, p)
        if density_up is None:
            density_up = sg.inverse_transform(
                sg.resample(density_coeffs, p, src.geo_up.q), src.geo_up.q
            ).real
        if len(self.mid):
            out[:, self.mid] = eval_layer(src.geo_up, density_up, kernel, self.targets[self.mid])
        if len(self.near):
            if self_field is None:
                sq = SelfQuad(src.shape)
                self_field = sq.field_coeffs(sg.inverse_transform(density_coeffs, p).real, kernel)
            lad = self.ladder
            v0 = sg.evaluate(self_field, p, lad.thetas, lad.phis)[0].real  # (3, N)
            if kernel == "double":
                ustar = sg.evaluate(density_coeffs, p, lad.thetas, lad.phis)[0].real
                v0 = v0 - (4.0 * math.pi) * lad.sides * ustar
            nvals = eval_layer(src.geo_up, density_up, kernel, lad.node_pos.reshape(-1, 3))
            nvals = nvals.reshape(3, len(self.near), -1)  # (3, N, L)
            for k, i in enumerate(self.near):
                vals = np.vstack([v0[:, k], nvals[:, k, :].T])  # (L+1, 3)
                out[:, i] = barycentric_eval(lad.abscissas[k], lad.bary_w[k], vals, lad.tvals[k])
        return out


def near_eval(
    src: SourceQuad,
    density: np.ndarray,
    kernel: str,
    x0: np.ndarray,
    self_field: np.ndarray,
    density_coeffs: np.ndarray | None = None,
    seed: tuple[float, float] | None = None,
    avoid: list[tuple[CellList, float]] | None = None,
) -> np.ndarray:
    """Layer potential at a single target within h of the source surface.

    self_field: expansion (3, n_modes(p)) of the on-surface self-interaction
    field (SelfQuad.field_coeffs), which supplies the ladder's surface-end
    value; for the double layer the one-sided limit needs the density
    expansion as well (density_coeffs) for the jump term.  density may be
    given on the native or on the upsampled grid.
    """
    x0 = np.asarray(x0, dtype=float)
    if seed is None:
        k, _ = src.cells.nearest(x0)
        nlon = src.geo_up.grid.shape[1]
        seed = (src.geo_up.grid.theta[k // nlon], src.geo_up.grid.phi[k % nlon])
    ladder = _build_ladder(src, x0[None, :], [seed], avoid)
    plan = FieldPlan(
        src, x0[None, :], np.empty(0, dtype=int), np.empty(0, dtype=int), np.array([0]), ladder
    )
    density = np.asarray(density, dtype=float)
    if density.shape[1:] == src.geo_up.grid.shape:
        return plan.apply(
            None, kernel, self_field=self_field, density_coeffs=density_coeffs, density_up=density
        )[:, 0]
    return plan.apply(density, kernel, self_field=self_field, density_coeffs=density_coeffs)[:, 0]


def eval_field(
    src: SourceQuad,
    density: np.ndarray,
    kernel: str,
    targets: np.ndarray,
    self_field: np.ndarray | None = None,
    density_coeffs: np.ndarray | None = None,
    avoid: list[tuple[CellList, float]] | None = None,
) -> np.ndarray:
    """Layer potential of one source at arbitrary external targets.

    Routes each target through the plain rule, the upsampled rule, or the
    near-zone interpolation according to its distance.  density: grid
    values on the source's native grid (3, nlat, nlon).  One-shot wrapper
    around FieldPlan for callers that do not reuse the geometry.
    """
    plan = FieldPlan.build(src, targets, avoid=avoid)
    return plan.apply(density, kernel, self_field=self_field, density_coeffs=density_coeffs)
