"""Boundary-integral Stokes flow around surfactant-laden drops.

The interface velocity solves the second-kind system

    (lam_i + 1) u(x0) = 2 u_inf(x0) - (1/4pi) sum_j S_j[f](x0)
                                    + sum_j ((lam_j - 1)/4pi) D_j[u](x0)

for x0 on drop i, with S_j/D_j the single/double layer over drop j, f the
interfacial traction jump 2 sigma H n - grad_gamma sigma, and lam the
viscosity ratio.  Unknowns are packed real spectral coefficients of u on
every drop.  The operator is applied matrix-free: dense self-interaction
matrices (assembled once per geometry), planned near-zone evaluation for
close pairs, GMRES to tol_stokes.  Lengths and rates are nondimensional:
unit drop radius, velocity scale sigma_0/mu_0, far field Ca * A x with a
unit-rate traceless gradient A.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import quadrature as qd
from . import sphgrid as sg
from . import surface as sf
from .errors import InvalidFlowError, SingularKernelError
from .krylov import gmres
from .surfactant import EosParams

log = logging.getLogger(__name__)

TOL_STOKES = 1e-8
MAXITER_STOKES = 400


def kernels(x0, x):
    """Stokeslet/stresslet pair at separation xh = x0 - x.

    G = I/r + xh xh/r^3 (3, 3); T = -6 xh xh xh/r^5 (3, 3, 3).
    """
    xh = np.asarray(x0, dtype=float) - np.asarray(x, dtype=float)
    r = float(np.linalg.norm(xh))
    if r == 0.0:
        raise SingularKernelError("kernel evaluated at zero separation")
    g = np.eye(3) / r + np.outer(xh, xh) / r**3
    t = -6.0 * np.einsum("i,j,k->ijk", xh, xh, xh) / r**5
    return g, t


# ---------------------------------------------------------------------------
# imposed far-field flows


@dataclass(frozen=True)
class FarField:
    """Affine ambient flow u_inf(x) = Ca * (A x + U), unit-rate gradient A."""

    gradient: np.ndarray
    name: str = "custom"
    uniform: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.gradient, dtype=float)
        if a.shape != (3, 3):
            raise InvalidFlowError(f"velocity gradient must be 3x3, got {a.shape}")
        if abs(np.trace(a)) > 1e-12:
            raise InvalidFlowError(f"velocity gradient must be traceless, trace = {np.trace(a):.3e}")
        object.__setattr__(self, "gradient", a)
        u = np.zeros(3) if self.uniform is None else np.asarray(self.uniform, dtype=float)
        if u.shape != (3,):
            raise InvalidFlowError(f"uniform velocity must be a 3-vector, got {u.shape}")
        object.__setattr__(self, "uniform", u)

    def velocity(self, points: np.ndarray, ca: float) -> np.ndarray:
        """ca * (A x + U) for points with the Cartesian axis leading: (3, ...)."""
        pts = np.asarray(points, dtype=float)
        out = np.tensordot(self.gradient, pts, axes=(1, 0))
        if self.uniform.any():
            out = out + self.uniform.reshape((3,) + (1,) * (pts.ndim - 1))
        return ca * out


def shear_flow() -> FarField:
    return FarField(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), "shear")


def extension_flow() -> FarField:
    return FarField(np.diag([1.0, -1.0, 0.0]), "extension")


def four_roll_flow(alpha: float) -> FarField:
    a = 0.5 * np.array(
        [[1.0 + alpha, 1.0 - alpha, 0.0], [-1.0 + alpha, -1.0 - alpha, 0.0], [0.0, 0.0, 0.0]]
    )
    return FarField(a, f"four-roll({alpha:g})")


def quiescent_flow() -> FarField:
    return FarField(np.zeros((3, 3)), "quiescent")


def uniform_flow(u) -> FarField:
    return FarField(np.zeros((3, 3)), "uniform", uniform=u)


# ---------------------------------------------------------------------------
# drops


@dataclass
class Drop:
    """One drop: its surface, surfactant load, and viscosity ratio.

    gamma: spectral coefficients of the surfactant concentration at the
    shape's order, or None for a clean interface; eos applies when gamma
    is present.
    """

    shape: sf.SurfaceShape
    lam: float = 1.0
    gamma: np.ndarray | None = None
    eos: EosParams | None = None


@dataclass
class DropSystem:
    drops: list[Drop]
    flow: FarField = field(default_factory=quiescent_flow)
    ca: float = 0.0
    pe: float = math.inf


def min_gap(system: DropSystem) -> float:
    """Smallest signed surface-to-surface gap over all drop pairs.

    Positive when every pair is separated, negative once any surfaces
    overlap.  Candidate points come from the upsampled node sets; the
    winning candidate is polished with the closest-point projection so the
    reported gap does not carry the node-spacing error.
    """
    drops = system.drops
    if len(drops) < 2:
        return math.inf
    srcs = [qd.SourceQuad.build(d.shape) for d in drops]
    pts = [s.geo_up.x.reshape(3, -1).T for s in srcs]
    nrm = [s.geo_up.n.reshape(3, -1).T for s in srcs]
    best = math.inf
    for i in range(len(drops)):
        for j in range(i + 1, len(drops)):
            d2 = np.sum((pts[i][:, None, :] - pts[j][None, :, :]) ** 2, axis=2)
            # candidate per side = node minimizing the SIGNED node-pair
            # estimate: once surfaces overlap, the nearest pair sits on the
            # crossing curve at distance zero, not at the deepest point
            for a, b, dd in ((i, j, d2), (j, i, d2.T)):
                kb = np.argmin(dd, axis=1)
                diff = pts[a] - pts[b][kb]
                dist = np.linalg.norm(diff, axis=1)
                sgn = np.where(np.sum(diff * nrm[b][kb], axis=1) >= 0.0, 1.0, -1.0)
                ka = int(np.argmin(sgn * dist))
                best = min(best, qd.signed_distance(srcs[b], pts[a][ka]))
    return best


# ---------------------------------------------------------------------------
# the boundary-integral operator


class StokesOperator:
    """Geometry-frozen operator and right-hand side for one time instant.

    Per-drop caches (geometry, singular-quadrature engine, cross-drop
    source quadratures and evaluation plans) are built once; apply() is a
    matrix-free operator application on the packed coefficient vector.
    """

    def __init__(self, system: DropSystem, near: qd.NearParams = qd.NearParams()):
        self.system = system
        self.drops = system.drops
        nd = len(self.drops)
        self.geos = [sf.geometry(d.shape, 1) for d in self.drops]
        self.selfq = [qd.SelfQuad(d.shape) for d in self.drops]
        self.sources: list[qd.SourceQuad | None] = [None] * nd
        self.plans: dict[tuple[int, int], qd.FieldPlan] = {}
        if nd > 1:
            self.sources = [qd.SourceQuad.build(d.shape, near) for d in self.drops]
            for j in range(nd):
                for i in range(nd):
                    if i != j:
                        tg = self.geos[i].x.reshape(3, -1).T
                        self.plans[(i, j)] = qd.FieldPlan.build(self.sources[j], tg)
        self._dof = [3 * (d.shape.p + 1) ** 2 for d in self.drops]
        self._offs = np.concatenate([[0], np.cumsum(self._dof)])
        self.size = int(self._offs[-1])
        self.uniform_lam = all(d.lam == 1.0 for d in self.drops)
        # identity-part scale, used as the left preconditioner
        self._pscale = np.concatenate(
            [np.full(n, 1.0 / (d.lam + 1.0)) for n, d in zip(self._dof, self.drops)]
        )

    # packed real coefficient vector <-> per-drop (3, n_modes) expansions
    def pack(self, coeff_list: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [sg.pack_real(c, d.shape.p).ravel() for c, d in zip(coeff_list, self.drops)]
        )

    def unpack(self, vec: np.ndarray) -> list[np.ndarray]:
        out = []
        for k, d in enumerate(self.drops):
            part = vec[self._offs[k] : self._offs[k + 1]].reshape(3, -1)
            out.append(sg.unpack_real(part, d.shape.p))
        return out

    def _cross_apply(self, i: int, j: int, grid_j, kernel, sfield_j, coeffs_j, up_j):
        vals = self.plans[(i, j)].apply(
            grid_j, kernel, self_field=sfield_j, density_coeffs=coeffs_j, density_up=up_j
        )
        return vals.reshape((3,) + self.geos[i].grid.shape)

    def _upsampled(self, j: int, coeffs_j: np.ndarray) -> np.ndarray | None:
        plan_needs = any(
            (i, j) in self.plans and (len(self.plans[(i, j)].mid) or len(self.plans[(i, j)].near))
            for i in range(len(self.drops))
        )
        if not plan_needs:
            return None
        q = self.sources[j].geo_up.q
        return sg.inverse_transform(sg.resample(coeffs_j, self.drops[j].shape.p, q), q).real

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """(lam_i+1) u - sum_j ((lam_j-1)/4pi) D_j[u], Galerkin-projected."""
        coeffs = self.unpack(vec)
        grids = [sg.inverse_transform(c, d.shape.p).real for c, d in zip(coeffs, self.drops)]
        nd = len(self.drops)
        dl_self: dict[int, np.ndarray] = {}
        sfield: dict[int, np.ndarray] = {}
        ups: dict[int, np.ndarray | None] = {}
        for j, d in enumerate(self.drops):
            if d.lam != 1.0:
                dl_self[j] = self.selfq[j].apply(grids[j], "double")
                if nd > 1:
                    sfield[j] = sg.forward_transform(dl_self[j], d.shape.p)
                    ups[j] = self._upsampled(j, coeffs[j])
        out = []
        for i, di in enumerate(self.drops):
            acc = (di.lam + 1.0) * grids[i]
            for j, dj in enumerate(self.drops):
                cj = (dj.lam - 1.0) / (4.0 * math.pi)
                if cj == 0.0:
                    continue
                if j == i:
                    acc = acc - cj * dl_self[j]
                else:
                    acc = acc - cj * self._cross_apply(
                        i, j, grids[j], "double", sfield[j], coeffs[j], ups[j]
                    )
            out.append(sg.forward_transform(acc, di.shape.p))
        return self.pack(out)

    def rhs(self) -> np.ndarray:
        """Galerkin projection of 2 u_inf - (1/4pi) sum_j S_j[f]."""
        sys = self.system
        nd = len(self.drops)
        forces = [
            sf.interfacial_force(d.shape, d.gamma, d.eos, geo)
            for d, geo in zip(self.drops, self.geos)
        ]
        fcoeffs = [sg.forward_transform(f, d.shape.p) for f, d in zip(forces, self.drops)]
        s_self = [
            self.selfq[k].apply_direct(fcoeffs[k], "single") for k in range(nd)
        ]
        sfield = [sg.forward_transform(s, d.shape.p) for s, d in zip(s_self, self.drops)]
        ups = [self._upsampled(j, fcoeffs[j]) if nd > 1 else None for j in range(nd)]
        out = []
        for i, d in enumerate(self.drops):
            acc = 2.0 * sys.flow.velocity(self.geos[i].x, sys.ca) - s_self[i] / (4.0 * math.pi)
            for j in range(nd):
                if j != i:
                    acc = acc - self._cross_apply(
                        i, j, forces[j], "single", sfield[j], fcoeffs[j], ups[j]
                    ) / (4.0 * math.pi)
            out.append(sg.forward_transform(acc, d.shape.p))
        return self.pack(out)

    def solve(self, tol: float = TOL_STOKES, maxiter: int = MAXITER_STOKES, x0=None):
        b = self.rhs()
        if self.uniform_lam:
            # the double-layer terms vanish and the operator is exactly 2I
            vec = 0.5 * b
            iterations, residuals = 0, [0.0]
        else:
            res = gmres(
                self.apply, b, tol=tol, maxiter=maxiter,
                precond=lambda v: v * self._pscale, x0=x0,
            )
            vec, iterations, residuals = res.x, res.iterations, res.residuals
        coeffs = self.unpack(vec)
        u = [sg.inverse_transform(c, d.shape.p).real for c, d in zip(coeffs, self.drops)]
        u_n = [np.sum(ui * geo.n, axis=0) for ui, geo in zip(u, self.geos)]
        u_t = [ui - uni * geo.n for ui, uni, geo in zip(u, u_n, self.geos)]
        return VelocitySolution(
            u=u, coeffs=coeffs, u_normal=u_n, u_tangent=u_t,
            packed=vec, iterations=iterations, residuals=residuals,
        )


@dataclass
class VelocitySolution:
    """Interface velocity per drop, with its tangential/normal split."""

    u: list[np.ndarray]
    coeffs: list[np.ndarray]
    u_normal: list[np.ndarray]
    u_tangent: list[np.ndarray]
    packed: np.ndarray
    iterations: int
    residuals: list[float]


def apply_bim(op: StokesOperator, vec: np.ndarray) -> np.ndarray:
    return op.apply(vec)


def solve_velocity(
    system: DropSystem,
    tol: float = TOL_STOKES,
    maxiter: int = MAXITER_STOKES,
    x0: np.ndarray | None = None,
    near: qd.NearParams = qd.NearParams(),
) -> VelocitySolution:
    """Solve the boundary-integral system for the interface velocities."""
    return StokesOperator(system, near).solve(tol=tol, maxiter=maxiter, x0=x0)
