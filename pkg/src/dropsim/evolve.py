"""Coupled drop/surfactant time stepping.

Drop surfaces advance with an embedded explicit Runge-Kutta pair
(midpoint by default); the surfactant concentration advances on the same
stage times with the second-order implicit-midpoint IMEX combination.
The controller accepts a step when the larger of the drop and surfactant
error estimates is below tolerance and rescales dt by the square-root
law either way; a rejected attempt leaves the state untouched.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import quadrature as qd
from . import reparam as rp
from . import sphgrid as sg
from . import stokes as st
from . import surface as sf
from . import surfactant as sa
from .errors import ConfigError, EosDomainError, StallError

log = logging.getLogger(__name__)

DT_MIN = 1e-10
MAX_CONSECUTIVE_REJECTS = 25


@dataclass
class StepController:
    """Adaptive step state: accept when max(err_drop, err_surfactant) < tol.

    estimator picks the surfactant error measure: "conservation" compares
    total mass across the step (free), "imex1" runs the first-order
    companion step and compares concentrations.
    """

    tol: float = 1e-4
    dt: float = 1e-3
    dt_max: float = 0.1
    safety: float = 0.9
    estimator: str = "conservation"

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if not (0.0 < self.dt <= self.dt_max):
            raise ConfigError(f"dt must lie in (0, dt_max = {self.dt_max}], got {self.dt}")
        if self.estimator not in ("conservation", "imex1"):
            raise ConfigError(f"unknown surfactant error estimator {self.estimator!r}")


@dataclass(frozen=True)
class SchemeChoice:
    """Embedded explicit pair advancing the drop positions.

    c: stage times as fractions of dt; a: strictly lower-triangular stage
    weights; b_hi: advancing combination; b_lo: embedded lower-order
    combination for the error estimate.  Surfactant values at the stage
    times are scheduled by time: t uses the current concentration, t+dt/2
    the implicit-midpoint stage solve, t+3dt/4 a quarter-step first-order
    bridge from the midpoint stage, t+dt the full-step combination.
    """

    name: str
    c: tuple[float, ...]
    a: tuple[tuple[float, ...], ...]
    b_hi: tuple[float, ...]
    b_lo: tuple[float, ...]

    def __post_init__(self):
        n = len(self.c)
        if not (len(self.a) == n and len(self.b_hi) == n and len(self.b_lo) == n):
            raise ConfigError(f"inconsistent tableau sizes in scheme {self.name!r}")
        # the surfactant schedule needs the first two stages at t and t+dt/2
        if n < 2 or self.c[0] != 0.0 or self.c[1] != 0.5:
            raise ConfigError(f"scheme {self.name!r} must open with stages at 0 and dt/2")


SCHEMES: dict[str, SchemeChoice] = {
    "midpoint": SchemeChoice(
        "midpoint", (0.0, 0.5), ((), (0.5,)), (0.0, 1.0), (1.0, 0.0)
    ),
    "rk23": SchemeChoice(
        "rk23",
        (0.0, 0.5, 0.75, 1.0),
        ((), (0.5,), (0.0, 0.75), (2 / 9, 1 / 3, 4 / 9)),
        (2 / 9, 1 / 3, 4 / 9, 0.0),
        (7 / 24, 1 / 4, 1 / 3, 1 / 8),
    ),
    "kutta3": SchemeChoice(
        "kutta3",
        (0.0, 0.5, 1.0),
        ((), (0.5,), (-1.0, 2.0)),
        (1 / 6, 4 / 6, 1 / 6),
        (0.0, 1.0, 0.0),
    ),
}


@dataclass
class StepAttempt:
    """Proposal for the state at t+dt, plus the error estimates and costs."""

    system: st.DropSystem
    err_drop: float
    err_surfactant: float
    stokes_evals: int
    gmres_iterations: int
    surfactant_iterations: int


def _scheme(scheme: str | SchemeChoice) -> SchemeChoice:
    if isinstance(scheme, SchemeChoice):
        return scheme
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise ConfigError(f"unknown scheme {scheme!r}, pick one of {sorted(SCHEMES)}") from None


def coupled_step(
    system: st.DropSystem,
    ctrl: StepController,
    scheme: str | SchemeChoice = "midpoint",
    *,
    upsample: int = 2,
    convective_form: str = "material",
    tol_stokes: float = st.TOL_STOKES,
    near: qd.NearParams = qd.NearParams(),
) -> StepAttempt:
    """One embedded-pair attempt over ctrl.dt from the current state.

    Velocities are solved at the scheme's stage times with the matching
    surfactant stage values.  The input system is never mutated: the
    returned state is a proposal and acceptance is the controller's call.
    """
    tab = _scheme(scheme)
    dt = ctrl.dt
    drops = system.drops
    nd = len(drops)
    ps = [d.shape.p for d in drops]
    x0 = [d.shape.coeffs for d in drops]
    gam_t = [d.gamma for d in drops]
    covered = [g is not None for g in gam_t]
    pe = system.pe

    geo_t = [sf.geometry(d.shape, upsample) for d in drops]
    mass_old = [
        sa.total_mass(g, geo) if g is not None else 0.0 for g, geo in zip(gam_t, geo_t)
    ]

    evals = 0
    gmres_iters = 0
    surf_iters = 0

    def fe(i, gamma_i, geo_i, ucoef_i):
        # explicit transport terms as order-p coefficients
        q = geo_i.q
        uq = sg.inverse_transform(sg.resample(ucoef_i, ps[i], q), q).real
        vals = sa.rhs_explicit(gamma_i, uq, geo_i, convective_form)
        return sg.resample(sg.forward_transform(vals, q), q, ps[i])

    def assemble(shapes, gammas):
        ds = [
            replace(d, shape=sh, gamma=g) for d, sh, g in zip(drops, shapes, gammas)
        ]
        return replace(system, drops=ds)

    ks: list[list[np.ndarray]] = []  # velocity coefficients per stage, per drop
    ku: list[list[np.ndarray]] = []  # the same as grid values
    fe_t: list = [None] * nd
    fe_mid: list = [None] * nd
    gamma_mid: list = [None] * nd
    geo_mid: list = [None] * nd
    gamma_new: list | None = None

    def ensure_fe_mid():
        for i in range(nd):
            if covered[i] and fe_mid[i] is None:
                fe_mid[i] = fe(i, gamma_mid[i], geo_mid[i], ks[1][i])

    def full_step_gamma():
        ensure_fe_mid()
        return [
            sa.imex_full_step(gam_t[i], gamma_mid[i], fe_mid[i], dt, pe, geo_mid[i])
            if covered[i]
            else None
            for i in range(nd)
        ]

    for s, cs in enumerate(tab.c):
        xc = []
        for i in range(nd):
            acc = x0[i]
            for r in range(s):
                w = tab.a[s][r]
                if w:
                    acc = acc + (dt * w) * ks[r][i]
            xc.append(acc)
        shapes = [sf.SurfaceShape(c, p) for c, p in zip(xc, ps)]
        if cs == 0.0:
            gam_s = gam_t
        elif cs == 0.5:
            geo_mid = [sf.geometry(sh, upsample) for sh in shapes]
            gam_s = []
            for i in range(nd):
                if not covered[i]:
                    gam_s.append(None)
                    continue
                fe_t[i] = fe(i, gam_t[i], geo_t[i], ks[0][i])
                gh, it = sa.imex_half_step(gam_t[i], fe_t[i], dt, pe, geo_mid[i])
                surf_iters += it
                gam_s.append(gh)
            gamma_mid = gam_s
        elif cs == 0.75:
            ensure_fe_mid()
            gam_s = []
            for i in range(nd):
                if not covered[i]:
                    gam_s.append(None)
                    continue
                geo_s = sf.geometry(shapes[i], upsample)
                gb, it = sa.imex1_step(gamma_mid[i], fe_mid[i], 0.25 * dt, pe, geo_s)
                surf_iters += it
                gam_s.append(gb)
        elif cs == 1.0:
            gamma_new = full_step_gamma()
            gam_s = gamma_new
        else:
            raise ConfigError(f"no surfactant stage rule for stage time {cs}")
        sol = st.solve_velocity(assemble(shapes, gam_s), tol=tol_stokes, near=near)
        evals += 1
        gmres_iters += sol.iterations
        ks.append(sol.coeffs)
        ku.append(sol.u)

    x_hi = []
    for i in range(nd):
        acc = x0[i]
        for r, w in enumerate(tab.b_hi):
            if w:
                acc = acc + (dt * w) * ks[r][i]
        x_hi.append(acc)
    shapes_new = [sf.SurfaceShape(c, p) for c, p in zip(x_hi, ps)]
    if gamma_new is None:
        gamma_new = full_step_gamma()

    # embedded drop error: relative infinity norm over grid node positions
    err_drop = 0.0
    for i in range(nd):
        diff = np.zeros_like(ku[0][i])
        for r in range(len(tab.c)):
            w = tab.b_hi[r] - tab.b_lo[r]
            if w:
                diff = diff + (dt * w) * ku[r][i]
        xg = sg.inverse_transform(x_hi[i], ps[i]).real
        err_drop = max(err_drop, float(np.abs(diff).max() / np.abs(xg).max()))

    err_surf = 0.0
    for i in range(nd):
        if not covered[i]:
            continue
        geo_new = sf.geometry(shapes_new[i], upsample)
        mass_new = sa.total_mass(gamma_new[i], geo_new)
        g1 = None
        if ctrl.estimator == "imex1":
            g1, it = sa.imex1_step(gam_t[i], fe_t[i], dt, pe, geo_new)
            surf_iters += it
        e1, ec = sa.surf_error_estimates(gamma_new[i], g1, mass_old[i], mass_new)
        err_surf = max(err_surf, e1 if ctrl.estimator == "imex1" else ec)

    drops_new = [
        replace(d, shape=sh, gamma=g) for d, sh, g in zip(drops, shapes_new, gamma_new)
    ]
    return StepAttempt(
        system=replace(system, drops=drops_new),
        err_drop=err_drop,
        err_surfactant=err_surf,
        stokes_evals=evals,
        gmres_iterations=gmres_iters,
        surfactant_iterations=surf_iters,
    )


def adapt(ctrl: StepController, err_drop: float, err_surfactant: float) -> tuple[bool, float]:
    """Accept decision and the next dt from the square-root controller law."""
    err = max(err_drop, err_surfactant)
    if not math.isfinite(err):
        return False, 0.5 * ctrl.dt
    if err == 0.0:
        return True, ctrl.dt_max
    dt_new = min(ctrl.dt * math.sqrt(ctrl.safety * ctrl.tol / err), ctrl.dt_max)
    return err < ctrl.tol, dt_new


@dataclass
class StepRecord:
    """Diagnostics for one accepted step."""

    t: float
    dt: float
    err_drop: float
    err_surfactant: float
    stokes_evals: int  # cumulative over the run, rejected attempts included
    gmres_iterations: int
    surfactant_iterations: int
    reparam_iterations: tuple[int, ...]
    rejections: int  # rejected attempts since the previous accepted step


@dataclass
class Trajectory:
    system: st.DropSystem
    t: float
    records: list[StepRecord] = field(default_factory=list)
    stokes_evals: int = 0
    accepted: int = 0
    rejected: int = 0


_DEFAULT_REPARAM = rp.ReparamConfig()


def run(
    system: st.DropSystem,
    ctrl: StepController,
    scheme: str | SchemeChoice = "midpoint",
    t_max: float = 1.0,
    hooks=(),
    *,
    reparam_cfg: rp.ReparamConfig | None = _DEFAULT_REPARAM,
    upsample: int = 2,
    convective_form: str = "material",
    tol_stokes: float = st.TOL_STOKES,
    near: qd.NearParams = qd.NearParams(),
    fixed_dt: float | None = None,
    t0: float = 0.0,
) -> Trajectory:
    """Advance the system to t_max, reparameterizing after accepted steps.

    ctrl.dt tracks the live step size across the run.  fixed_dt bypasses
    the controller entirely (every step accepted at that size; error
    estimates still recorded) for convergence studies; pass
    reparam_cfg=None to keep the parameterization untouched.  Hooks are
    called as hook(record, system) after each accepted step.
    """
    if fixed_dt is not None and fixed_dt <= 0.0:
        raise ConfigError(f"fixed_dt must be positive, got {fixed_dt}")
    traj = Trajectory(system=system, t=t0)
    t = t0
    rejects_in_row = 0
    pending = 0
    horizon = t_max - 1e-12 * max(1.0, abs(t_max))
    while t < horizon:
        dt_try = min(ctrl.dt if fixed_dt is None else fixed_dt, t_max - t)
        ctrl.dt = dt_try
        try:
            att = coupled_step(
                system,
                ctrl,
                scheme,
                upsample=upsample,
                convective_form=convective_form,
                tol_stokes=tol_stokes,
                near=near,
            )
        except EosDomainError as exc:
            # a stage left the EOS domain: reject and halve the step
            if fixed_dt is not None:
                raise
            traj.rejected += 1
            rejects_in_row += 1
            pending += 1
            log.info("step rejected at t = %.6g (dt = %.3e): %s", t, dt_try, exc)
            if rejects_in_row >= MAX_CONSECUTIVE_REJECTS:
                raise StallError(
                    f"{rejects_in_row} consecutive rejections at t = {t:.6g}"
                ) from exc
            ctrl.dt = 0.5 * dt_try
            if ctrl.dt < DT_MIN:
                raise StallError(f"dt underflow ({ctrl.dt:.3e}) at t = {t:.6g}") from exc
            continue
        traj.stokes_evals += att.stokes_evals
        if fixed_dt is None:
            accept, dt_next = adapt(ctrl, att.err_drop, att.err_surfactant)
        else:
            accept, dt_next = True, fixed_dt
        if not accept:
            traj.rejected += 1
            rejects_in_row += 1
            pending += 1
            if rejects_in_row >= MAX_CONSECUTIVE_REJECTS:
                raise StallError(f"{rejects_in_row} consecutive rejections at t = {t:.6g}")
            ctrl.dt = dt_next
            if ctrl.dt < DT_MIN:
                raise StallError(f"dt underflow ({ctrl.dt:.3e}) at t = {t:.6g}")
            continue
        sys_new = att.system
        rep_iters: tuple[int, ...] = ()
        if reparam_cfg is not None:
            ds = []
            rits = []
            for d in sys_new.drops:
                shp, gam, it = rp.angle_reparam(d.shape, d.gamma, reparam_cfg)
                ds.append(replace(d, shape=shp, gamma=gam))
                rits.append(it)
            sys_new = replace(sys_new, drops=ds)
            rep_iters = tuple(rits)
        t += dt_try
        system = sys_new
        ctrl.dt = dt_next
        traj.accepted += 1
        rec = StepRecord(
            t=t,
            dt=dt_try,
            err_drop=att.err_drop,
            err_surfactant=att.err_surfactant,
            stokes_evals=traj.stokes_evals,
            gmres_iterations=att.gmres_iterations,
            surfactant_iterations=att.surfactant_iterations,
            reparam_iterations=rep_iters,
            rejections=pending,
        )
        traj.records.append(rec)
        pending = 0
        rejects_in_row = 0
        for h in hooks:
            h(rec, system)
    traj.system = system
    traj.t = t
    return traj
