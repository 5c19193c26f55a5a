"""Insoluble surfactant on a drop surface.

Transport follows material grid points (the mesh is advected with the full
velocity u), so the explicit right-hand side is the material form

    f_E = -Gamma div_gamma(u_t) - 2 H Gamma (u.n),

with H the signed mean curvature (2H = div_gamma n). The printed conservative
form -div_gamma(Gamma u_t) applies when nodes move only normally and is kept
as an option for comparison; with fully advected nodes it double-counts
tangential convection and drifts mass.

Diffusion is integrated implicitly (IMEX midpoint):

    (I - dt/2 * (1/Pe) * Lap_gamma) Gamma_half = Gamma_t + dt/2 * f_E(t)
    Gamma_{t+dt} = Gamma_t + dt * (f_E(mid) + (1/Pe) Lap_gamma Gamma_half)

solved by GMRES on packed real coefficients with the diagonal sphere
preconditioner 1/(1 + a n(n+1)). A first-order IMEX companion supplies a
cheap local error estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sphgrid as sg
from . import surface as sf
from .errors import DimensionMismatchError, EosDomainError
from .krylov import gmres

STAGE_TOL = 1e-12


@dataclass(frozen=True)
class EosParams:
    """Langmuir equation of state sigma = 1 + E ln(1 - x_s Gamma)."""

    E: float = 0.2
    x_s: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.x_s <= 1.0):
            raise EosDomainError(f"surface coverage x_s must be in [0, 1], got {self.x_s}")
        if self.E < 0.0:
            raise EosDomainError(f"elasticity E must be >= 0, got {self.E}")


def eos_sigma(gamma: np.ndarray, eos: EosParams) -> np.ndarray:
    """Surface tension from concentration grid values."""
    arg = 1.0 - eos.x_s * np.asarray(gamma)
    if np.min(arg) <= 0.0:
        node = np.unravel_index(int(np.argmin(arg)), arg.shape)
        raise EosDomainError(
            f"equation of state out of domain: x_s*Gamma = {1 - np.min(arg):.6f} >= 1", node=node
        )
    return 1.0 + eos.E * np.log(arg)


def rhs_explicit(
    gamma: np.ndarray,
    u: np.ndarray,
    geo: sf.GeometryCache,
    convective_form: str = "material",
) -> np.ndarray:
    """Explicit transport terms f_E as grid values at the working order.

    gamma: coefficients; u: velocity grid values (3, q+1, 2q+2) on geo's grid.
    """
    if u.shape != (3,) + geo.grid.shape:
        raise DimensionMismatchError(f"velocity must be (3, {geo.grid.shape}), got {u.shape}")
    gv = sg.inverse_transform(sg.resample(gamma, sf.order_of(gamma), geo.q), geo.q).real
    un = np.sum(u * geo.n, axis=0)
    ut = u - un * geo.n
    if convective_form == "material":
        conv = gv * sf.surf_div(ut, geo)
    elif convective_form == "full_divergence":
        conv = sf.surf_div(gv * ut, geo)
    else:
        raise ValueError(f"unknown convective_form {convective_form!r}")
    return -conv - 2.0 * geo.H_mean * gv * un


def _packed_degrees(p: int) -> np.ndarray:
    ns = sg.mode_degrees(p)
    ms = sg.mode_orders(p)
    return np.concatenate([ns[ms == 0], ns[ms > 0], ns[ms > 0]])


def _stage_solve(rhs: np.ndarray, a: float, geo: sf.GeometryCache, tol: float = STAGE_TOL):
    """Solve (I - a * Lap_gamma) c = rhs on order-p coefficients.

    Returns (coefficients, iteration count). a = 0 short-circuits.
    """
    p = sf.order_of(rhs)
    if a == 0.0:
        return rhs.copy(), 0
    ns = _packed_degrees(p)
    diag = 1.0 + a * ns * (ns + 1.0)

    def matvec(v):
        c = sg.unpack_real(v, p)
        lap = sf.laplace_beltrami_coeffs(c, geo, p)
        return sg.pack_real(c - a * lap, p)

    res = gmres(matvec, sg.pack_real(rhs, p), tol=tol, precond=lambda v: v / diag)
    return sg.unpack_real(res.x, p), res.iterations


def imex_half_step(
    gamma_t: np.ndarray, f_e_t: np.ndarray, dt: float, pe: float, geo_mid: sf.GeometryCache
) -> tuple[np.ndarray, int]:
    """Stage solve for Gamma at t + dt/2 on the midpoint geometry.

    f_e_t: coefficients of the explicit terms at time t (order p).
    """
    inv_pe = 0.0 if math.isinf(pe) else 1.0 / pe
    rhs = gamma_t + 0.5 * dt * f_e_t
    return _stage_solve(rhs, 0.5 * dt * inv_pe, geo_mid)


def imex_full_step(
    gamma_t: np.ndarray,
    gamma_half: np.ndarray,
    f_e_mid: np.ndarray,
    dt: float,
    pe: float,
    geo_mid: sf.GeometryCache,
) -> np.ndarray:
    """Gamma_{t+dt} = Gamma_t + dt * (f_E(mid) + (1/Pe) Lap Gamma_half)."""
    inv_pe = 0.0 if math.isinf(pe) else 1.0 / pe
    p = sf.order_of(gamma_t)
    k_half = inv_pe * sf.laplace_beltrami_coeffs(gamma_half, geo_mid, p) if inv_pe else np.zeros_like(gamma_t)
    return gamma_t + dt * (f_e_mid + k_half)


def imex1_step(
    gamma_t: np.ndarray, f_e_t: np.ndarray, dt: float, pe: float, geo_end: sf.GeometryCache
) -> tuple[np.ndarray, int]:
    """First-order companion: (I - dt (1/Pe) Lap) Gamma = Gamma_t + dt f_E(t)."""
    inv_pe = 0.0 if math.isinf(pe) else 1.0 / pe
    rhs = gamma_t + dt * f_e_t
    return _stage_solve(rhs, dt * inv_pe, geo_end)


def total_mass(gamma: np.ndarray, geo: sf.GeometryCache) -> float:
    gv = sg.inverse_transform(sg.resample(gamma, sf.order_of(gamma), geo.q), geo.q).real
    return float(sf.surface_integral(geo, gv))


def normalize_mean(gamma: np.ndarray, geo: sf.GeometryCache) -> np.ndarray:
    """Scale so the surface mean of Gamma is 1."""
    area = float(sf.surface_integral(geo, np.ones(geo.grid.shape)))
    mean = total_mass(gamma, geo) / area
    if abs(mean) < 1e-300:
        raise EosDomainError("cannot normalize: zero-mean concentration")
    return gamma / mean


def surf_error_estimates(
    gamma_new: np.ndarray, gamma_imex1: np.ndarray | None, mass_old: float, mass_new: float
) -> tuple[float | None, float]:
    """(err_imex1, err_conservation); the first is None when no companion ran."""
    if abs(mass_old) < 1e-300:
        raise EosDomainError("conservation estimator undefined for zero initial mass")
    err_cons = abs(mass_new - mass_old) / abs(mass_old)
    if gamma_imex1 is None:
        return None, err_cons
    p = sf.order_of(gamma_new)
    v_new = sg.inverse_transform(gamma_new, p).real
    v_1 = sg.inverse_transform(gamma_imex1, p).real
    denom = float(np.max(np.abs(v_new)))
    if denom < 1e-300:
        raise EosDomainError("imex1 estimator undefined for vanishing concentration")
    return float(np.max(np.abs(v_new - v_1))) / denom, err_cons
