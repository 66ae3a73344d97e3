"""Stress-strain laws for small-strain elasticity with analytic tangents.

Symmetric 2x2 tensors are handled in engineering coordinates
``(t11, t22, sqrt(2) t12)`` so the tensor double contraction is the Euclidean
dot product and the Frobenius norm is the vector norm.  All laws are
homogeneous in space; `stress`, `tangent`, and `energy` are vectorized over
leading axes of the strain array.

Implemented laws (plane problem, d = 2):

* linear Cauchy:      sigma = lam tr(eps) I + 2 mu eps
* Hencky-Mises:       sigma = (alpha - Phi'(rho)) tr(eps) I + 2 Phi'(rho) eps
  with alpha = lam + mu, rho = dev(eps) = tr(eps^2) - tr(eps)^2 / 2, and Phi
  either the exponential variant  Phi(rho) = mu (exp(-rho) + 2 rho)  or the
  Carreau variant  Phi(rho) = mu (rho / 2 + (1 + rho)^(1/2))
* isotropic damage:   sigma = (1 + |eps|)^(-1/2) C eps  (C = linear tensor)
* second order:       sigma = lam tr(eps) I + 2 mu eps + B tr(eps^2) I
                              + 2 B tr(eps) eps + C tr(eps)^2 I + A eps^2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
_M = np.array([1.0, 1.0, 0.0])  # identity tensor in engineering coordinates


def to_eng(tensors: np.ndarray) -> np.ndarray:
    """(..., 2, 2) symmetric tensors -> (..., 3) engineering vectors."""
    t = np.asarray(tensors, dtype=np.float64)
    return np.stack([t[..., 0, 0], t[..., 1, 1], SQRT2 * t[..., 0, 1]], axis=-1)


def from_eng(vecs: np.ndarray) -> np.ndarray:
    """(..., 3) engineering vectors -> (..., 2, 2) symmetric tensors."""
    v = np.asarray(vecs, dtype=np.float64)
    out = np.empty(v.shape[:-1] + (2, 2))
    out[..., 0, 0] = v[..., 0]
    out[..., 1, 1] = v[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = v[..., 2] / SQRT2
    return out


def deviator_scalar(eps: np.ndarray) -> np.ndarray:
    """dev(eps) = tr(eps^2) - tr(eps)^2 / 2 (d = 2); nonnegative."""
    e = np.asarray(eps)
    return 0.5 * (e[..., 0] - e[..., 1]) ** 2 + e[..., 2] ** 2


class UnsupportedLawError(Exception):
    pass


@dataclass(frozen=True)
class MaterialLaw:
    """Constitutive map with analytic tangent in engineering coordinates.

    `x` arguments are accepted for interface uniformity and ignored: all
    implemented laws are homogeneous.  `energy` is None for laws without a
    stored energy density in hyperelastic form (the damage model).
    """

    name: str
    parameters: dict
    stress: Callable[[np.ndarray], np.ndarray]
    tangent: Callable[[np.ndarray], np.ndarray]
    gamma: float
    energy: Callable[[np.ndarray], np.ndarray] | None = None
    symmetric_tangent: bool = True
    monotone: bool = True

    @property
    def hyperelastic(self) -> bool:
        return self.energy is not None


def linear_law(lam: float, mu: float) -> MaterialLaw:
    """Linear elasticity Cauchy stress with Lame parameters (Pa)."""
    _require_mu(mu)
    if lam + mu <= 0:
        raise ValueError("need lam + mu > 0")

    def stress(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        return lam * t[..., None] * _M + 2.0 * mu * e

    K = lam * np.outer(_M, _M) + 2.0 * mu * np.eye(3)

    def tangent(eps, x=None):
        e = np.asarray(eps)
        return np.broadcast_to(K, e.shape[:-1] + (3, 3)).copy()

    def energy(eps):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        return 0.5 * lam * t**2 + mu * np.sum(e**2, axis=-1)

    return MaterialLaw(
        name="linear",
        parameters={"lambda": lam, "mu": mu},
        stress=stress,
        tangent=tangent,
        energy=energy,
        gamma=2.0 * mu,
    )


def hencky_mises_law(variant: str, lam: float, mu: float) -> MaterialLaw:
    """Hencky-Mises law; `variant` selects the nonlinear modulus Phi.

    The feasibility bound sup Phi' < lam + mu is checked on creation and
    logged as a warning when violated (the law stays usable; the tangent is
    positive definite regardless for both variants).
    """
    _require_mu(mu)
    alpha = lam + mu
    if variant == "exp":
        phi = lambda r: mu * (np.exp(-r) + 2.0 * r)
        phi_p = lambda r: mu * (2.0 - np.exp(-r))
        phi_pp = lambda r: mu * np.exp(-r)
        sup_phi_p = 2.0 * mu
    elif variant == "carreau":
        phi = lambda r: mu * (0.5 * r + np.sqrt(1.0 + r))
        phi_p = lambda r: mu * (0.5 + 0.5 / np.sqrt(1.0 + r))
        phi_pp = lambda r: -0.25 * mu * (1.0 + r) ** (-1.5)
        sup_phi_p = mu
    else:
        raise ValueError(f"unknown Hencky-Mises variant {variant!r}")
    if sup_phi_p >= alpha:
        log.warning(
            "Hencky-Mises (%s): sup Phi' = %.3g >= lambda + mu = %.3g; "
            "the nonlinear first Lame function can change sign",
            variant, sup_phi_p, alpha,
        )

    def stress(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        p = phi_p(deviator_scalar(e))
        return ((alpha - p) * t)[..., None] * _M + 2.0 * p[..., None] * e

    def tangent(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        rho = deviator_scalar(e)
        p, pp = phi_p(rho), phi_pp(rho)
        d = 2.0 * e - t[..., None] * _M
        K = (alpha - p)[..., None, None] * np.multiply.outer(np.ones_like(t), np.outer(_M, _M))
        K += 2.0 * p[..., None, None] * np.eye(3)
        K += pp[..., None, None] * d[..., :, None] * d[..., None, :]
        return K

    def energy(eps):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        return 0.5 * alpha * t**2 + phi(deviator_scalar(e))

    return MaterialLaw(
        name=f"hencky_mises_{variant}",
        parameters={"variant": variant, "lambda": lam, "mu": mu},
        stress=stress,
        tangent=tangent,
        energy=energy,
        gamma=2.0 * float(phi_p(0.0)),
    )


def damage_law(base: MaterialLaw) -> MaterialLaw:
    """Isotropic damage law (1 - D(eps)) C eps with D(t) = 1 - (1 + |t|)^(-1/2).

    `base` must be a linear law (it supplies C).  No hyperelastic stored
    energy is available; the tangent is nonsymmetric.
    """
    if base.name != "linear":
        raise ValueError("damage law is built on top of the linear law")
    lam, mu = base.parameters["lambda"], base.parameters["mu"]

    def c_apply(e):
        t = e[..., 0] + e[..., 1]
        return lam * t[..., None] * _M + 2.0 * mu * e

    def stress(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        s = np.linalg.norm(e, axis=-1)
        return (1.0 + s)[..., None] ** (-0.5) * c_apply(e)

    K0 = lam * np.outer(_M, _M) + 2.0 * mu * np.eye(3)

    def tangent(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        s = np.linalg.norm(e, axis=-1)
        f = (1.0 + s) ** (-0.5)
        K = f[..., None, None] * np.broadcast_to(K0, e.shape[:-1] + (3, 3)).copy()
        fp = -0.5 * (1.0 + s) ** (-1.5)
        safe = np.where(s > 0.0, s, 1.0)
        unit = e / safe[..., None]
        K += np.where(s[..., None, None] > 0.0,
                      fp[..., None, None] * c_apply(e)[..., :, None] * unit[..., None, :],
                      0.0)
        return K

    return MaterialLaw(
        name="damage",
        parameters={"lambda": lam, "mu": mu},
        stress=stress,
        tangent=tangent,
        energy=None,
        gamma=2.0 * mu,
        symmetric_tangent=False,
    )


def second_order_law(lam: float, mu: float, A: float, B: float, C: float) -> MaterialLaw:
    """Second-order isotropic elasticity with moduli A, B, C (Pa).

    Not monotone in general; diagnostics report violations instead of the
    constructor rejecting parameters.
    """
    _require_mu(mu)

    def sq_eng(e):
        # engineering representation of the matrix square of eps
        out = np.empty_like(e)
        out[..., 0] = e[..., 0] ** 2 + 0.5 * e[..., 2] ** 2
        out[..., 1] = e[..., 1] ** 2 + 0.5 * e[..., 2] ** 2
        out[..., 2] = e[..., 2] * (e[..., 0] + e[..., 1])
        return out

    def stress(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        n2 = np.sum(e**2, axis=-1)
        iso = lam * t + B * n2 + C * t**2
        return iso[..., None] * _M + (2.0 * mu + 2.0 * B * t)[..., None] * e + A * sq_eng(e)

    def tangent(eps, x=None):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        g = lam * _M + 2.0 * B * e + 2.0 * C * t[..., None] * _M
        K = _M[:, None] * g[..., None, :]
        K = K + (2.0 * mu + 2.0 * B * t)[..., None, None] * np.eye(3)
        K = K + 2.0 * B * e[..., :, None] * _M[None, :]
        Q = np.zeros(e.shape[:-1] + (3, 3))
        Q[..., 0, 0] = 2.0 * e[..., 0]
        Q[..., 1, 1] = 2.0 * e[..., 1]
        Q[..., 0, 2] = Q[..., 2, 0] = e[..., 2]
        Q[..., 1, 2] = Q[..., 2, 1] = e[..., 2]
        Q[..., 2, 2] = t
        return K + A * Q

    def energy(eps):
        e = np.asarray(eps, dtype=np.float64)
        t = e[..., 0] + e[..., 1]
        n2 = np.sum(e**2, axis=-1)
        det = e[..., 0] * e[..., 1] - 0.5 * e[..., 2] ** 2
        tr3 = t * (n2 - det)
        return 0.5 * lam * t**2 + mu * n2 + (C / 3.0) * t**3 + B * t * n2 + (A / 3.0) * tr3

    return MaterialLaw(
        name="second_order",
        parameters={"lambda": lam, "mu": mu, "A": A, "B": B, "C": C},
        stress=stress,
        tangent=tangent,
        energy=energy,
        gamma=2.0 * mu,
        monotone=False,
    )


def stored_energy(law: MaterialLaw, eps: np.ndarray) -> np.ndarray:
    """Stored energy density Psi(eps); raises for non-hyperelastic laws."""
    if law.energy is None:
        raise UnsupportedLawError(f"law {law.name!r} has no hyperelastic stored energy")
    return law.energy(eps)


def _require_mu(mu: float) -> None:
    if mu <= 0:
        raise ValueError("need mu > 0")


@dataclass
class LawDiagnostics:
    """Sampled constitutive bounds; reports, not assertions."""

    growth_ratio_max: float         # sup |sigma(t) - sigma(0)| / |t|
    coercivity_ratio_min: float     # inf sigma(t) : t / |t|^2
    monotonicity_min: float         # inf (sigma(t) - sigma(s)) : (t - s)
    lipschitz_ratio_max: float      # sup |sigma(t) - sigma(s)| / |t - s|
    strong_monotonicity_min: float  # inf (sigma(t) - sigma(s)) : (t - s) / |t - s|^2
    samples: int = field(default=0)


def sample_diagnostics(law: MaterialLaw, n_samples: int = 10_000, radius: float = 1.0,
                       seed: int = 0) -> LawDiagnostics:
    """Monte-Carlo estimates of growth/coercivity/monotonicity constants."""
    rng = np.random.default_rng(seed)
    tau = rng.uniform(-radius, radius, size=(n_samples, 3))
    eta = rng.uniform(-radius, radius, size=(n_samples, 3))
    s_tau, s_eta = law.stress(tau), law.stress(eta)
    s0 = law.stress(np.zeros(3))
    norm_tau = np.linalg.norm(tau, axis=-1)
    diff = tau - eta
    s_diff = s_tau - s_eta
    norm_diff = np.linalg.norm(diff, axis=-1)
    prod = np.sum(s_diff * diff, axis=-1)
    ok = norm_diff > 1e-12
    return LawDiagnostics(
        growth_ratio_max=float(np.max(np.linalg.norm(s_tau - s0, axis=-1) / norm_tau)),
        coercivity_ratio_min=float(np.min(np.sum(s_tau * tau, axis=-1) / norm_tau**2)),
        monotonicity_min=float(np.min(prod[ok])),
        lipschitz_ratio_max=float(np.max(np.linalg.norm(s_diff, axis=-1)[ok] / norm_diff[ok])),
        strong_monotonicity_min=float(np.min(prod[ok] / norm_diff[ok] ** 2)),
        samples=n_samples,
    )
