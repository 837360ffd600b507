"""Weighted regression effect estimates with HC0 sandwich variances.

Three regressions of the outcome on treatment are supported:

* ``neyman``   -- ``Y ~ Z``
* ``pooled``   -- ``Y ~ Z + phi~(X)``
* ``separate`` -- ``Y ~ Z + phi~(X) + Z * phi~(X)`` (Lin-style)

where ``phi~`` are features centered at the estimand's target means. The
treatment coefficient's HC0 variance from the separate regression is the
residualized variance; the superpopulation addend
``gamma' S2 gamma / n`` accounts for sampling of covariate means.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.stats import norm

from .balance import WeightSet
from .data import Dataset, EstimandSpec, FeatureMap, Scope, Target, center_features
from .errors import RankDeficientError

Z975 = float(norm.ppf(0.975))
RANK_TOL = 1e-10


class Specification(str, enum.Enum):
    NEYMAN = "neyman"
    POOLED = "pooled"
    SEPARATE = "separate"


@dataclass
class EffectEstimate:
    tau_hat: float
    spec: Specification
    estimand: EstimandSpec
    intercept: float
    beta: np.ndarray
    gamma: np.ndarray
    residuals: np.ndarray
    coef: np.ndarray
    coef_names: list[str]
    var_hc0: float = float("nan")
    var_superpop_addend: float = 0.0
    hc1: bool = False
    design: np.ndarray = field(default=None, repr=False)
    bread: np.ndarray = field(default=None, repr=False)

    @property
    def var_total(self) -> float:
        if self.estimand.scope is Scope.SUPERPOPULATION:
            return self.var_hc0 + self.var_superpop_addend
        return self.var_hc0

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_total))

    @property
    def se_hc0(self) -> float:
        return float(np.sqrt(self.var_hc0))

    @property
    def ci(self) -> tuple[float, float]:
        h = Z975 * self.se
        return self.tau_hat - h, self.tau_hat + h

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {
            "spec": self.spec.value,
            "estimand": self.estimand.target.value,
            "scope": self.estimand.scope.value,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "var_hc0": self.var_hc0,
            "var_superpop_addend": self.var_superpop_addend,
            "ci_low": lo,
            "ci_high": hi,
            "coef": dict(zip(self.coef_names, self.coef.tolist())),
        }


def design_matrix(phi_c: np.ndarray, z: np.ndarray, spec: Specification,
                  names: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Columns ``[1, Z]`` then centered features, then interactions."""
    n, p = phi_c.shape
    names = names or [f"x{j + 1}" for j in range(p)]
    zf = z.astype(float)
    cols = [np.ones(n), zf]
    labels = ["(intercept)", "Z"]
    if spec in (Specification.POOLED, Specification.SEPARATE):
        cols.extend(phi_c.T)
        labels += names
    if spec is Specification.SEPARATE:
        cols.extend((phi_c * zf[:, None]).T)
        labels += [f"Z:{nm}" for nm in names]
    return np.column_stack(cols), labels


def _wls(xd: np.ndarray, y: np.ndarray, w: np.ndarray, labels: list[str]):
    sw = np.sqrt(w)
    q, r, piv = qr(xd * sw[:, None], mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < xd.shape[1]:
        dropped = [labels[j] for j in piv[rank:]]
        raise RankDeficientError(f"weighted design is rank deficient; pivoted out: {dropped}",
                                 dropped)
    coef_p = solve_triangular(r, q.T @ (y * sw))
    coef = np.empty_like(coef_p)
    coef[piv] = coef_p
    rinv = solve_triangular(r, np.eye(r.shape[0]))
    bread_p = rinv @ rinv.T
    bread = np.empty_like(bread_p)
    bread[np.ix_(piv, piv)] = bread_p
    return coef, bread


def wls_fit(d: Dataset, w: WeightSet, fmap: FeatureMap | None = None,
            spec: Specification | str = Specification.SEPARATE,
            estimand: EstimandSpec | None = None) -> EffectEstimate:
    """Weighted least squares point estimate; variances are left unset.

    ``fmap`` must already be centered for the estimand (see
    :func:`center_features`); when omitted, identity features are centered
    here.
    """
    spec = Specification(spec)
    estimand = estimand or EstimandSpec()
    if fmap is None or not fmap.centered:
        fmap = center_features(d, estimand, fmap)
    phi_c = fmap.transform_centered(d.x)
    names = fmap.names(d.covariate_names)
    xd, labels = design_matrix(phi_c, d.z, spec, names)
    coef, bread = _wls(xd, d.y, w.w, labels)
    p = phi_c.shape[1]
    beta = coef[2:2 + p] if spec is not Specification.NEYMAN else np.zeros(0)
    gamma = coef[2 + p:] if spec is Specification.SEPARATE else np.zeros(0)
    return EffectEstimate(
        tau_hat=float(coef[1]),
        spec=spec,
        estimand=estimand,
        intercept=float(coef[0]),
        beta=beta,
        gamma=gamma,
        residuals=d.y - xd @ coef,
        coef=coef,
        coef_names=labels,
        design=xd,
        bread=bread,
    )


def hc0_variance(fit: EffectEstimate, d: Dataset, w: WeightSet, *, hc1: bool = False) -> float:
    """Sandwich variance of the treatment coefficient, weights held fixed.

    ``bread @ X' W diag(e^2) W X @ bread``; with ``hc1`` the result is
    inflated by ``n / (n - k)``.
    """
    xd = fit.design
    u = (w.w * fit.residuals)[:, None] * xd
    meat = u.T @ u
    v = fit.bread[1] @ meat @ fit.bread[1]
    if hc1:
        n, k = xd.shape
        v *= n / (n - k)
    return float(v)


def weighted_cov(phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Covariance of rows of ``phi`` under weights normalized to sum to one."""
    w = w / w.sum()
    mu = w @ phi
    c = phi - mu
    return (c * w[:, None]).T @ c


def superpop_correction(fit: EffectEstimate, d: Dataset, w: WeightSet,
                        fmap: FeatureMap | None = None, *, att_divisor: str = "n") -> float:
    """Variance addend ``gamma' S2 gamma / n`` for population estimands.

    ``S2`` is the weighted covariance of phi(X) over the estimand's target
    rows (all units for ATE, treated for ATT), with weights renormalized
    over those rows. ``att_divisor='n_t'`` divides by the treated count
    instead of ``n`` for ATT.
    """
    if fit.spec is not Specification.SEPARATE:
        raise ValueError(f"superpopulation correction needs the separate spec, got {fit.spec.value}")
    if att_divisor not in ("n", "n_t"):
        raise ValueError("att_divisor must be 'n' or 'n_t'")
    fmap = fmap or FeatureMap()
    mask = fit.estimand.target_mask(d.z)
    s2 = weighted_cov(fmap.apply(d.x)[mask], w.w[mask])
    divisor = d.n
    if fit.estimand.target is Target.ATT and att_divisor == "n_t":
        divisor = d.n_t
    g = fit.gamma
    return float(max(g @ s2 @ g, 0.0) / divisor)


def estimate(d: Dataset, w: WeightSet, spec: Specification | str = Specification.SEPARATE,
             estimand: EstimandSpec | None = None, *, fmap: FeatureMap | None = None,
             hc1: bool = False, att_divisor: str = "n") -> EffectEstimate:
    """Point estimate, HC0 variance and, for the separate spec, the superpopulation addend.

    The addend is always computed for the separate spec so callers can
    report both SEs; it enters ``se`` only when the estimand's scope is
    ``Superpopulation``. Other specs carry no addend under either scope.
    """
    estimand = estimand or EstimandSpec()
    base = fmap or FeatureMap()
    fit = wls_fit(d, w, center_features(d, estimand, base) if not base.centered else base,
                  spec, estimand)
    fit.var_hc0 = hc0_variance(fit, d, w, hc1=hc1)
    fit.hc1 = hc1
    if fit.spec is Specification.SEPARATE:
        fit.var_superpop_addend = superpop_correction(fit, d, w, base, att_divisor=att_divisor)
    return fit
