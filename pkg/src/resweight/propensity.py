"""Probit/logit propensity models and Hajek-normalized IPW weights."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.special import expit, log_expit, log_ndtr, ndtr

from .balance import Provenance, WeightSet
from .data import Dataset, EstimandSpec, Target
from .errors import RankDeficientError, SolverError

log = logging.getLogger(__name__)

CLIP = 1e-6
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_NORM = 1e3
_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


class Link(str, enum.Enum):
    PROBIT = "probit"
    LOGIT = "logit"


@dataclass
class GlmFit:
    link: Link
    coef: np.ndarray
    pscore: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    separated: bool = False
    loglik: float = float("nan")
    n_clipped: int = 0
    notes: list = field(default_factory=list)


def _loglik_parts(eta: np.ndarray, z: np.ndarray, link: Link):
    """Log-likelihood, score weights and negative-Hessian weights in eta."""
    if link is Link.LOGIT:
        ll = np.sum(np.where(z == 1, log_expit(eta), log_expit(-eta)))
        p = expit(eta)
        return ll, z - p, p * (1 - p)
    # probit; inverse Mills ratios via log-space for tail stability
    log_phi = -0.5 * eta**2 - _LOG_SQRT_2PI
    lp1, lp0 = log_ndtr(eta), log_ndtr(-eta)
    ll = np.sum(np.where(z == 1, lp1, lp0))
    m1 = np.exp(log_phi - lp1)
    m0 = np.exp(log_phi - lp0)
    score = np.where(z == 1, m1, -m0)
    neg_hess = np.where(z == 1, m1 * (eta + m1), m0 * (m0 - eta))
    return ll, score, neg_hess


def _design(x: np.ndarray, names: tuple[str, ...]):
    loc = x.mean(axis=0)
    scale = x.std(axis=0)
    if np.any(scale == 0):
        const = [names[j] for j in np.flatnonzero(scale == 0)]
        raise RankDeficientError(f"constant covariate columns in propensity design: {const}", const)
    xs = np.column_stack([np.ones(x.shape[0]), (x - loc) / scale])
    _, r, piv = qr(xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    if rank < xs.shape[1]:
        cols = ["(intercept)", *names]
        dropped = [cols[j] for j in piv[rank:]]
        raise RankDeficientError(f"propensity design is rank deficient; dependent columns: {dropped}",
                                 dropped)
    return xs, loc, scale


def fit_glm(d: Dataset, link: str | Link = Link.PROBIT, *, max_iter: int = MAX_ITER,
            tol: float = 1e-8, clip: float = CLIP) -> GlmFit:
    """Maximum-likelihood binary GLM of treatment on ``[1, X]`` by Newton-Raphson.

    Covariates are standardized internally and coefficients mapped back
    to the raw scale. Each iteration halves the step (up to 30 times)
    until the log-likelihood does not decrease.

    Complete separation is flagged rather than raised: the fit stops as
    soon as an iterate's linear predictor classifies every unit correctly
    (no finite MLE then exists), or the standardized coefficient norm
    exceeds 1e3.
    """
    link = Link(link)
    z = d.z.astype(float)
    if d.n <= d.p + 1:
        raise RankDeficientError(f"need n > p + 1 for the propensity model (n={d.n}, p={d.p})")
    xs, loc, scale = _design(d.x, d.covariate_names)
    beta = np.zeros(xs.shape[1])

    def raw_coef(b):
        slopes = b[1:] / scale
        return np.concatenate([[b[0] - slopes @ loc], slopes])

    x_raw = np.column_stack([np.ones(d.n), d.x])
    ll, score, nh = _loglik_parts(xs @ beta, z, link)
    converged = separated = False
    grad_norm = np.inf
    it = 0
    for it in range(max_iter + 1):
        grad_norm = float(np.max(np.abs(x_raw.T @ score)))
        if grad_norm <= tol and np.max(np.abs(xs.T @ score)) <= tol:
            converged = True
            break
        eta = xs @ beta
        if it > 0 and np.all((eta > 0) == (z == 1)) and np.all(eta != 0):
            separated = True
            break
        if np.linalg.norm(beta) > SEPARATION_NORM:
            separated = True
            break
        if it == max_iter:
            break
        info = (xs * nh[:, None]).T @ xs
        step = np.linalg.solve(info, xs.T @ score)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            ll_new, score_new, nh_new = _loglik_parts(xs @ cand, z, link)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll, score, nh = cand, ll_new, score_new, nh_new

    eta = xs @ beta
    p = expit(eta) if link is Link.LOGIT else ndtr(eta)
    n_clipped = int(np.sum((p < clip) | (p > 1 - clip)))
    notes = []
    if n_clipped:
        notes.append(f"{n_clipped} propensity scores clipped to [{clip}, {1 - clip}]")
    if separated:
        notes.append("perfect separation: no finite MLE")
        log.warning("propensity model shows perfect separation")
    elif not converged:
        notes.append(f"no convergence after {max_iter} iterations (grad {grad_norm:.2e})")
    return GlmFit(
        link=link,
        coef=raw_coef(beta),
        pscore=np.clip(p, clip, 1 - clip),
        iterations=it,
        grad_norm=grad_norm,
        converged=converged,
        separated=separated,
        loglik=float(ll),
        n_clipped=n_clipped,
        notes=notes,
    )


def ipw_weights(fit: GlmFit, d: Dataset, spec: EstimandSpec | None = None,
                *, allow_unconverged: bool = False) -> WeightSet:
    """Inverse propensity weights, renormalized to sum to one per group.

    ATE: treated ``1/e``, control ``1/(1-e)``. ATT: treated uniform,
    control ``e/(1-e)``.
    """
    spec = spec or EstimandSpec()
    if not fit.converged and not allow_unconverged:
        raise SolverError("propensity fit did not converge; pass allow_unconverged to override")
    e = fit.pscore
    t = d.treated
    if spec.target is Target.ATE:
        raw = np.where(t, 1.0 / e, 1.0 / (1.0 - e))
    else:
        raw = np.where(t, 1.0, e / (1.0 - e))
    w = np.empty(d.n)
    w[t] = raw[t] / raw[t].sum()
    w[~t] = raw[~t] / raw[~t].sum()
    meta = {"link": fit.link.value, "n_clipped": fit.n_clipped, "notes": list(fit.notes)}
    return WeightSet(w, Provenance.IPW, meta=meta)
