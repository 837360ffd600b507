"""Exact entropy balancing through Newton's method on the convex dual.

Within a group with base weights ``q`` and features ``phi``, the weights
minimizing ``sum w log(w / q)`` subject to ``sum w = 1`` and
``sum w phi = target`` have the form ``w ∝ q exp(lambda' phi)``, where
``lambda`` minimizes the dual

    L(lambda) = log sum_i q_i exp(lambda' (phi_i - target)).

The dual gradient is the moment violation of the implied weights and the
Hessian is their weighted covariance of ``phi``.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import qr
from scipy.optimize import linprog
from scipy.special import logsumexp

from .data import Dataset, EstimandSpec, FeatureMap, Target, balance_target
from .errors import DataError, InfeasibleError, MaxIterationsError, RankDeficientError

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MAX_HALVINGS = 60
COND_LIMIT = 1e12
LAMBDA_CAP = 1e3
RANK_TOL = 1e-10


class Provenance(str, enum.Enum):
    ENTROPY = "Entropy"
    IPW = "IPW"
    EXTERNAL = "External"


@dataclass
class WeightSet:
    """Unit weights summing to one within each treatment group."""

    w: np.ndarray
    provenance: Provenance
    normalized: bool = True
    meta: dict = field(default_factory=dict)

    def group(self, z: np.ndarray, g: int) -> np.ndarray:
        return self.w[z == g]

    def scaled(self, c: float) -> "WeightSet":
        return WeightSet(self.w * c, self.provenance, normalized=False, meta=dict(self.meta))

    @classmethod
    def from_external(cls, d: Dataset, w) -> "WeightSet":
        w = np.asarray(w, dtype=float)
        if w.shape != (d.n,):
            raise DataError(f"expected {d.n} weights, got {w.shape[0] if w.ndim else 'scalar'}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("external weights must be finite and nonnegative")
        return cls(normalize_by_group(w, d.z), Provenance.EXTERNAL)

    def to_csv(self, path: str | Path, d: Dataset, pscore: np.ndarray | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["unit", "w", "group"] + (["pscore"] if pscore is not None else []))
            for i in range(d.n):
                row = [i, f"{self.w[i]:.10g}", int(d.z[i])]
                if pscore is not None:
                    row.append(f"{pscore[i]:.10g}")
                wr.writerow(row)


def normalize_by_group(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    out = np.array(w, dtype=float)
    for g in (0, 1):
        m = z == g
        s = out[m].sum()
        if not s > 0:
            raise DataError(f"weights in group {g} sum to {s}; cannot normalize")
        out[m] /= s
    return out


def _check_rank(phi_std: np.ndarray, names: list[str], group: str) -> None:
    _, r, piv = qr(phi_std, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0:
        return
    rank = int(np.sum(d > RANK_TOL * max(d[0], 1e-300)))
    if rank < phi_std.shape[1]:
        dropped = [names[j] for j in piv[rank:]]
        raise RankDeficientError(
            f"features are collinear within the {group} group; dependent columns: {dropped}",
            columns=dropped,
        )


def _hull_feasible(phi: np.ndarray, target: np.ndarray) -> bool:
    """LP check that target is a convex combination of the rows of phi."""
    n = phi.shape[0]
    a_eq = np.vstack([phi.T, np.ones((1, n))])
    b_eq = np.concatenate([target, [1.0]])
    res = linprog(np.zeros(n), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0


@dataclass
class GroupSolution:
    w: np.ndarray
    lam: np.ndarray
    iterations: int
    max_imbalance: float
    trace: list


def solve_group(
    phi: np.ndarray,
    target: np.ndarray,
    q: np.ndarray | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
    standardize: bool = True,
    names: list[str] | None = None,
    group: str = "group",
) -> GroupSolution:
    """Entropy weights for one group, calibrated so ``sum w phi == target``.

    Parameters
    ----------
    phi : (n_z, p) array
        Features of the group's units.
    target : (p,) array
        Moment targets.
    q : (n_z,) array, optional
        Base weights; uniform when omitted.
    tol : float
        Convergence threshold on the raw-scale max absolute imbalance.
    standardize : bool
        Solve on columns scaled to mean 0, SD 1 and map lambda back.

    Returns
    -------
    GroupSolution
        ``lam`` is on the raw feature scale, so ``w ∝ q exp(phi @ lam)``.
    """
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    n_z, p = phi.shape
    names = names or [f"phi{j + 1}" for j in range(p)]
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.full(n_z, 1.0 / n_z) if q is None else np.asarray(q, dtype=float) / np.sum(q)
    logq = np.log(q)

    if standardize:
        loc = phi.mean(axis=0)
        scale = phi.std(axis=0)
        if np.any(scale == 0):
            const = [names[j] for j in np.flatnonzero(scale == 0)]
            raise RankDeficientError(
                f"features constant within the {group} group: {const}", columns=const
            )
    else:
        loc, scale = np.zeros(p), np.ones(p)
    a = (phi - target) / scale
    _check_rank((phi - loc) / scale, names, group)

    def dual(lam):
        eta = logq + a @ lam
        lse = logsumexp(eta)
        return lse, np.exp(eta - lse)

    lam = np.zeros(p)
    f, w = dual(lam)
    trace = []
    it = 0
    for it in range(max_iter + 1):
        g = w @ a
        imbalance = np.max(np.abs(g * scale))
        trace.append({"iter": it, "dual": float(f), "max_imbalance": float(imbalance)})
        if imbalance <= tol:
            lam, f, w, imbalance = _polish(dual, a, scale, lam, f, w, imbalance)
            break
        if it == max_iter:
            break
        ac = a - g
        h = (ac * w[:, None]).T @ ac
        try:
            cond = np.linalg.cond(h)
        except np.linalg.LinAlgError:
            cond = np.inf
        if cond > COND_LIMIT:
            step = -g
        else:
            step = -np.linalg.solve(h, g)
        slope = g @ step
        alpha = 1.0
        for _ in range(MAX_HALVINGS):
            f_new, w_new = dual(lam + alpha * step)
            if f_new <= f + ARMIJO_C * alpha * slope:
                break
            alpha *= ARMIJO_SHRINK
        else:
            # dual values can tie at roundoff level near the optimum
            alpha = 1.0
            f_new, w_new = dual(lam + step)
            if np.max(np.abs(w_new @ a)) >= np.max(np.abs(g)):
                _fail(phi, target, names, g * scale, group, "line search stalled", it)
        lam = lam + alpha * step
        f, w = f_new, w_new
        if np.linalg.norm(lam) > LAMBDA_CAP:
            _fail(phi, target, names, g * scale, group, "dual vector diverged", it)

    if imbalance > tol:
        if not _hull_feasible(phi, target):
            _fail(phi, target, names, g * scale, group, "target outside convex hull", it)
        raise MaxIterationsError(
            f"{group}: no convergence after {max_iter} iterations; "
            f"max imbalance {imbalance:.3e} > tol {tol:.1e}"
        )
    return GroupSolution(w=w, lam=lam / scale, iterations=it, max_imbalance=float(imbalance),
                         trace=trace)


def _polish(dual, a, scale, lam, f, w, imbalance, steps=2):
    # extra full Newton steps push the violation to roundoff; kept only if they help
    for _ in range(steps):
        g = w @ a
        ac = a - g
        h = (ac * w[:, None]).T @ ac
        try:
            cand = lam - np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        f_new, w_new = dual(cand)
        imb = np.max(np.abs((w_new @ a) * scale))
        if not imb < imbalance:
            break
        lam, f, w, imbalance = cand, f_new, w_new, imb
    return lam, f, w, imbalance


def _fail(phi, target, names, imbalance, group, why, it):
    j = int(np.argmax(np.abs(imbalance)))
    raise InfeasibleError(
        f"{group}: balance infeasible ({why} at iteration {it}); worst moment {names[j]!r} "
        f"imbalance {imbalance[j]:.4g} (target {target[j]:.6g}, "
        f"group range [{phi[:, j].min():.6g}, {phi[:, j].max():.6g}])"
    )


def solve_entropy(
    d: Dataset,
    spec: EstimandSpec | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    *,
    fmap: FeatureMap | None = None,
    base_weights: np.ndarray | None = None,
    standardize: bool = True,
    trace_path: str | Path | None = None,
) -> WeightSet:
    """Exact entropy balancing weights for the ATE (three-way) or ATT target.

    For the ATE both groups are calibrated to the full-sample means of
    phi(X); for the ATT only controls are calibrated, to the treated means,
    and treated units get weight ``1 / n_t``.
    """
    spec = spec or EstimandSpec()
    fmap = fmap or FeatureMap()
    phi = fmap.apply(d.x)
    names = fmap.names(d.covariate_names)
    target = balance_target(d, spec, fmap)
    q_all = None if base_weights is None else np.asarray(base_weights, dtype=float)

    w = np.empty(d.n)
    meta = {"iterations": {}, "max_imbalance": {}, "lambda": {}, "tol": tol}
    groups = {"control": 0, "treated": 1}
    if spec.target is Target.ATT:
        w[d.treated] = 1.0 / d.n_t
        groups = {"control": 0}
    traces = {}
    for label, g in groups.items():
        m = d.z == g
        sol = solve_group(
            phi[m], target,
            None if q_all is None else q_all[m],
            tol=tol, max_iter=max_iter, standardize=standardize, names=names, group=label,
        )
        w[m] = sol.w
        meta["iterations"][label] = sol.iterations
        meta["max_imbalance"][label] = sol.max_imbalance
        meta["lambda"][label] = sol.lam.tolist()
        traces[label] = sol.trace
        log.debug("%s group solved in %d iterations", label, sol.iterations)
    if trace_path is not None:
        Path(trace_path).write_text(json.dumps(traces, indent=2))
    return WeightSet(w, Provenance.ENTROPY, meta=meta)


def check_balance(
    d: Dataset, w: WeightSet, spec: EstimandSpec | None = None, fmap: FeatureMap | None = None
) -> dict[str, np.ndarray]:
    """Weighted group mean of phi(X) minus the balance target, per group."""
    spec = spec or EstimandSpec()
    fmap = fmap or FeatureMap()
    phi = fmap.apply(d.x)
    target = balance_target(d, spec, fmap)
    out = {}
    for label, g in (("control", 0), ("treated", 1)):
        m = d.z == g
        wg = w.w[m] / w.w[m].sum()
        out[label] = wg @ phi[m] - target
    return out
