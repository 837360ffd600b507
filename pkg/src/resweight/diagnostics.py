"""Balance and prognosis diagnostics: SMD, weighted R^2, weight quantiles."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .balance import WeightSet
from .data import Dataset, EstimandSpec, FeatureMap
from .inference import Specification, _wls, estimate

QUANTILE_PROBS = (0.0, 0.10, 0.25, 0.50, 0.75, 0.90, 1.0)


def smd(d: Dataset, w: WeightSet | None = None, fmap: FeatureMap | None = None) -> np.ndarray:
    """Standardized mean difference per feature.

    Numerator is the weighted treated mean minus weighted control mean
    (plain means when ``w`` is None); denominator is the pooled unweighted
    SD ``sqrt((s_t^2 + s_c^2) / 2)``. Constant features give NaN.
    """
    fmap = fmap or FeatureMap()
    phi = fmap.apply(d.x)
    t = d.treated
    if w is None:
        wt = np.full(d.n_t, 1.0 / d.n_t)
        wc = np.full(d.n_c, 1.0 / d.n_c)
    else:
        wt = w.w[t] / w.w[t].sum()
        wc = w.w[~t] / w.w[~t].sum()
    diff = wt @ phi[t] - wc @ phi[~t]
    sd = np.sqrt((phi[t].var(axis=0, ddof=1) + phi[~t].var(axis=0, ddof=1)) / 2)
    out = np.full(phi.shape[1], np.nan)
    ok = sd > 0
    out[ok] = diff[ok] / sd[ok]
    if not ok.all():
        names = [n for n, k in zip(fmap.names(d.covariate_names), ok) if not k]
        warnings.warn(f"zero pooled SD for {names}; SMD reported as NaN", RuntimeWarning,
                      stacklevel=2)
    return out


def _ssr(xd, r, w, labels):
    coef, _ = _wls(xd, r, w, labels)
    e = r - xd @ coef
    return float(w @ e**2)


def weighted_r2(d: Dataset, w: WeightSet | None, response: str = "Y",
                fmap: FeatureMap | None = None) -> tuple[float, np.ndarray]:
    """Weighted R^2 of ``response`` (Y or Z) on ``[1, phi(X)]`` and partial R^2 per feature.

    Partial R^2 for feature j is ``(SSR_without_j - SSR_full) / SSR_without_j``.
    """
    fmap = fmap or FeatureMap()
    phi = fmap.apply(d.x)
    names = fmap.names(d.covariate_names)
    r = {"Y": d.y, "Z": d.z.astype(float)}[response.upper()]
    ww = np.full(d.n, 1.0 / d.n) if w is None else w.w / w.w.sum()
    xd = np.column_stack([np.ones(d.n), phi])
    labels = ["(intercept)", *names]
    ssr_full = _ssr(xd, r, ww, labels)
    sst = float(ww @ (r - ww @ r) ** 2)
    r2 = 0.0 if sst == 0 else min(max(1.0 - ssr_full / sst, 0.0), 1.0)
    partial = np.empty(phi.shape[1])
    for j in range(phi.shape[1]):
        keep = [k for k in range(xd.shape[1]) if k != j + 1]
        ssr_j = _ssr(xd[:, keep], r, ww, [labels[k] for k in keep])
        partial[j] = 0.0 if ssr_j <= 0 else min(max((ssr_j - ssr_full) / ssr_j, 0.0), 1.0)
    return r2, partial


def weight_quantiles(w: np.ndarray, probs=QUANTILE_PROBS) -> dict[float, float]:
    """Type-7 quantiles of ``w`` after rescaling so its mean is one."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("empty weight vector")
    q = np.quantile(w / w.mean(), probs)
    return dict(zip(probs, q.tolist()))


def group_quantiles(ws: WeightSet, d: Dataset) -> dict[str, dict[float, float]]:
    return {label: weight_quantiles(ws.w[d.z == g]) for label, g in (("treated", 1), ("control", 0))}


def tail_ratio(w: np.ndarray) -> float:
    """Max over median of a weight vector; heavy right tails give large values."""
    return float(np.max(w) / np.median(w))


@dataclass
class DiagnosticsReport:
    names: list[str]
    smd_initial: np.ndarray
    smd_weighted: np.ndarray
    partial_r2_y: np.ndarray
    partial_r2_z: np.ndarray
    r2_y: float
    r2_z: float
    quantiles: dict

    def rows(self) -> list[dict]:
        return [
            {
                "covariate": nm,
                "initial_imbalance": self.smd_initial[j],
                "post_weighting_imbalance": self.smd_weighted[j],
                "partial_r2_y": self.partial_r2_y[j],
                "partial_r2_z": self.partial_r2_z[j],
            }
            for j, nm in enumerate(self.names)
        ]

    def to_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            for r in rows:
                wr.writerow({k: v if isinstance(v, str) else f"{v:.10g}" for k, v in r.items()})


def diagnose(d: Dataset, w: WeightSet, fmap: FeatureMap | None = None) -> DiagnosticsReport:
    fmap = fmap or FeatureMap()
    r2_y, py = weighted_r2(d, w, "Y", fmap)
    r2_z, pz = weighted_r2(d, w, "Z", fmap)
    return DiagnosticsReport(
        names=fmap.names(d.covariate_names),
        smd_initial=smd(d, None, fmap),
        smd_weighted=smd(d, w, fmap),
        partial_r2_y=py,
        partial_r2_z=pz,
        r2_y=r2_y,
        r2_z=r2_z,
        quantiles=group_quantiles(w, d),
    )


def effect_summary(d: Dataset, w: WeightSet, estimand: EstimandSpec | None = None,
                   fmap: FeatureMap | None = None) -> dict:
    """One results-table row: wDIM with its Neyman SE next to the residualized separate fit."""
    estimand = estimand or EstimandSpec()
    ney = estimate(d, w, Specification.NEYMAN, estimand, fmap=fmap)
    sep = estimate(d, w, Specification.SEPARATE, estimand, fmap=fmap)
    r2_y, _ = weighted_r2(d, w, "Y", fmap)
    r2_z, _ = weighted_r2(d, w, "Z", fmap)
    return {
        "tau_wdim": ney.tau_hat,
        "neyman_se": ney.se,
        "tau_wdim_res": sep.tau_hat,
        "res_sep_se": sep.se_hc0,
        "superpop_se": float(np.sqrt(sep.var_hc0 + sep.var_superpop_addend)),
        "pct_improvement": 100.0 * (1.0 - sep.se_hc0 / ney.se),
        "r2_y": r2_y,
        "r2_z": r2_z,
    }
