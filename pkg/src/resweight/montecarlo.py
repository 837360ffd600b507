"""Simulation study: data-generating process, resampling frameworks, coverage scoring.

Every random draw comes from a Philox generator keyed by
``(master seed, stream, replication, component)``, so a replication's
numbers do not depend on which worker computes it or in what order.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .balance import solve_entropy
from .data import Dataset, EstimandSpec, Target
from .diagnostics import tail_ratio
from .errors import ResweightError, SolverError
from .inference import Z975, Specification, estimate
from .propensity import fit_glm, ipw_weights

log = logging.getLogger(__name__)

# X1..X3 covariance: variances (2, 1, 1); Cov(X1,X2)=1, Cov(X1,X3)=-1, Cov(X2,X3)=-0.5
COV_X123 = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])
_CHOL = np.linalg.cholesky(COV_X123)
SELECTION_COEF = np.array([1.0, 2.0, -2.0, -1.0, -0.5, 1.0])
NOISE_VAR = {"O1": 5.08, "O2": 4.14, "O3": 13.46}
D3_SCALE = np.sqrt(67.6 / 10.0)
ORACLE_N = 1_000_000
COVARIATE_NAMES = ("X1", "X2", "X3", "X4", "X5", "X6")

# stream ids
FIXED, REP, ORACLE = 0, 1, 2
# component ids within a stream
C_X, C_EPS, C_NU = 0, 1, 2


class Framework(str, enum.Enum):
    DESIGN = "design"
    MODEL = "model"
    SUPERPOP = "superpop"


class Weighting(str, enum.Enum):
    ENTROPY = "entropy"
    IPW_PROBIT = "ipw-probit"
    IPW_LOGIT = "ipw-logit"


ESTIMATORS = ("neyman", "pooled", "separate", "separate+correction")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def chi2(rng: np.random.Generator, k: int, size: int) -> np.ndarray:
    """Chi-square with ``k`` df as a sum of ``k`` squared standard normals."""
    return np.sum(rng.standard_normal((size, k)) ** 2, axis=1)


def draw_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    x = np.empty((n, 6))
    x[:, :3] = rng.standard_normal((n, 3)) @ _CHOL.T
    x[:, 3] = rng.uniform(-3.0, 3.0, n)
    x[:, 4] = chi2(rng, 1, n)
    x[:, 5] = (rng.uniform(size=n) < 0.5).astype(float)
    return x


def selection_noise(design: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if design == "D1":
        return rng.normal(0.0, np.sqrt(30.0), n)
    if design == "D2":
        return rng.normal(0.0, np.sqrt(100.0), n)
    if design == "D3":
        return D3_SCALE * (chi2(rng, 5, n) - 5.0) + 0.5
    raise ValueError(f"unknown design {design!r}")


def assign_treatment(x: np.ndarray, design: str, rng: np.random.Generator | None = None,
                     eps: np.ndarray | None = None) -> np.ndarray:
    """``Z = 1{X b + eps > 0}``; pass ``eps`` to bypass the draw."""
    if eps is None:
        eps = selection_noise(design, x.shape[0], rng)
    return (x @ SELECTION_COEF + eps > 0).astype(np.int8)


def treatment_effect(x: np.ndarray, effects: str) -> np.ndarray:
    if effects == "homogeneous":
        return np.zeros(x.shape[0])
    if effects == "heterogeneous":
        return x[:, 2] + x[:, 4] + 2.0 * x[:, 2] * x[:, 4]
    raise ValueError(f"unknown effects {effects!r}")


def control_mean(x: np.ndarray, outcome: str) -> np.ndarray:
    x1, x2, x3, x4, x5, x6 = x.T
    if outcome == "O1":
        return x1 + x2 + x3 - x4 + x5 + x6
    if outcome == "O2":
        return x1 + x2 + 0.2 * x3 * x4 - np.sqrt(x5)
    if outcome == "O3":
        return (x1 + x2 + x5) ** 2
    raise ValueError(f"unknown outcome {outcome!r}")


def gen_outcomes(x: np.ndarray, outcome: str, effects: str, rng: np.random.Generator | None = None,
                 nu: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Potential outcomes ``(Y0, Y1)`` with ``Y1 = Y0 + tau``."""
    if nu is None:
        nu = rng.normal(0.0, np.sqrt(NOISE_VAR[outcome]), x.shape[0])
    y0 = control_mean(x, outcome) + nu
    return y0, y0 + treatment_effect(x, effects)


@dataclass(frozen=True)
class SimulationConfig:
    framework: str = "model"
    design: str = "D1"
    outcome: str = "O1"
    effects: str = "homogeneous"
    estimand: str = "ATE"
    weighting: str = "entropy"
    n: int = 300
    replications: int = 2000
    seed: int = 20240601
    tol: float = 1e-8
    att_divisor: str = "n"
    max_failure_rate: float = 0.01

    def __post_init__(self):
        Framework(self.framework)
        Weighting(self.weighting)
        Target(self.estimand.upper())
        if self.design not in ("D1", "D2", "D3"):
            raise ValueError(f"unknown design {self.design!r}")
        if self.outcome not in NOISE_VAR:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.effects not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown effects {self.effects!r}")
        for name in ("n", "replications", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {v!r}")
        if self.n < 10 or self.replications < 2:
            raise ValueError("need n >= 10 and replications >= 2")

    def cell(self) -> dict:
        return {k: getattr(self, k) for k in
                ("framework", "design", "outcome", "effects", "estimand", "weighting", "n",
                 "replications", "seed")}


def expand_grid(raw: dict, **overrides) -> list[SimulationConfig]:
    """Configs for every combination of list-valued keys in ``raw``."""
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    allowed = {f.name for f in fields(SimulationConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    keys = list(raw)
    values = [v if isinstance(v, list) else [v] for v in raw.values()]
    return [SimulationConfig(**dict(zip(keys, combo))) for combo in itertools.product(*values)]


@dataclass
class _State:
    config: SimulationConfig
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    nu: np.ndarray | None = None


def _fixed_state(cfg: SimulationConfig) -> _State:
    st = _State(cfg)
    fw = Framework(cfg.framework)
    if fw is Framework.SUPERPOP:
        return st
    st.x = draw_covariates(cfg.n, rng_for(cfg.seed, FIXED, C_X))
    if fw is Framework.DESIGN:
        st.nu = rng_for(cfg.seed, FIXED, C_NU).normal(0.0, np.sqrt(NOISE_VAR[cfg.outcome]), cfg.n)
    else:
        st.z = assign_treatment(st.x, cfg.design, rng_for(cfg.seed, FIXED, C_EPS))
    return st


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _weights(d: Dataset, est: EstimandSpec, cfg: SimulationConfig):
    wt = Weighting(cfg.weighting)
    if wt is Weighting.ENTROPY:
        return solve_entropy(d, est, tol=cfg.tol)
    fit = fit_glm(d, "probit" if wt is Weighting.IPW_PROBIT else "logit")
    if not fit.converged:
        raise SolverError("; ".join(fit.notes) or "propensity fit failed")
    return ipw_weights(fit, d, est)


REP_FIELDS = (
    "rep", "ok", "error", "n_t", "sate", "satt",
    *[f"{e}_{k}" for e in ESTIMATORS for k in ("tau", "se")],
    "fwl_gap", "tail_ratio", "fixed_hash",
)


def run_replication(st: _State, r: int) -> dict:
    """One replication: draw per framework, weight, estimate all four variants."""
    cfg = st.config
    fw = Framework(cfg.framework)
    if fw is Framework.SUPERPOP:
        x = draw_covariates(cfg.n, rng_for(cfg.seed, REP, r, C_X))
    else:
        x = st.x
    if fw is Framework.MODEL:
        z = st.z
    else:
        z = assign_treatment(x, cfg.design, rng_for(cfg.seed, REP, r, C_EPS))
    if fw is Framework.DESIGN:
        nu = st.nu
    else:
        nu = rng_for(cfg.seed, REP, r, C_NU).normal(0.0, np.sqrt(NOISE_VAR[cfg.outcome]), cfg.n)
    y0, y1 = gen_outcomes(x, cfg.outcome, cfg.effects, nu=nu)
    tau = y1 - y0
    rec = {k: float("nan") for k in REP_FIELDS}
    rec.update(rep=r, ok=0, error="", n_t=int(z.sum()), sate=float(tau.mean()),
               satt=float(tau[z == 1].mean()) if z.any() else float("nan"))
    rec["fixed_hash"] = {Framework.DESIGN: lambda: _digest(x, y0, y1),
                         Framework.MODEL: lambda: _digest(x, z),
                         Framework.SUPERPOP: lambda: ""}[fw]()
    est = EstimandSpec(Target(cfg.estimand.upper()))
    try:
        d = Dataset(np.where(z == 1, y1, y0), z, x, COVARIATE_NAMES)
        w = _weights(d, est, cfg)
        fits = {s: estimate(d, w, s, est, att_divisor=cfg.att_divisor) for s in Specification}
    except ResweightError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"[:200]
        return rec
    sep = fits[Specification.SEPARATE]
    rec.update(ok=1)
    for s, f in fits.items():
        rec[f"{s.value}_tau"] = f.tau_hat
        rec[f"{s.value}_se"] = f.se_hc0
    rec["separate+correction_tau"] = sep.tau_hat
    rec["separate+correction_se"] = float(np.sqrt(sep.var_hc0 + sep.var_superpop_addend))
    rec["fwl_gap"] = max(abs(fits[Specification.NEYMAN].tau_hat - sep.tau_hat),
                         abs(fits[Specification.NEYMAN].tau_hat - fits[Specification.POOLED].tau_hat))
    rec["tail_ratio"] = max(tail_ratio(w.w[z == 1]), tail_ratio(w.w[z == 0]))
    return rec


_WORKER_STATE: _State | None = None


def _init_worker(cfg: SimulationConfig):
    global _WORKER_STATE
    _WORKER_STATE = _fixed_state(cfg)


def _run_chunk(reps: range) -> list[dict]:
    return [run_replication(_WORKER_STATE, r) for r in reps]


def run_replications(cfg: SimulationConfig, workers: int = 1) -> list[dict]:
    """All replication records, in replication-index order."""
    reps = range(cfg.replications)
    if workers <= 1:
        st = _fixed_state(cfg)
        return [run_replication(st, r) for r in reps]
    size = max(1, cfg.replications // (workers * 4))
    chunks = [range(i, min(i + size, cfg.replications)) for i in range(0, cfg.replications, size)]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg,)) as pool:
        out = []
        for part in pool.map(_run_chunk, chunks):
            out.extend(part)
    return out


@lru_cache(maxsize=16)
def population_truth(seed: int, design: str, effects: str, n: int = ORACLE_N) -> tuple[float, float]:
    """(PATE, PATT) from one large draw of the data-generating process."""
    x = draw_covariates(n, rng_for(seed, ORACLE, C_X))
    z = assign_treatment(x, design, rng_for(seed, ORACLE, C_EPS))
    tau = treatment_effect(x, effects)
    return float(tau.mean()), float(tau[z == 1].mean())


class SimulationFailed(SolverError):
    code = "simulation_failed"


def _truths(cfg: SimulationConfig, recs: list[dict]) -> tuple[float, np.ndarray | None]:
    """Scalar truth for the cell plus, for design-based ATT, the realized per-rep SATT."""
    fw = Framework(cfg.framework)
    att = cfg.estimand.upper() == "ATT"
    if fw is Framework.SUPERPOP:
        pate, patt = population_truth(cfg.seed, cfg.design, cfg.effects)
        return (patt if att else pate), None
    ok = [r for r in recs if r["ok"]]
    if not att:
        return ok[0]["sate"] if ok else float("nan"), None
    satt = np.array([r["satt"] for r in ok])
    if fw is Framework.MODEL:
        return float(satt[0]), None
    return float(satt.mean()), satt


def _score(tau, se, truth) -> dict:
    tau, se = np.asarray(tau), np.asarray(se)
    truth = np.broadcast_to(np.asarray(truth, dtype=float), tau.shape)
    r = tau.size
    err = tau - truth
    bias = float(err.mean())
    cover = np.abs(err) <= Z975 * se
    cover_adj = np.abs(err - bias) <= Z975 * se
    emp_sd = float(tau.std(ddof=1))
    cov = float(cover.mean())
    cov_adj = float(cover_adj.mean())
    return {
        "coverage": cov,
        "coverage_mcse": float(np.sqrt(cov * (1 - cov) / r)),
        "bias_adj_coverage": cov_adj,
        "bias_adj_coverage_mcse": float(np.sqrt(cov_adj * (1 - cov_adj) / r)),
        "se_ratio": float(se.mean() / emp_sd) if emp_sd > 0 else float("nan"),
        "mean_se": float(se.mean()),
        "emp_sd": emp_sd,
        "bias": bias,
    }


REPORT_FIELDS = (
    "framework", "design", "outcome", "effects", "estimand", "weighting", "n", "replications",
    "seed", "estimator", "truth", "completed", "failures", "coverage", "coverage_mcse",
    "bias_adj_coverage", "bias_adj_coverage_mcse", "se_ratio", "mean_se", "emp_sd", "bias",
    "realized_coverage", "realized_bias_adj_coverage", "max_fwl_gap", "mean_tail_ratio",
    "heavy_tail",
)
HEAVY_TAIL_RATIO = 5.0


@dataclass
class SimulationReport:
    config: SimulationConfig
    rows: list[dict]
    records: list[dict] = field(repr=False, default_factory=list)

    def row(self, estimator: str) -> dict:
        return next(r for r in self.rows if r["estimator"] == estimator)


def summarize(cfg: SimulationConfig, recs: list[dict]) -> SimulationReport:
    ok = [r for r in recs if r["ok"]]
    failures = len(recs) - len(ok)
    if failures > cfg.max_failure_rate * len(recs):
        reasons = sorted({r["error"].split(":")[0] for r in recs if not r["ok"]})
        raise SimulationFailed(
            f"{failures}/{len(recs)} replications failed (limit {cfg.max_failure_rate:.0%}); "
            f"errors: {reasons}"
        )
    truth, realized = _truths(cfg, recs)
    tails = np.array([r["tail_ratio"] for r in ok])
    fwl = np.array([r["fwl_gap"] for r in ok])
    rows = []
    for e in ESTIMATORS:
        tau = np.array([r[f"{e}_tau"] for r in ok])
        se = np.array([r[f"{e}_se"] for r in ok])
        row = {**cfg.cell(), "estimator": e, "truth": truth, "completed": len(ok),
               "failures": failures, **_score(tau, se, truth)}
        if realized is not None:
            alt = _score(tau, se, realized)
            row["realized_coverage"] = alt["coverage"]
            row["realized_bias_adj_coverage"] = alt["bias_adj_coverage"]
        else:
            row["realized_coverage"] = row["realized_bias_adj_coverage"] = ""
        row["max_fwl_gap"] = float(fwl.max())
        row["mean_tail_ratio"] = float(tails.mean())
        row["heavy_tail"] = int(tails.mean() >= HEAVY_TAIL_RATIO)
        rows.append(row)
    return SimulationReport(cfg, rows, recs)


def run_study(cfg: SimulationConfig, workers: int = 1) -> SimulationReport:
    log.info("simulating %s", json.dumps(asdict(cfg), sort_keys=True))
    return summarize(cfg, run_replications(cfg, workers))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def report_csv(reports: list[SimulationReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_FIELDS)
    for rep in reports:
        for row in rep.rows:
            wr.writerow([_fmt(row[k]) for k in REPORT_FIELDS])
    return buf.getvalue()


def records_csv(reports: list[SimulationReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    cell_keys = ("framework", "design", "outcome", "effects", "estimand", "weighting")
    wr.writerow([*cell_keys, *REP_FIELDS])
    for rep in reports:
        cell = [getattr(rep.config, k) for k in cell_keys]
        for rec in rep.records:
            wr.writerow(cell + [_fmt(rec[k]) for k in REP_FIELDS])
    return buf.getvalue()


def load_config(path: str | Path) -> dict:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("simulation config must be a JSON object")
    return raw
