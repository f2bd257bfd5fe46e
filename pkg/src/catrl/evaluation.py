"""Policy evaluation: restricted mean survival, decision accuracy, benchmarks.

Counterfactual metrics draw fresh subjects from the oracle's covariate law,
apply the policy stage by stage, regenerate stage times under the chosen
arms (no censoring), and score against the true optimal rules. All policies
inside one evaluation share the same subject and noise draws, so policy
comparisons are paired.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, simgen
from .core import Dataset
from .dtr import FitConfig, fit, stable_seed
from .nuisance.survival import fit_km, km_rmst_stderr
from .rng import make_rng


@dataclass
class EvalReport:
    policy: str
    tau: float
    n_eval: int
    rmst: float
    rmst_se: float
    cdr1: float
    cdr1_se: float
    acdr: float
    acdr_se: float
    expected_survival: float
    expected_survival_se: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "policy", "tau", "n_eval", "rmst", "rmst_se", "cdr1", "cdr1_se",
            "acdr", "acdr_se", "expected_survival", "expected_survival_se")}


# ---- policies -------------------------------------------------------------


class FixedPolicy:
    """Assigns one constant arm per stage (g = c baselines)."""

    def __init__(self, arms: list[int], arities: list[int] | None = None):
        if arities is not None:
            for a, m in zip(arms, arities):
                if not 0 <= a < m:
                    raise ValueError(f"fixed arm {a} out of range for arity {m}")
        self.arms = list(arms)
        self.name = "g=" + "/".join(str(a) for a in dict.fromkeys(arms)) \
            if len(set(arms)) > 1 else f"g={arms[0]}"

    def stage_arms(self, k: int, histories, rng=None) -> np.ndarray:
        n = np.atleast_2d(np.asarray(histories)).shape[0]
        return np.full(n, self.arms[k - 1], dtype=np.int64)


class RandomPolicy:
    """Uniform arm assignment, drawn from the evaluator-provided stream."""

    name = "Random"

    def __init__(self, arities: list[int]):
        self.arities = list(arities)

    def stage_arms(self, k: int, histories, rng=None) -> np.ndarray:
        if rng is None:
            raise ValueError("RandomPolicy needs the evaluation RNG")
        n = np.atleast_2d(np.asarray(histories)).shape[0]
        return rng.integers(0, self.arities[k - 1], n)


class OraclePolicy:
    """The generator's true optimal rule (evaluation-only reference)."""

    name = "Oracle"

    def __init__(self, oracle: simgen.OracleHandle):
        self.oracle = oracle

    def stage_arms(self, k: int, histories, rng=None) -> np.ndarray:
        h = np.atleast_2d(np.asarray(histories, dtype=float))
        if k == 1:
            return self.oracle.g1(h)
        glucose = h[:, 11 + simgen.GLUCOSE]
        t1 = h[:, 10]
        return self.oracle.g2(glucose, t1)


# ---- metrics ----------------------------------------------------------------


def rmst_km(times, events, tau: float) -> float:
    """Kaplan-Meier restricted mean survival time on [0, tau], exact over
    the product-limit step function."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return fit_km(times, events).restricted_mean(tau)


def _prop_se(p: float, n: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / n)) if n > 0 else float("nan")


def counterfactual_eval(policy, oracle: simgen.OracleHandle, n_mc: int,
                        tau: float, seed: int = 0,
                        noise_free: bool = False) -> EvalReport:
    """Score a policy on fresh counterfactual draws (no censoring).

    cdr1: fraction assigned the true optimal arm at stage 1. acdr: fraction
    assigned the true optimal arm at every stage of their (uncensored)
    trajectory. rmst is the sample mean of min(T*, tau), which equals the
    KM restricted mean on censoring-free data.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng_cov = make_rng(seed, "cf-covariates")
    rng_eps = make_rng(seed, "cf-noise")
    rng_pol = make_rng(seed, "cf-policy")

    x1, x2 = oracle.sample_covariates(n_mc, rng_cov)
    eps1 = np.zeros(n_mc) if noise_free else oracle.noise(n_mc, rng_eps)
    eps2 = np.zeros(n_mc) if noise_free else oracle.noise(n_mc, rng_eps)

    a1 = np.asarray(policy.stage_arms(1, x1, rng_pol), dtype=np.int64)
    t1 = oracle.time1(x1, a1, eps1)
    h2 = np.hstack([x1, a1[:, None].astype(float), t1[:, None], x2])
    a2 = np.asarray(policy.stage_arms(2, h2, rng_pol), dtype=np.int64)
    t2 = oracle.time2(x2[:, simgen.GLUCOSE], t1, a2, eps2)

    g1 = oracle.g1(x1)
    g2 = oracle.g2(x2[:, simgen.GLUCOSE], t1)
    t_star = t1 + t2
    truncated = np.minimum(t_star, tau)
    correct1 = a1 == g1
    correct_all = correct1 & (a2 == g2)

    cdr1 = float(correct1.mean())
    acdr = float(correct_all.mean())
    name = getattr(policy, "name", policy.__class__.__name__)
    return EvalReport(
        policy=name, tau=float(tau), n_eval=n_mc,
        rmst=float(truncated.mean()),
        rmst_se=float(truncated.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0,
        cdr1=cdr1, cdr1_se=_prop_se(cdr1, n_mc),
        acdr=acdr, acdr_se=_prop_se(acdr, n_mc),
        expected_survival=float(t_star.mean()),
        expected_survival_se=float(t_star.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0,
    )


def observational_value(policy, dataset: Dataset, tau: float) -> dict:
    """Concordant-subgroup KM restricted mean on observed data (no oracle).

    Restricts to subjects whose observed treatments match the policy at
    every entered stage. Returns the RMST with a Greenwood standard error,
    the concordant fraction, and a small-sample warning below 10 subjects.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    concordant = np.ones(dataset.n, dtype=bool)
    for k in range(1, dataset.K + 1):
        ids = dataset.stage_entrant_ids(k)
        if ids.size == 0:
            continue
        rec = np.asarray(policy.stage_arms(k, dataset.history_matrix(k, ids)))
        obs = dataset.treatments[k - 1][ids]
        concordant[ids[rec != obs]] = False

    delta_final = np.zeros(dataset.n, dtype=np.int64)
    for k in range(dataset.K):
        ent = dataset.entries[k] == 1
        delta_final[ent] = dataset.events[k][ent]

    n_conc = int(concordant.sum())
    out = {
        "tau": float(tau),
        "n_concordant": n_conc,
        "concordant_fraction": n_conc / dataset.n,
        "warning": n_conc < 10,
        "rmst": None,
        "stderr": None,
    }
    if n_conc == 0:
        return out
    times = dataset.total_time[concordant]
    events = delta_final[concordant]
    out["rmst"] = rmst_km(times, events, tau)
    out["stderr"] = km_rmst_stderr(times, events, tau)
    return out


# ---- benchmark protocol ------------------------------------------------------

# Evaluation horizons for the standard benchmark presets, keyed by
# (arity, propensity mode, censoring kind).
TAU_PRESETS = {
    (2, "true", "exponential"): 52.0,
    (2, "true", "conditional"): 62.0,
    (2, "true", "uniform"): 13.0,
    (2, "misspecified", "exponential"): 52.0,
    (2, "misspecified", "conditional"): 62.0,
    (2, "misspecified", "uniform"): 13.0,
    (3, "true", "exponential"): 23.0,
    (3, "true", "conditional"): 26.0,
    (3, "true", "uniform"): 5.0,
    (3, "misspecified", "exponential"): 23.0,
    (3, "misspecified", "conditional"): 28.0,
    (3, "misspecified", "uniform"): 5.0,
}


@dataclass
class BenchmarkConfig:
    arities: list[int]
    propensity_modes: list[str]
    censoring_kinds: list[str]
    n_subjects: int = 5000
    folds: int = 5
    target_censor_rate: float = 0.62
    noise_rate: float = 4.0
    master_seed: int = 0
    tau: float | str = "auto"          # "auto" | "preset" | explicit number
    n_mc: int | None = None            # None -> held-out fold count
    fit: dict | None = None            # FitConfig overrides

    def validate(self) -> None:
        if not self.arities or not self.propensity_modes or not self.censoring_kinds:
            raise simgen.ConfigError("benchmark grid must be non-empty")
        for m in self.arities:
            if m not in (2, 3):
                raise simgen.ConfigError("arity must be 2 or 3")
        for mode in self.propensity_modes:
            if mode not in ("true", "misspecified"):
                raise simgen.ConfigError("propensity mode must be true/misspecified")
        for kind in self.censoring_kinds:
            if kind not in simgen.CENSOR_KINDS:
                raise simgen.ConfigError(f"bad censoring kind {kind!r}")
        if self.folds < 2:
            raise simgen.ConfigError("folds must be >= 2")
        if self.n_subjects < self.folds * 10:
            raise simgen.ConfigError("n_subjects too small for the fold protocol")
        if isinstance(self.tau, str) and self.tau not in ("auto", "preset"):
            raise simgen.ConfigError("tau must be 'auto', 'preset', or a number")

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise simgen.ConfigError(f"unknown benchmark fields: {sorted(unknown)}")
        for req in ("arities", "propensity_modes", "censoring_kinds"):
            if req not in doc:
                raise simgen.ConfigError(f"benchmark config requires {req!r}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def cells(self) -> list[dict]:
        return [
            {"arity": m, "propensity_mode": mode, "censoring_kind": kind}
            for m in self.arities
            for mode in self.propensity_modes
            for kind in self.censoring_kinds
        ]


def _cell_fit_config(config: BenchmarkConfig, cell: dict, fold: int) -> FitConfig:
    overrides = dict(config.fit or {})
    overrides["seed"] = stable_seed(config.master_seed, cell["arity"],
                                    cell["propensity_mode"],
                                    cell["censoring_kind"], "fit", fold)
    overrides["propensity_mode"] = cell["propensity_mode"]
    return FitConfig.from_dict(overrides)


def run_cell(config: BenchmarkConfig, cell: dict) -> dict:
    """Generate one scenario cell, run the 1-train/(folds-1)-eval protocol,
    and aggregate per-method metrics across folds."""
    cell_seed = stable_seed(config.master_seed, cell["arity"],
                            cell["propensity_mode"], cell["censoring_kind"])
    scenario = simgen.ScenarioConfig(
        n_subjects=config.n_subjects,
        arity=cell["arity"],
        propensity_mode=cell["propensity_mode"],
        censoring_kind=cell["censoring_kind"],
        target_censor_rate=(0.0 if cell["censoring_kind"] == "none"
                            else config.target_censor_rate),
        noise_rate=config.noise_rate,
        seed=cell_seed,
        tau="auto",
    )
    dataset, oracle = simgen.generate(scenario)
    if config.tau == "auto":
        tau = oracle.tau
    elif config.tau == "preset":
        key = (cell["arity"], cell["propensity_mode"], cell["censoring_kind"])
        tau = TAU_PRESETS.get(key, oracle.tau)
    else:
        tau = float(config.tau)

    rng = np.random.default_rng(stable_seed(cell_seed, "folds"))
    perm = rng.permutation(config.n_subjects)
    fold_ids = np.array_split(perm, config.folds)

    per_method: dict[str, list[EvalReport]] = {}
    audit_failures: list[str] = []
    errors: list[str] = []
    censor_rate = float(np.mean(oracle.latent_c
                                < oracle.latent_t1 + oracle.latent_t2))

    for f, train_ids in enumerate(fold_ids):
        train = dataset.subset(np.sort(train_ids))
        n_eval = config.n_mc or (config.n_subjects - train_ids.size)
        eval_seed = stable_seed(cell_seed, "eval", f)
        try:
            policy = fit(train, _cell_fit_config(config, cell, f))
            audit_failures.extend(policy.metadata["audit_failures"])
            policies = [("CA-TRL", policy)]
        except Exception as exc:
            errors.append(f"fold {f}: {type(exc).__name__}: {exc}")
            policies = []
        for c in range(cell["arity"]):
            policies.append((f"g={c}", FixedPolicy([c, c])))
        policies.append(("Random", RandomPolicy([cell["arity"]] * 2)))
        for name, pol in policies:
            report = counterfactual_eval(pol, oracle, n_eval, tau, seed=eval_seed)
            report.policy = name
            per_method.setdefault(name, []).append(report)

    methods = []
    for name, reports in per_method.items():
        entry = {"method": name, "n_folds": len(reports)}
        for metric in ("rmst", "cdr1", "acdr", "expected_survival"):
            vals = np.array([getattr(r, metric) for r in reports])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        methods.append(entry)

    return {
        "arity": cell["arity"],
        "propensity_mode": cell["propensity_mode"],
        "censoring_kind": cell["censoring_kind"],
        "tau": float(tau),
        "censor_rate": censor_rate,
        "n_subjects": config.n_subjects,
        "folds": config.folds,
        "methods": methods,
        "audit_failures": audit_failures,
        "errors": errors,
    }


def _cache_key(config: BenchmarkConfig, cell: dict) -> str:
    payload = {"config": config.to_dict(), "cell": cell, "version": __version__}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def benchmark(config: BenchmarkConfig, threads: int = 1,
              cache_dir=None) -> list[dict]:
    """Run every scenario cell; cache per-cell results keyed by content hash.

    Cells are independent (each derives its own seed from the master seed
    and cell identity), so any execution order and parallelization yields
    identical results.
    """
    config.validate()
    cells = config.cells()
    results: list[dict | None] = [None] * len(cells)
    pending: list[int] = []
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
    for i, cell in enumerate(cells):
        if cache_dir is not None:
            f = cache_dir / f"{_cache_key(config, cell)}.json"
            if f.exists():
                results[i] = json.loads(f.read_text())
                continue
        pending.append(i)

    if pending:
        if threads > 1 and len(pending) > 1:
            from joblib import Parallel, delayed
            fresh = Parallel(n_jobs=threads, backend="loky")(
                delayed(run_cell)(config, cells[i]) for i in pending)
        else:
            fresh = [run_cell(config, cells[i]) for i in pending]
        for i, res in zip(pending, fresh):
            results[i] = res
            if cache_dir is not None:
                f = cache_dir / f"{_cache_key(config, cells[i])}.json"
                f.write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
    return [r for r in results if r is not None]


METHOD_ORDER = ("g=0", "g=1", "g=2", "Random", "CA-TRL")


def _method_sort_key(name: str) -> tuple:
    try:
        return (METHOD_ORDER.index(name), name)
    except ValueError:
        return (len(METHOD_ORDER), name)


def render_benchmark_table(rows: list[dict]) -> str:
    """Text table in the benchmark layout; per-cell best RMST marked with *."""
    header = (f"{'Arms':>4} {'Propensity':>12} {'Censoring':>12} {'tau':>7} "
              f"{'Method':>8}  {'t-RMST':>15} {'CDR1 (%)':>15} {'ACDR (%)':>15} "
              f"{'E[T*]':>15}")
    lines = [header, "-" * len(header)]
    for row in rows:
        methods = sorted(row["methods"], key=lambda m: _method_sort_key(m["method"]))
        best = max(m["rmst_mean"] for m in methods)
        prop = "True" if row["propensity_mode"] == "true" else "False"
        for i, m in enumerate(methods):
            mark = "*" if m["rmst_mean"] == best else " "
            cell_cols = (f"{row['arity']:>4} {prop:>12} "
                         f"{row['censoring_kind']:>12} {row['tau']:>7.2f} "
                         if i == 0 else " " * 39)
            lines.append(
                cell_cols
                + f"{m['method']:>8}{mark} "
                + f"{m['rmst_mean']:>8.2f}±{m['rmst_sd']:<6.2f} "
                + f"{100 * m['cdr1_mean']:>8.2f}±{100 * m['cdr1_sd']:<6.2f} "
                + f"{100 * m['acdr_mean']:>8.2f}±{100 * m['acdr_sd']:<6.2f} "
                + f"{m['expected_survival_mean']:>8.2f}±{m['expected_survival_sd']:<6.2f}")
        lines.append("")
    return "\n".join(lines)
