"""Command-line entry point: generate, fit, evaluate, gridsearch, benchmark.

Everything that affects results lives in JSON config files; flags cover only
I/O paths, verbosity and worker count. Outputs are written atomically and
embed a header block (config hash, seed, library version), and re-running a
command with the same inputs produces byte-identical files.

Exit codes: 0 ok, 2 config/input error, 3 calibration failure, 4 fit failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, core, dtr, evaluation, simgen
from .nuisance.propensity import PositivityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_FIT = 4


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, payload: dict, meta: dict) -> None:
    doc = {"meta": meta}
    doc.update(payload)
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise simgen.ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise simgen.ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _meta(config_doc: dict, seed) -> dict:
    return {"config_hash": _config_hash(config_doc), "seed": seed,
            "library_version": __version__}


def sniff_schema(path: str, arity_override=None) -> core.SchemaSpec:
    """Recover the schema from the rigid wide-CSV header.

    Treatment arity is taken as max observed index + 1 (at least 2) unless
    overridden; generated datasets observe every arm, so this is exact for
    them.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise core.SchemaError(f"{path}: empty file")
    header = rows[0]
    stages: list[list[str]] = []
    k = 1
    pos = 0
    while pos < len(header) and header[pos] != "T":
        prefix = f"X{k}_"
        names = []
        while pos < len(header) and header[pos].startswith(prefix):
            names.append(header[pos][len(prefix):])
            pos += 1
        expect = [f"A{k}", f"R{k}", f"delta{k}", f"eta{k}"]
        if not names or header[pos:pos + 4] != expect:
            raise core.SchemaError(f"{path}: header does not follow the "
                                   f"stage-block layout at stage {k}")
        stages.append(names)
        pos += 4
        k += 1
    if pos >= len(header) or header[pos] != "T":
        raise core.SchemaError(f"{path}: missing final T column")

    n_stages = len(stages)
    if arity_override is not None:
        arities = list(arity_override)
        if len(arities) != n_stages:
            raise core.SchemaError("arity override must list one arity per stage")
    else:
        arities = []
        for kk in range(1, n_stages + 1):
            col = header.index(f"A{kk}")
            vals = [int(float(r[col])) for r in rows[1:] if r[col] != ""]
            arities.append(max(2, (max(vals) + 1) if vals else 2))
    return core.SchemaSpec(
        schemas=tuple(core.CovariateSchema(tuple(s)) for s in stages),
        arities=tuple(arities))


def _load_dataset(path: str, schema_doc=None, arity=None) -> core.Dataset:
    if schema_doc is not None:
        spec = core.SchemaSpec.from_dict(schema_doc)
    else:
        spec = sniff_schema(path, arity_override=arity)
    return core.load_csv(path, spec)


# ---- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    doc = _load_json(args.config)
    config = simgen.ScenarioConfig.from_dict(doc)
    dataset, oracle = simgen.generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(doc, config.seed)

    csv_path = out / f"{args.prefix}.csv"
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    core.save_csv(dataset, tmp, meta_lines=[
        f"config_hash={meta['config_hash']} seed={config.seed} "
        f"version={__version__}"])
    os.replace(tmp, csv_path)

    manifest = oracle.to_manifest()
    _write_json(out / f"{args.prefix}.oracle.json", manifest, meta)

    censored = float(np.mean(oracle.latent_c < oracle.latent_t1 + oracle.latent_t2))
    entered = float(np.mean(dataset.entries[1] == 1)) if dataset.K > 1 else 1.0
    print(f"generated n={dataset.n} arity={config.arity} "
          f"kind={config.censoring_kind} censor_rate={censored:.3f} "
          f"stage2_entry={entered:.3f} tau={oracle.tau:.4g}")
    print(f"wrote {csv_path} and {out / (args.prefix + '.oracle.json')}")
    return EXIT_OK


def cmd_fit(args) -> int:
    doc = _load_json(args.config)
    schema_doc = doc.pop("schema", None)
    arity = doc.pop("arity", None)
    try:
        config = dtr.FitConfig.from_dict(doc)
    except (TypeError, dtr.FitError) as exc:
        raise simgen.ConfigError(f"bad fit config: {exc}") from exc
    dataset = _load_dataset(args.dataset, schema_doc, arity)
    policy = dtr.fit(dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(doc, config.seed)
    _write_json(out / "policy.json", policy.to_doc(), meta)
    fitlog = {
        "stages": policy.metadata["stages"],
        "tau": policy.metadata["tau"],
        "audit_failures": policy.metadata["audit_failures"],
        "rules": [
            {"stage": k + 1,
             "listing": evaluation_render_rules(policy, k)}
            for k in range(policy.n_stages)
        ],
    }
    _write_json(out / "fitlog.json", fitlog, meta)
    n_fail = len(policy.metadata["audit_failures"])
    print(f"fitted {policy.n_stages}-stage policy on n={dataset.n} "
          f"(tau={policy.metadata['tau']:.4g}, audit failures={n_fail})")
    print(f"wrote {out / 'policy.json'}")
    return EXIT_OK


def evaluation_render_rules(policy: dtr.DTRPolicy, k: int) -> str:
    from .policy_tree import render_rules
    return render_rules(policy.trees[k], policy.feature_names[k])


def cmd_evaluate(args) -> int:
    if args.oracle is None and args.dataset is None:
        raise simgen.ConfigError("evaluate needs --oracle and/or --dataset")
    policy = dtr.load(args.policy)
    oracle = simgen.OracleHandle.load(args.oracle) if args.oracle else None

    if args.tau is not None:
        if args.tau <= 0:
            raise simgen.ConfigError("tau must be > 0")
        tau = float(args.tau)
    elif oracle is not None:
        tau = oracle.tau
    else:
        raise simgen.ConfigError("--tau is required without an oracle manifest")

    policies: list = [("CA-TRL", policy)]
    if args.with_baselines:
        arities = policy.arities
        for c in range(max(arities)):
            arms = [min(c, m - 1) for m in arities]
            policies.append((f"g={c}", evaluation.FixedPolicy(arms, arities)))
        policies.append(("Random", evaluation.RandomPolicy(arities)))

    reports: list[dict] = []
    if oracle is not None:
        for name, pol in policies:
            rep = evaluation.counterfactual_eval(
                pol, oracle, args.n_mc, tau, seed=args.seed)
            rep.policy = name
            entry = rep.to_dict()
            entry["kind"] = "counterfactual"
            reports.append(entry)
    if args.dataset is not None:
        schema_doc = None
        dataset = _load_dataset(args.dataset, schema_doc,
                                arity=policy.arities)
        for name, pol in policies:
            if isinstance(pol, evaluation.RandomPolicy):
                continue   # no deterministic observed-concordance for random
            obs = evaluation.observational_value(pol, dataset, tau)
            obs.update(policy=name, kind="observational")
            reports.append(obs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta({"policy": str(args.policy), "tau": tau,
                  "n_mc": args.n_mc, "seed": args.seed,
                  "with_baselines": bool(args.with_baselines)}, args.seed)
    _write_json(out / "report.json", {"tau": tau, "reports": reports}, meta)

    lines = [f"# config_hash={meta['config_hash']} seed={args.seed} "
             f"version={__version__}"]
    keys = ["policy", "kind", "tau", "rmst", "rmst_se", "cdr1", "cdr1_se",
            "acdr", "acdr_se", "expected_survival", "expected_survival_se",
            "n_eval", "n_concordant", "concordant_fraction", "stderr", "warning"]
    lines.append(",".join(keys))
    for rep in reports:
        lines.append(",".join("" if rep.get(k) is None else repr(rep[k])
                              if isinstance(rep.get(k), float) else str(rep[k])
                              for k in keys))
    _atomic_write(out / "report.csv", "\n".join(lines) + "\n")

    for rep in reports:
        if rep["kind"] == "counterfactual":
            print(f"{rep['policy']:>10} counterfactual: "
                  f"rmst={rep['rmst']:.3f} cdr1={rep['cdr1']:.3f} "
                  f"acdr={rep['acdr']:.3f} E[T*]={rep['expected_survival']:.3f}")
        else:
            val = "n/a" if rep["rmst"] is None else f"{rep['rmst']:.3f}"
            warn = " (small-sample)" if rep.get("warning") else ""
            print(f"{rep['policy']:>10} observational: rmst={val} "
                  f"concordant={rep['n_concordant']}{warn}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    doc = _load_json(args.config)
    try:
        grid_docs = doc["grid"]
        if not isinstance(grid_docs, list) or not grid_docs:
            raise simgen.ConfigError("gridsearch config needs a non-empty 'grid'")
        grid = [dtr.FitConfig.from_dict(g) for g in grid_docs]
    except (KeyError, TypeError, dtr.FitError) as exc:
        raise simgen.ConfigError(f"bad gridsearch config: {exc}") from exc
    dataset = _load_dataset(args.dataset, doc.get("schema"), doc.get("arity"))
    best, report = dtr.grid_search(
        dataset, grid,
        validation_fraction=doc.get("validation_fraction", 0.5),
        seed=doc.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(doc, doc.get("seed", 0))
    _write_json(out / "gridsearch.json",
                {"best_index": report["best_index"],
                 "best_config": best.to_dict(), "rows": report["rows"]}, meta)
    print(f"best config index {report['best_index']} "
          f"(validation rmst={report['rows'][report['best_index']]['score']:.4g})")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    doc = _load_json(args.config)
    config = evaluation.BenchmarkConfig.from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluation.benchmark(config, threads=args.threads,
                                cache_dir=out / "cache")
    meta = _meta(doc, config.master_seed)
    _write_json(out / "benchmark.json", {"rows": rows}, meta)

    lines = [f"# config_hash={meta['config_hash']} seed={config.master_seed} "
             f"version={__version__}"]
    cols = ["arity", "propensity_mode", "censoring_kind", "tau", "censor_rate",
            "method", "rmst_mean", "rmst_sd", "cdr1_mean", "cdr1_sd",
            "acdr_mean", "acdr_sd", "expected_survival_mean",
            "expected_survival_sd", "n_folds"]
    lines.append(",".join(cols))
    for row in rows:
        for m in sorted(row["methods"],
                        key=lambda mm: evaluation._method_sort_key(mm["method"])):
            rec = {**row, **m}
            lines.append(",".join(repr(rec[c]) if isinstance(rec[c], float)
                                  else str(rec[c]) for c in cols))
    _atomic_write(out / "benchmark.csv", "\n".join(lines) + "\n")
    _atomic_write(out / "benchmark.txt",
                  evaluation.render_benchmark_table(rows) + "\n")

    failures = [e for row in rows for e in row["errors"]]
    print(evaluation.render_benchmark_table(rows))
    if failures:
        print(f"completed with {len(failures)} per-cell failures "
              f"(recorded in benchmark.json)")
    all_failed = all(not row["methods"] for row in rows)
    return EXIT_CONFIG if all_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catrl",
        description="Censoring-aware tree-based treatment regime toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a semi-synthetic dataset")
    p.add_argument("--config", required=True, help="scenario config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prefix", default="dataset", help="output file prefix")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a policy by backward induction")
    p.add_argument("--dataset", required=True, help="wide-format CSV")
    p.add_argument("--config", required=True, help="fit config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="evaluate a fitted policy")
    p.add_argument("--policy", required=True, help="policy bundle JSON")
    p.add_argument("--dataset", help="observed CSV for observational metrics")
    p.add_argument("--oracle", help="oracle manifest for counterfactual metrics")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--n-mc", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-baselines", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="hyperparameter grid search")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True, help="grid config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("benchmark", help="full scenario-grid benchmark")
    p.add_argument("--config", required=True, help="benchmark config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("CATRL_THREADS", "1")))
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (simgen.ConfigError, core.SchemaError, core.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except simgen.CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (dtr.FitError, PositivityError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
