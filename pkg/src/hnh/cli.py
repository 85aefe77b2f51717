"""Command line entry point: ``hnh {train,estimate,mc-reference,compare,diagnose}``.

Every subcommand reads a JSON run config (``--config``; defaults if omitted),
applies flag overrides and writes its outputs under ``--out`` atomically.
Exit codes: 0 ok, 2 configuration, 3 training, 4 solver, 5 estimation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_model, load_config, reference_value
from .core import CostLedger, EstimationError, HybridConfig, evaluate_true, mc_estimate, merge_ledgers, sample
from .core import FailureLabelVector
from .hierarchical import (
    DiagnosticsConfig,
    TrueModelError,
    estimate_failure_probability,
    misclassification_diagnostic,
    modify_labels,
    predicted_cost,
)
from .models.base import SolverError, worker_count
from .surrogate import (
    SurrogateHierarchy,
    TrainingDivergence,
    TrainingReport,
    atomic_write_bytes,
    build_hierarchy,
    level_seed,
    load_surrogate,
    make_training_set,
    save_surrogate,
)

log = logging.getLogger("hnh")

MANIFEST_VERSION = 1
CSV_SCHEMA_VERSION = 1
ERROR_CURVE_COLUMNS = ["iteration", "correction_solves", "total_true_solves", "p_hat",
                       "abs_error_vs_reference", "layer_units"]
COMPARE_COLUMNS = ["M", "m", "xi", "hnh_counted", "hnh_predicted", "nh_counted", "nh_predicted",
                   "ratio_online", "train_units_hnh", "train_units_nh", "ratio_with_training",
                   "wall_hnh_s", "wall_nh_s"]
DIAGNOSTIC_COLUMNS = ["level", "eta", "empirical", "bound"]

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_SOLVER, EXIT_ESTIMATION = 0, 2, 3, 4, 5


# --- small IO helpers -----------------------------------------------------

def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    atomic_write_bytes(path, buf.getvalue().encode())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def level_file(hdir: Path, ell: int) -> Path:
    return hdir / f"level_{ell}.hnhw"


# --- overrides ------------------------------------------------------------

def _parse_levels(text: str) -> list:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"--levels expects comma separated integers, got {text!r}") from None


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command line flags into the config; ``--seed``/``--samples`` target the subcommand's stage."""
    cmd = args.command
    if args.out is not None:
        cfg.out = str(args.out)
    if args.levels is not None:
        cfg.hierarchy.depths = _parse_levels(args.levels)
    if args.seed is not None:
        stage = {"train": cfg.hierarchy.train, "estimate": cfg.estimation, "mc-reference": cfg.mc_reference,
                 "compare": cfg.compare, "diagnose": cfg.diagnose}[cmd]
        stage.seed = int(args.seed)
    if args.samples is not None:
        if cmd == "train":
            cfg.hierarchy.train_size = int(args.samples)
        elif cmd == "estimate":
            cfg.estimation.samples = int(args.samples)
        elif cmd == "mc-reference":
            cfg.mc_reference.samples = int(args.samples)
        elif cmd == "compare":
            cfg.compare.samples = [int(args.samples)]
        else:
            cfg.diagnose.samples = int(args.samples)
    if getattr(args, "delta_m", None) is not None:
        cfg.estimation.delta_m = int(args.delta_m)
    if getattr(args, "eps_opt", None) is not None:
        cfg.estimation.eps_opt = float(args.eps_opt)
    if getattr(args, "eta", None) is not None:
        cfg.estimation.eta = float(args.eta)
    if getattr(args, "reference", None) is not None:
        ref = args.reference
        try:
            ref = float(ref)
        except ValueError:
            pass
        cfg.estimation.reference = ref
    # a --samples override below delta_m would otherwise be rejected for the wrong reason
    if cmd == "estimate" and cfg.estimation.delta_m > cfg.estimation.samples and args.delta_m is None:
        cfg.estimation.delta_m = cfg.estimation.samples
    return cfg.validate()


def hybrid_config(cfg: RunConfig) -> HybridConfig:
    e = cfg.estimation
    return HybridConfig(delta_M=e.delta_m, eps_opt=e.eps_opt, eta=e.eta, signed_eps=e.signed_eps)


# --- hierarchy persistence ------------------------------------------------

def train_hierarchy(cfg: RunConfig, model):
    """Generate true-model training data and fit one network per depth."""
    h = cfg.hierarchy
    t0 = time.perf_counter()
    batch = sample(model.distribution, h.train_size, h.data_seed)
    targets = evaluate_true(model, batch.values)
    t_data = time.perf_counter() - t0
    if not np.all(np.isfinite(targets)):
        raise SolverError("true model returned non-finite training targets")
    data = make_training_set(batch.values, targets, h.val_fraction, seed=h.data_seed)
    t0 = time.perf_counter()
    hier = build_hierarchy(data, h.depths, h.width, h.train, h.activation)
    t_fit = time.perf_counter() - t0
    ledger = hier.training_ledger()
    ledger.add_true(h.train_size)
    return hier, ledger, {"training_data": t_data, "fit": t_fit}


def save_hierarchy(hdir: Path, cfg: RunConfig, hier: SurrogateHierarchy, ledger: CostLedger, timings) -> dict:
    dh = hier.training_set.dataset_hash()
    files = {}
    for ell, net in enumerate(hier.levels, start=1):
        path = level_file(hdir, ell)
        save_surrogate(path, net, level_seed(cfg.hierarchy.train.seed, ell), dh)
        files[path.name] = file_sha256(path)
    report = {
        "depths": list(hier.depths),
        "width": hier.width,
        "input_dim": hier.input_dim,
        "dataset_hash": dh,
        "train_size": cfg.hierarchy.train_size,
        "data_seed": cfg.hierarchy.data_seed,
        "training_seed": cfg.hierarchy.train.seed,
        "level_seeds": [level_seed(cfg.hierarchy.train.seed, ell) for ell in range(1, hier.L + 1)],
        "files": files,
        "ledger": ledger.to_dict(),
        "timings": timings,
        "reports": [r.to_dict() for r in hier.reports],
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
    }
    # the report goes last so a complete report implies complete weight files
    write_json(hdir / "training_report.json", report)
    return report


def load_hierarchy(hdir: Path):
    """Load weights listed in ``training_report.json``; returns ``(hierarchy, report)``."""
    rpath = hdir / "training_report.json"
    if not rpath.exists():
        raise EstimationError(f"no trained hierarchy at {hdir} (missing {rpath.name}); run 'hnh train' first")
    report = json.loads(rpath.read_text())
    nets = []
    for ell in range(1, len(report["depths"]) + 1):
        path = level_file(hdir, ell)
        if not path.exists():
            raise EstimationError(f"missing weights file {path}")
        if file_sha256(path) != report["files"][path.name]:
            raise EstimationError(f"weights file {path} does not match its training report hash")
        net, header = load_surrogate(path)
        if header["dataset_hash"] != report["dataset_hash"]:
            raise EstimationError(f"weights file {path} was trained on a different dataset")
        nets.append(net)
    reports = [TrainingReport(**r) for r in report["reports"]]
    return SurrogateHierarchy(nets, None, reports), report


def _hierarchy_dir(cfg: RunConfig, args) -> Path:
    return Path(args.hierarchy) if getattr(args, "hierarchy", None) else Path(cfg.out) / "hierarchy"


def _check_depths(cfg: RunConfig, hier: SurrogateHierarchy, args) -> None:
    """Without ``--levels`` the trained depths are adopted; with it they must agree."""
    if args.levels is None:
        cfg.hierarchy.depths = list(hier.depths)
    if list(hier.depths) != list(cfg.hierarchy.depths):
        raise EstimationError(f"trained hierarchy has depths {list(hier.depths)}, "
                              f"config asks for {list(cfg.hierarchy.depths)}")


# --- subcommands ----------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    model = build_model(cfg.model)
    hier, ledger, timings = train_hierarchy(cfg, model)
    hdir = _hierarchy_dir(cfg, args)
    report = save_hierarchy(hdir, cfg, hier, ledger, timings)
    for ell, r in enumerate(hier.reports, start=1):
        print(f"level {ell} depth {hier.depths[ell - 1]}: val mse {r.initial_val_mse:.4g} -> "
              f"{r.final_val_mse:.4g} ({r.epochs_run} epochs)")
    print(f"wrote {hdir} (dataset {report['dataset_hash'][:12]}, {ledger.true_solves} true solves)")
    return EXIT_OK


def _resolve_reference(cfg: RunConfig, model, out: Path):
    val = reference_value(cfg.estimation, model, out)
    if val is not None:
        return val, str(cfg.estimation.reference)
    ref_file = out / "reference.json"
    if ref_file.exists():
        return float(json.loads(ref_file.read_text())["estimate"]["p_hat"]), str(ref_file)
    return None, None


def cmd_estimate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    model = build_model(cfg.model)
    hdir = _hierarchy_dir(cfg, args)
    hier, treport = load_hierarchy(hdir)
    _check_depths(cfg, hier, args)
    ref, ref_source = _resolve_reference(cfg, model, out)
    e = cfg.estimation
    t0 = time.perf_counter()
    try:
        res = estimate_failure_probability(model, hier, e.samples, hybrid_config(cfg), e.seed)
    except ValueError as exc:
        raise EstimationError(str(exc)) from None
    wall = time.perf_counter() - t0

    train_ledger = CostLedger.from_dict(treport["ledger"])
    total = merge_ledgers(train_ledger, res.ledger)
    units = res.ledger.layer_units
    rows = []
    for k, p in enumerate(res.trace.p_sequence):
        corr = res.trace.true_solves[k]
        err = abs(p - ref) if ref is not None else None
        rows.append([k, corr, corr + train_ledger.true_solves, float(p), err, units])

    hashes = {"config": cfg.content_hash(), "dataset": treport["dataset_hash"], **treport["files"]}
    input_hash = hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "error_curve_columns": ERROR_CURVE_COLUMNS,
        "config": cfg.to_dict(),
        "input_hash": input_hash,
        "input_hashes": hashes,
        "seeds": {"estimation": e.seed, "training": treport["training_seed"],
                  "data": treport["data_seed"], "levels": treport["level_seeds"]},
        "hierarchy_dir": str(hdir),
        "reference": {"value": ref, "source": ref_source},
        "result": res.manifest(),
        "ledgers": {"training": train_ledger.to_dict(), "estimation": res.ledger.to_dict(),
                    "total": total.to_dict()},
        "wall_clock_s": {"training": treport["timings"], "estimation": wall, **res.timings},
        "workers": worker_count(),
    }
    write_csv(out / "error_curve.csv", ERROR_CURVE_COLUMNS, rows)
    write_json(out / "manifest.json", manifest)
    est = res.estimate
    print(f"p_hat = {est.p_hat:.6g} ({est.failures}/{est.samples}, se {est.std_err:.3g}); "
          f"{res.trace.stop_reason} after {res.trace.iterations} iterations, "
          f"{res.trace.true_solves_used} correction solves")
    if ref is not None:
        print(f"reference {ref:.6g}, abs error {abs(est.p_hat - ref):.3g}")
    return EXIT_OK


def cmd_mc_reference(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    model = build_model(cfg.model)
    mc = cfg.mc_reference
    t0 = time.perf_counter()
    batch = sample(model.distribution, mc.samples, mc.seed)
    g = evaluate_true(model, batch.values)
    est = mc_estimate(FailureLabelVector.from_values(g, 0))
    wall = time.perf_counter() - t0
    report = {
        "estimate": est.to_dict(),
        "seed": mc.seed,
        "samples": mc.samples,
        "true_solves": mc.samples,
        "wall_clock_s": wall,
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
    }
    if hasattr(model, "exact_failure_probability"):
        report["exact"] = model.exact_failure_probability()
    write_json(out / "reference.json", report)
    print(f"MC p_hat = {est.p_hat:.6g} ({est.failures}/{est.samples}, se {est.std_err:.3g})")
    return EXIT_OK


def compare_costs(hier: SurrogateHierarchy, treport: dict, model, Ms, seed: int, hcfg: HybridConfig):
    """Counted vs predicted layer units of the surrogate phase, HNH against the finest net alone."""
    L, depths, N = hier.L, hier.depths, hier.width
    n2 = N * N
    train_hnh = CostLedger.from_dict(treport["ledger"]).layer_units
    train_nh = hier.reports[-1].sample_gradients * depths[-1] * n2
    rows = []
    for M in Ms:
        eta = dataclasses.replace(hcfg, delta_M=1).resolved(M, L).eta
        batch = sample(model.distribution, M, seed)
        led = hier.new_ledger()
        t0 = time.perf_counter()
        _, state = modify_labels(hier, batch, eta, led, hcfg.signed_eps)
        wall_hnh = time.perf_counter() - t0
        nh = hier.new_ledger()
        t0 = time.perf_counter()
        hier.predict(L, batch.values)
        nh.add_surrogate(L, M)
        wall_nh = time.perf_counter() - t0
        m = state.corrections_applied
        hnh_pred, nh_pred = predicted_cost(M, L, depths, N, m)
        if led.layer_units != hnh_pred or nh.layer_units != nh_pred:
            raise EstimationError(f"cost accounting mismatch at M={M}: counted "
                                  f"{led.layer_units}/{nh.layer_units}, predicted {hnh_pred}/{nh_pred}")
        rows.append([M, m, state.xi, led.layer_units, hnh_pred, nh.layer_units, nh_pred,
                     led.layer_units / nh.layer_units, train_hnh, train_nh,
                     (led.layer_units + train_hnh) / (nh.layer_units + train_nh), wall_hnh, wall_nh])
    return rows


def cmd_compare(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    model = build_model(cfg.model)
    hier, treport = load_hierarchy(_hierarchy_dir(cfg, args))
    _check_depths(cfg, hier, args)
    hcfg = hybrid_config(cfg)
    rows = compare_costs(hier, treport, model, cfg.compare.samples, cfg.compare.seed, hcfg)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    write_json(out / "compare.json", {"csv_schema_version": CSV_SCHEMA_VERSION, "columns": COMPARE_COLUMNS,
                                      "rows": rows, "config": cfg.to_dict()})
    for r in rows:
        print(f"M={r[0]}: HNH {r[3]} units (predicted {r[4]}), NH {r[5]}; "
              f"ratio {r[7]:.3f} online, {r[10]:.3f} with training")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    model = build_model(cfg.model)
    hier, _ = load_hierarchy(_hierarchy_dir(cfg, args))
    _check_depths(cfg, hier, args)
    d = cfg.diagnose
    dcfg = DiagnosticsConfig(d.C, d.a, d.rho, d.epsilon, d.n_eta)
    batch = sample(model.distribution, d.samples, d.seed)
    oracle = FailureLabelVector.from_values(evaluate_true(model, batch.values), 0)
    diag = misclassification_diagnostic(hier, batch, oracle, dcfg)
    write_csv(out / "diagnostic.csv", DIAGNOSTIC_COLUMNS, list(diag.rows()))
    write_json(out / "diagnostic.json", {
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "eta_max": diag.eta_max,
        "eta_t": diag.eta_t,
        "level_thresholds": diag.level_thresholds,
        "bound_at_eta_t": [float(dcfg.bound(diag.eta_t, diag.eta_max, ell)) for ell in range(1, hier.L + 1)],
        "true_solves": d.samples,
        "config": cfg.to_dict(),
    })
    print(f"eta_max = {diag.eta_max:.4g}, eta_t = {diag.eta_t:.4g}; wrote {out / 'diagnostic.csv'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "estimate": cmd_estimate,
    "mc-reference": cmd_mc_reference,
    "compare": cmd_compare,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config or a previous run's manifest.json")
    common.add_argument("--seed", type=int, help="seed of this subcommand's stage")
    common.add_argument("--out", help="output directory")
    common.add_argument("--levels", help="comma separated hidden-layer depths, ascending")
    common.add_argument("--samples", type=int, help="sample count of this subcommand's stage")
    common.add_argument("--hierarchy", help="trained hierarchy directory (default OUT/hierarchy)")
    common.add_argument("-v", "--verbose", action="store_true")
    est = argparse.ArgumentParser(add_help=False)
    est.add_argument("--delta-m", type=int, dest="delta_m", help="true solves per correction iteration")
    est.add_argument("--eps-opt", type=float, dest="eps_opt", help="correction stopping tolerance")
    est.add_argument("--eta", type=float, help="per-part modification threshold")
    est.add_argument("--reference", help="reference probability: a number, 'exact' or a reference.json")

    p = argparse.ArgumentParser(prog="hnh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the surrogate hierarchy")
    sub.add_parser("estimate", parents=[common, est], help="HNH failure probability estimate")
    sub.add_parser("mc-reference", parents=[common], help="plain Monte Carlo with the true model")
    sub.add_parser("compare", parents=[common, est], help="HNH vs single-network surrogate cost")
    sub.add_parser("diagnose", parents=[common], help="misclassification rates against the bound")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDivergence):
        return EXIT_TRAINING
    if isinstance(exc, SolverError) or (isinstance(exc, TrueModelError) and isinstance(exc.__cause__, SolverError)):
        return EXIT_SOLVER
    return EXIT_ESTIMATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, TrainingDivergence, SolverError, EstimationError) as exc:
        print(f"hnh {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except ValueError as exc:
        # invalid numeric settings that slipped past config validation
        print(f"hnh {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
