"""Experiment runner.

A single JSON document fully determines an experiment: the simulation
parameters plus a list of rate modes and seeds.  Every (mode, seed) cell is
an independent job writing its own metrics CSV, so a worker pool of any size
produces byte-identical outputs.  The config hash is embedded in every
output filename.

CLI:
    driftfl run --config cfg.json [--workers N] [--out DIR]
    driftfl validate --config cfg.json
    driftfl report --in DIR
"""

import argparse
import csv
import hashlib
import json
import multiprocessing
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from driftfl import federation as fed
from driftfl import shift
from driftfl.errors import ConfigError
from driftfl.estimation import RateBounds

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CSV_HEADER = ["t", "client_id", "mode", "seed", "accuracy", "loss",
              "s_unc", "s_rep", "s", "eta", "bbse_l1"]

_INT_KEYS = {"num_clients", "T", "local_epochs", "comm_interval",
             "batch_size", "anchor_size", "hidden_dim", "pretrain_samples",
             "pretrain_epochs", "confusion_samples", "checkpoint_interval",
             "anchor_minibatch"}
_FLOAT_KEYS = {"participant_rate", "bbse_ridge", "pretrain_eta"}
_BOOL_KEYS = {"eval_participants_only"}
_RUN_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | {"drift_measure"}
_TOP_KEYS = _RUN_KEYS | {"bounds", "scenario", "modes", "seeds",
                         "output_dir", "emit_oracle_diagnostics"}


@dataclass
class Mode:
    kind: str                 # "adaptive" | "fixed"
    eta: float | None = None

    @property
    def label(self) -> str:
        return "adaptive" if self.kind == "adaptive" else f"fixed_{self.eta:g}"


@dataclass
class ExperimentConfig:
    base: fed.RunConfig
    modes: list
    seeds: list
    output_dir: str = "out"
    emit_oracle_diagnostics: bool = False
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:10]

    def cell_config(self, mode: Mode, seed: int) -> fed.RunConfig:
        return replace(
            self.base, seed=seed,
            rate_mode=fed.ADAPTIVE if mode.kind == "adaptive" else fed.FIXED,
            fixed_eta=mode.eta,
            emit_oracle_diagnostics=self.emit_oracle_diagnostics)


def _parse_mode(raw, problems) -> Mode | None:
    if raw == "adaptive":
        return Mode("adaptive")
    if isinstance(raw, str) and raw.startswith("fixed:"):
        try:
            return Mode("fixed", float(raw.split(":", 1)[1]))
        except ValueError:
            problems.append(f"unparseable fixed mode {raw!r}")
            return None
    if isinstance(raw, dict) and set(raw) == {"fixed"}:
        try:
            return Mode("fixed", float(raw["fixed"]))
        except (TypeError, ValueError):
            problems.append(f"unparseable fixed mode {raw!r}")
            return None
    problems.append(f"unknown mode {raw!r}")
    return None


def validate_config(raw_text: str) -> ExperimentConfig:
    """Parse, default, and validate a JSON experiment config.

    Malformed JSON raises json.JSONDecodeError (with line/column); semantic
    violations raise ConfigError listing every problem at once.
    """
    doc = json.loads(raw_text)
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    problems = []
    for key in doc:
        if key not in _TOP_KEYS:
            problems.append(f"unknown config key {key!r}")

    bounds = RateBounds(5e-6, 1e-4)
    if "bounds" in doc:
        try:
            bounds = RateBounds(float(doc["bounds"]["eta_min"]),
                                float(doc["bounds"]["eta_max"]))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"invalid RateBounds: {exc}")

    scenario = shift.ScenarioSpec()
    if "scenario" in doc:
        try:
            scenario = shift.ScenarioSpec.from_dict(doc["scenario"])
        except (TypeError, ValueError) as exc:
            problems.append(f"invalid scenario: {exc}")

    run_kwargs = {k: doc[k] for k in _RUN_KEYS if k in doc}
    try:
        for key in run_kwargs:
            if key in _INT_KEYS:
                run_kwargs[key] = int(run_kwargs[key])
            elif key in _FLOAT_KEYS:
                run_kwargs[key] = float(run_kwargs[key])
            elif key in _BOOL_KEYS:
                run_kwargs[key] = bool(run_kwargs[key])
        if "T" not in run_kwargs:
            run_kwargs["T"] = scenario.T
        elif "scenario" not in doc:
            scenario = replace(scenario, T=run_kwargs["T"])
        base = fed.RunConfig(bounds=bounds, scenario=scenario, **run_kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"invalid run settings: {exc}")
        base = fed.RunConfig(bounds=bounds, scenario=scenario)

    modes = []
    for raw_mode in doc.get("modes", ["adaptive"]):
        mode = _parse_mode(raw_mode, problems)
        if mode is not None:
            modes.append(mode)
    if not modes:
        problems.append("modes must contain at least one rate mode")

    seeds = doc.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        problems.append("seeds must be a nonempty list of integers")
        seeds = []

    for mode in modes:
        try:
            base_mode = replace(
                base,
                rate_mode=fed.ADAPTIVE if mode.kind == "adaptive" else fed.FIXED,
                fixed_eta=mode.eta)
            base_mode.validate()
        except (TypeError, ValueError) as exc:
            problems.append(f"mode {mode.label}: {exc}")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        base=base, modes=modes, seeds=list(seeds),
        output_dir=str(doc.get("output_dir", "out")),
        emit_oracle_diagnostics=bool(doc.get("emit_oracle_diagnostics", False)),
        raw=doc)


def _fmt(x) -> str:
    return "%.9g" % x


def write_metrics_csv(result: fed.RunResult, mode_label: str, seed: int,
                      path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in result.records:
            for cid in sorted(rec.client_metrics):
                m = rec.client_metrics[cid]
                writer.writerow([
                    rec.t, cid, mode_label, seed,
                    _fmt(m["accuracy"]), _fmt(m["loss"]), _fmt(m["s_unc"]),
                    _fmt(m["s_rep"]), _fmt(m["s"]), _fmt(m["eta"]),
                    _fmt(m["bbse_l1"]),
                ])


def write_signals_csv(result: fed.RunResult, path: Path):
    """Oracle-diagnostics log: vector fields are JSON-encoded in their cells."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "client_id", "s_unc", "s_rep", "s", "eta",
                         "l1_to_true_prior", "bbse_prior", "q"])
        for rec in result.records:
            if not rec.diagnostics:
                continue
            for cid in sorted(rec.diagnostics):
                d = rec.diagnostics[cid]
                m = rec.client_metrics[cid]
                writer.writerow([
                    rec.t, cid, _fmt(m["s_unc"]), _fmt(m["s_rep"]),
                    _fmt(m["s"]), _fmt(m["eta"]), _fmt(m["bbse_l1"]),
                    json.dumps([float(_fmt(v)) for v in d["bbse_prior"]]),
                    json.dumps([float(_fmt(v)) for v in d["q"]]),
                ])


def _run_summary(result: fed.RunResult) -> dict:
    accs = [r.mean_accuracy for r in result.records]
    return {
        "mean_accuracy": float(np.mean(accs)),
        "final_accuracy": float(accs[-1]),
        "mean_eta": float(np.mean([r.mean_eta for r in result.records])),
        "cum_S": float(np.sum([r.mean_s for r in result.records])),
    }


def _run_cell(payload):
    config, mode, seed = payload
    cell = config.cell_config(mode, seed)
    result = fed.run(cell)
    outdir = Path(config.output_dir)
    tag = f"{config.config_hash()}_{mode.label}_{seed}"
    write_metrics_csv(result, mode.label, seed, outdir / f"metrics_{tag}.csv")
    if config.emit_oracle_diagnostics:
        write_signals_csv(result, outdir / f"signals_{tag}.csv")
    for t, shared_W, shared_b in result.checkpoints:
        snap = {"t": t, "shared_W": shared_W.tolist(),
                "shared_b": shared_b.tolist(),
                "dims": {"hidden_dim": shared_W.shape[0],
                         "input_dim": shared_W.shape[1]}}
        with open(outdir / f"checkpoint_{tag}_t{t:05d}.json", "w",
                  encoding="utf-8") as fh:
            json.dump(snap, fh)
    return mode.label, seed, _run_summary(result)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> int:
    """Execute every (mode, seed) cell and write summaries; returns exit status."""
    outdir = Path(config.output_dir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / f".writable_{config.config_hash()}"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"output directory not writable: {exc}", file=sys.stderr)
        return EXIT_IO

    cells = [(config, mode, seed) for mode in config.modes
             for seed in config.seeds]
    try:
        if workers > 1:
            with multiprocessing.Pool(workers) as pool:
                outcomes = pool.map(_run_cell, cells)
        else:
            outcomes = [_run_cell(cell) for cell in cells]
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    by_mode = {}
    for label, seed, summary in outcomes:
        by_mode.setdefault(label, []).append((seed, summary))

    scenario_name = f"{config.base.scenario.scenario}/{config.base.scenario.schedule}"
    comparison_rows = []
    for mode in config.modes:
        entries = sorted(by_mode[mode.label])
        accs = [s["mean_accuracy"] for _, s in entries]
        agg = {
            "mode": mode.label,
            "scenario": scenario_name,
            "seeds": [seed for seed, _ in entries],
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
            "final_accuracy": float(np.mean([s["final_accuracy"] for _, s in entries])),
            "mean_eta": float(np.mean([s["mean_eta"] for _, s in entries])),
            "cum_S": float(np.mean([s["cum_S"] for _, s in entries])),
            "per_seed": {str(seed): s for seed, s in entries},
        }
        path = outdir / f"summary_{config.config_hash()}_{mode.label}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(agg, fh, indent=2, sort_keys=True)
        comparison_rows.append((mode.label, scenario_name,
                                agg["mean_accuracy"], agg["std_accuracy"]))

    with open(outdir / f"comparison_{config.config_hash()}.csv", "w",
              newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "scenario", "mean_accuracy", "std_accuracy"])
        for row in comparison_rows:
            writer.writerow([row[0], row[1], _fmt(row[2]), _fmt(row[3])])
    return EXIT_OK


def regenerate_report(directory) -> list:
    """Rebuild the mode comparison from metrics CSVs under ``directory``."""
    stats = {}
    for path in sorted(Path(directory).glob("metrics_*.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                key = row["mode"]
                stats.setdefault(key, []).append(float(row["accuracy"]))
    return [(mode, float(np.mean(vals)), len(vals))
            for mode, vals in sorted(stats.items())]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="driftfl",
        description="Federated post-adaptation simulator under drifting streams")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--out", default=None,
                       help="override the config's output_dir")

    p_val = sub.add_parser("validate", help="check a config and echo defaults")
    p_val.add_argument("--config", required=True)

    p_rep = sub.add_parser("report", help="regenerate the comparison table")
    p_rep.add_argument("--in", dest="indir", required=True)

    args = parser.parse_args(argv)

    if args.command in ("run", "validate"):
        try:
            raw_text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"cannot read config: {exc}", file=sys.stderr)
            return EXIT_IO
        try:
            config = validate_config(raw_text)
        except json.JSONDecodeError as exc:
            print(f"config parse error at line {exc.lineno} column {exc.colno}: "
                  f"{exc.msg}", file=sys.stderr)
            return EXIT_CONFIG
        except ConfigError as exc:
            for violation in exc.violations:
                print(f"config error: {violation}", file=sys.stderr)
            return EXIT_CONFIG

        if args.command == "validate":
            echo = {"modes": [m.label for m in config.modes],
                    "seeds": config.seeds,
                    "output_dir": config.output_dir,
                    "hash": config.config_hash(),
                    "run": {k: getattr(config.base, k) for k in sorted(_RUN_KEYS)},
                    "bounds": {"eta_min": config.base.bounds.eta_min,
                               "eta_max": config.base.bounds.eta_max},
                    "scenario": config.base.scenario.to_dict()}
            print(json.dumps(echo, indent=2, sort_keys=True))
            return EXIT_OK
        if args.out:
            config.output_dir = args.out
        return run_experiment(config, workers=args.workers)

    rows = regenerate_report(args.indir)
    print("mode,mean_accuracy,rows")
    for mode, acc, n in rows:
        print(f"{mode},{_fmt(acc)},{n}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
