"""Command-line entry points: dataset generation, training, task evaluation,
variation sweeps, and impact reports.

Exit codes are a stable contract for sweep orchestration: 0 success,
1 usage/config error, 2 runtime error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalsuite, svgchart, sweeplab, toy1d, wmcore
from .protocol import NoiseSpec, ProtocolConfig, RecallSpec, Trainer, TrainingSchedule, build_model_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_DIVERGED = 3

SWEEP_TASKS = ("normal", "use_state", "prediction", "prediction_shallow", "prediction_local", "mask_sensory")


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field."""


@dataclass(frozen=True)
class ModelSettings:
    state_dim: int = 128
    n_heads: int = 4
    ff_mult: int = 4
    block_configuration: tuple = ("M", "M")


@dataclass(frozen=True)
class EvalSettings:
    split: str = "test"
    max_sequences: int = 256
    sdtw_gamma: float = 0.1
    mask_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = 1
    dataset_seed: int = 0
    train_seed: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    evaluation: EvalSettings = field(default_factory=EvalSettings)


# The in-repo desk-scale preset (also at configs/desk.json): 2,000 sequences
# of length 64, a 32-dim state, 50 epochs. Small enough for CI.
DESK_DATASET = dict(n_raw=500, raw_len=256, window_len=64, windows_per_raw=4)
DESK_CONFIG = ExperimentConfig(
    model=ModelSettings(state_dim=32),
    schedule=TrainingSchedule(epochs=50, batch_size=256, lr_max=3e-3, warmup_frac=0.05),
    evaluation=EvalSettings(max_sequences=256),
)


# -- config (de)serialization -----------------------------------------------------


def _check_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown field {where}.{unknown[0]}")


def _get(section: dict, key: str, default, caster, where: str):
    if key not in section:
        return default
    try:
        return caster(section[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {where}.{key}: {exc}") from None


def _opt_spec(section: dict, key: str, fields, caster, where: str):
    value = section.get(key)
    if value is None:
        return None
    if not isinstance(value, dict):
        raise ConfigError(f"invalid value for {where}.{key}: expected object or null")
    _check_keys(value, fields, f"{where}.{key}")
    kwargs = {f: value[f] for f in fields if f in value}
    try:
        return caster(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {where}.{key}: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    _check_keys(doc, ("version", "dataset_seed", "train_seed", "model", "protocol", "schedule", "evaluation"), "config")
    version = _get(doc, "version", 1, int, "config")
    if version != 1:
        raise ConfigError(f"unsupported config version {version}")

    m = doc.get("model", {})
    _check_keys(m, ("state_dim", "n_heads", "ff_mult", "block_configuration"), "model")
    model = ModelSettings(
        state_dim=_get(m, "state_dim", 128, int, "model"),
        n_heads=_get(m, "n_heads", 4, int, "model"),
        ff_mult=_get(m, "ff_mult", 4, int, "model"),
        block_configuration=tuple(_get(m, "block_configuration", ("M", "M"), list, "model")),
    )

    p = doc.get("protocol", {})
    _check_keys(
        p,
        (
            "sensory_masking", "n_segment", "fast_forward", "state_save_method",
            "check_input_masks", "state_activation", "state_regularizer",
            "regularizer_weight", "noise_state", "noise_measurement",
            "recall_future", "recall_past", "local_chance", "loss_weights",
        ),
        "protocol",
    )
    try:
        protocol_cfg = ProtocolConfig(
            sensory_masking=_get(p, "sensory_masking", False, bool, "protocol"),
            n_segment=_get(p, "n_segment", 1, int, "protocol"),
            fast_forward=_get(p, "fast_forward", False, bool, "protocol"),
            state_save_method=_get(p, "state_save_method", "REPLACE", str, "protocol"),
            check_input_masks=_get(p, "check_input_masks", False, bool, "protocol"),
            state_activation=_get(p, "state_activation", "tanh", str, "protocol"),
            state_regularizer=_get(p, "state_regularizer", "none", str, "protocol"),
            regularizer_weight=_get(p, "regularizer_weight", 1e-2, float, "protocol"),
            noise_state=_opt_spec(p, "noise_state", ("mean", "std"), NoiseSpec, "protocol"),
            noise_measurement=_opt_spec(p, "noise_measurement", ("mean", "std"), NoiseSpec, "protocol"),
            recall_future=_opt_spec(p, "recall_future", ("stride", "n"), RecallSpec, "protocol"),
            recall_past=_opt_spec(p, "recall_past", ("stride", "n"), RecallSpec, "protocol"),
            local_chance=_get(p, "local_chance", 0.0, float, "protocol"),
            loss_weights=_get(p, "loss_weights", {}, dict, "protocol"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid protocol config: {exc}") from None

    s = doc.get("schedule", {})
    _check_keys(
        s,
        ("epochs", "batch_size", "lr_max", "lr_min", "warmup_frac", "beta1", "beta2", "eps", "weight_decay"),
        "schedule",
    )
    schedule = TrainingSchedule(
        epochs=_get(s, "epochs", 100, int, "schedule"),
        batch_size=_get(s, "batch_size", 256, int, "schedule"),
        lr_max=_get(s, "lr_max", 3e-4, float, "schedule"),
        lr_min=_get(s, "lr_min", 0.0, float, "schedule"),
        warmup_frac=_get(s, "warmup_frac", 0.05, float, "schedule"),
        beta1=_get(s, "beta1", 0.9, float, "schedule"),
        beta2=_get(s, "beta2", 0.999, float, "schedule"),
        eps=_get(s, "eps", 1e-8, float, "schedule"),
        weight_decay=_get(s, "weight_decay", 0.01, float, "schedule"),
    )

    e = doc.get("evaluation", {})
    _check_keys(e, ("split", "max_sequences", "sdtw_gamma", "mask_seed"), "evaluation")
    evaluation = EvalSettings(
        split=_get(e, "split", "test", str, "evaluation"),
        max_sequences=_get(e, "max_sequences", 256, int, "evaluation"),
        sdtw_gamma=_get(e, "sdtw_gamma", 0.1, float, "evaluation"),
        mask_seed=_get(e, "mask_seed", 0, int, "evaluation"),
    )

    return ExperimentConfig(
        version=version,
        dataset_seed=_get(doc, "dataset_seed", 0, int, "config"),
        train_seed=_get(doc, "train_seed", 0, int, "config"),
        model=model,
        protocol=protocol_cfg,
        schedule=schedule,
        evaluation=evaluation,
    )


def config_to_json(cfg: ExperimentConfig) -> str:
    """Canonical serialization: sorted keys, compact separators, all fields
    explicit. Equal configs produce identical bytes."""

    def spec(v):
        if v is None:
            return None
        if isinstance(v, NoiseSpec):
            return {"mean": v.mean, "std": v.std}
        return {"stride": v.stride, "n": v.n}

    doc = {
        "version": cfg.version,
        "dataset_seed": cfg.dataset_seed,
        "train_seed": cfg.train_seed,
        "model": {
            "state_dim": cfg.model.state_dim,
            "n_heads": cfg.model.n_heads,
            "ff_mult": cfg.model.ff_mult,
            "block_configuration": list(cfg.model.block_configuration),
        },
        "protocol": {
            "sensory_masking": cfg.protocol.sensory_masking,
            "n_segment": cfg.protocol.n_segment,
            "fast_forward": cfg.protocol.fast_forward,
            "state_save_method": cfg.protocol.state_save_method,
            "check_input_masks": cfg.protocol.check_input_masks,
            "state_activation": cfg.protocol.state_activation,
            "state_regularizer": cfg.protocol.state_regularizer,
            "regularizer_weight": cfg.protocol.regularizer_weight,
            "noise_state": spec(cfg.protocol.noise_state),
            "noise_measurement": spec(cfg.protocol.noise_measurement),
            "recall_future": spec(cfg.protocol.recall_future),
            "recall_past": spec(cfg.protocol.recall_past),
            "local_chance": cfg.protocol.local_chance,
            "loss_weights": dict(cfg.protocol.loss_weights),
        },
        "schedule": {
            "epochs": cfg.schedule.epochs,
            "batch_size": cfg.schedule.batch_size,
            "lr_max": cfg.schedule.lr_max,
            "lr_min": cfg.schedule.lr_min,
            "warmup_frac": cfg.schedule.warmup_frac,
            "beta1": cfg.schedule.beta1,
            "beta2": cfg.schedule.beta2,
            "eps": cfg.schedule.eps,
            "weight_decay": cfg.schedule.weight_decay,
        },
        "evaluation": {
            "split": cfg.evaluation.split,
            "max_sequences": cfg.evaluation.max_sequences,
            "sdtw_gamma": cfg.evaluation.sdtw_gamma,
            "mask_seed": cfg.evaluation.mask_seed,
        },
    }
    return sweeplab.canonical_json(doc)


def apply_variables(cfg: ExperimentConfig, variables) -> ExperimentConfig:
    """Resolve an indicator set against a base config (sweeps always train
    with sensory masking on)."""
    protocol_cfg, blocks = sweeplab.variables_to_protocol(variables, sensory_masking=True)
    protocol_cfg = ProtocolConfig(
        **{
            **protocol_cfg.__dict__,
            "loss_weights": dict(cfg.protocol.loss_weights),
        }
    )
    return ExperimentConfig(
        version=cfg.version,
        dataset_seed=cfg.dataset_seed,
        train_seed=cfg.train_seed,
        model=ModelSettings(
            state_dim=cfg.model.state_dim,
            n_heads=cfg.model.n_heads,
            ff_mult=cfg.model.ff_mult,
            block_configuration=blocks,
        ),
        protocol=protocol_cfg,
        schedule=cfg.schedule,
        evaluation=cfg.evaluation,
    )


# -- shared builders ------------------------------------------------------------------


def build_model(cfg: ExperimentConfig, seed: int) -> wmcore.WorldModel:
    model_cfg = build_model_config(
        cfg.protocol,
        state_dim=cfg.model.state_dim,
        n_heads=cfg.model.n_heads,
        ff_mult=cfg.model.ff_mult,
        block_configuration=cfg.model.block_configuration,
    )
    return wmcore.WorldModel(model_cfg, np.random.default_rng([seed, 1]))


def train_once(cfg: ExperimentConfig, dataset, out_dir: Path, seed=None) -> dict:
    """Train one model; write checkpoint, epoch log, and summary. Returns
    the summary dict."""
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.train_seed if seed is None else seed
    model = build_model(cfg, seed)
    trainer = Trainer(model, dataset, cfg.protocol, cfg.schedule, seed=[seed, 2])
    stats = trainer.train(log_path=out_dir / "log.csv")
    wmcore.save_checkpoint(out_dir / "checkpoint.wmck", config_to_json(cfg), model.state_dict())
    summary = {
        "epochs_run": len(stats),
        "diverged": bool(trainer.diverged),
        "final_train_loss": stats[-1].train_loss if stats else None,
        "final_val_loss": stats[-1].val_loss if stats else None,
        "total_seconds": float(sum(s.seconds for s in stats)),
        "seed": seed,
    }
    (out_dir / "summary.json").write_text(sweeplab.canonical_json(summary) + "\n")
    return summary


def evaluate_checkpoint(checkpoint_path, dataset, tasks, mask_x: float):
    config_json, tensors = wmcore.load_checkpoint(checkpoint_path)
    cfg = parse_config(config_json)
    model = build_model(cfg, cfg.train_seed)
    model.load_state(tensors)
    ev = evalsuite.Evaluator(
        model,
        dataset,
        split=cfg.evaluation.split,
        max_sequences=cfg.evaluation.max_sequences,
        sdtw_gamma=cfg.evaluation.sdtw_gamma,
        mask_seed=cfg.evaluation.mask_seed,
        loss_weights=cfg.protocol.loss_weights,
    )
    return ev.run(tasks if tasks == "all" else list(tasks), mask_x=mask_x)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    gen_cfg = toy1d.GenerationConfig(
        n_raw=args.raw_sequences,
        raw_len=args.raw_length,
        window_len=args.window_length,
        windows_per_raw=args.windows_per_raw,
    )
    ds = toy1d.generate_dataset(args.seed, gen_cfg)
    ds.save(args.out)
    if args.export_csv:
        ds.export_csv(args.export_csv)
    counts = ds.split_counts()
    print(f"sequences: {ds.n_sequences} x {ds.seq_len}")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    print(f"checksum: {ds.checksum()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    dataset = toy1d.Toy1DDataset.load(args.data)
    summary = train_once(cfg, dataset, Path(args.out))
    print(f"epochs run: {summary['epochs_run']}, final train loss: {summary['final_train_loss']}")
    if summary["diverged"]:
        print("training diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = toy1d.Toy1DDataset.load(args.data)
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks != "all" else "all"
    if tasks != "all":
        unknown = [t for t in tasks if t not in evalsuite.TASK_NAMES]
        if unknown:
            raise _UsageError(f"unknown tasks {unknown}; valid: {list(evalsuite.TASK_NAMES)}")
    if not 0 <= args.mask_x <= 100:
        raise _UsageError("--mask-x must lie in [0, 100]")
    results = evaluate_checkpoint(args.checkpoint, dataset, tasks, args.mask_x)
    out = args.out or "/dev/stdout"
    evalsuite.results_to_csv(results, args.variation_id, out)
    return EXIT_OK


def _run_variation(payload) -> dict:
    """One sweep member: resolve variables, train, evaluate, record."""
    base_json, data_path, out_root, entry_id, variables, seed = payload
    cfg = apply_variables(parse_config(base_json), variables)
    dataset = toy1d.Toy1DDataset.load(data_path)
    var_dir = Path(out_root) / entry_id
    var_dir.mkdir(parents=True, exist_ok=True)
    (var_dir / "config.json").write_text(config_to_json(cfg) + "\n")
    summary = train_once(cfg, dataset, var_dir, seed=seed)
    results = evaluate_checkpoint(var_dir / "checkpoint.wmck", dataset, "all", mask_x=100.0)
    evalsuite.results_to_csv(results, entry_id, var_dir / "metrics.csv")
    record = {
        "id": entry_id,
        "variables": sorted(variables),
        "seed": seed,
        "duration_seconds": summary["total_seconds"],
        "train_diverged": summary["diverged"],
        "task_metrics": {r.task: r.composite_mse for r in results},
        "task_sdtw": {r.task: r.composite_sdtw for r in results},
    }
    (var_dir / "variation.json").write_text(sweeplab.canonical_json(record) + "\n")
    return record


def cmd_sweep(args) -> int:
    entries = sweeplab.read_manifest(args.manifest)
    base_json = config_to_json(
        parse_config(Path(args.config).read_text()) if args.config else DESK_CONFIG
    )
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    pending = []
    for i, entry in enumerate(entries):
        if (out_root / entry["id"] / "variation.json").exists():
            continue
        seed = entry["seed"] if entry["seed"] is not None else i
        pending.append((base_json, str(args.data), str(out_root), entry["id"], entry["variables"], seed))
    print(f"{len(entries)} variations, {len(entries) - len(pending)} already complete, {len(pending)} to run")
    failures = 0
    if args.parallel > 1 and pending:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = {pool.submit(_run_variation, p): p for p in pending}
            for fut, payload in futures.items():
                failures += _collect(fut, payload, out_root)
    else:
        for payload in pending:
            try:
                record = _run_variation(payload)
                print(f"done {record['id']} (diverged={record['train_diverged']})")
            except Exception as exc:  # noqa: BLE001 -- sweep must continue
                failures += 1
                _write_failure(out_root, payload[3], exc)
    print(f"sweep finished; {failures} failures")
    return EXIT_OK


def _collect(fut, payload, out_root) -> int:
    try:
        record = fut.result()
        print(f"done {record['id']} (diverged={record['train_diverged']})")
        return 0
    except Exception as exc:  # noqa: BLE001
        _write_failure(out_root, payload[3], exc)
        return 1


def _write_failure(out_root: Path, entry_id: str, exc: Exception) -> None:
    var_dir = out_root / entry_id
    var_dir.mkdir(parents=True, exist_ok=True)
    (var_dir / "failure.json").write_text(
        sweeplab.canonical_json({"id": entry_id, "error": f"{type(exc).__name__}: {exc}"}) + "\n"
    )
    print(f"failed {entry_id}: {exc}", file=sys.stderr)


def load_records(records_dir) -> list:
    records = []
    for path in sorted(Path(records_dir).glob("*/variation.json")):
        doc = json.loads(path.read_text())
        records.append(
            sweeplab.VariationRecord(
                variation_id=doc["id"],
                variables=frozenset(doc["variables"]),
                task_metrics=dict(doc["task_metrics"]),
                duration_seconds=float(doc["duration_seconds"]),
                diverged=bool(doc["train_diverged"]),
            )
        )
    return records


def cmd_impact_report(args) -> int:
    records = load_records(args.records)
    if not records:
        print(f"no variation records under {args.records}", file=sys.stderr)
        return EXIT_USAGE
    sweeplab.apply_divergence_rule(records)
    tasks = sorted({t for r in records for t in r.task_metrics})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variables = list(sweeplab.ALL_VARIABLES)

    def fmt(v):
        return "undefined" if v is None else repr(v)

    with open(out / "impact.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variable", "task", "impact", "n_pairs", "wilcoxon_statistic", "p_value", "significant"])
        for metric in [*tasks, "duration"]:
            for v in variables:
                imp = sweeplab.impact(records, metric, v)
                res = sweeplab.wilcoxon_pairs(records, metric, v)
                w.writerow(
                    [
                        v,
                        metric,
                        fmt(imp),
                        res.n_pairs if res else 0,
                        fmt(res.statistic if res else None),
                        fmt(res.p_value if res else None),
                        int(bool(res and res.p_value < 0.05)),
                    ]
                )

    with open(out / "divergence.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variable", "p_diverge", "p_diverge_excluding_AC_1", "n_with_variable"])
        for v in variables:
            n_with = sum(1 for r in records if v in r.variables)
            w.writerow(
                [
                    v,
                    fmt(sweeplab.divergence_probability(records, v)),
                    fmt(sweeplab.divergence_probability(records, v, exclude={"AC_1"})),
                    n_with,
                ]
            )

    matrix = None
    usable = [r for r in records if not r.diverged]
    if len(usable) >= 3:
        matrix = sweeplab.correlation_matrix(records, tasks)
        with open(out / "correlation.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", *tasks])
            for i, t in enumerate(tasks):
                w.writerow([t, *[repr(x) for x in matrix[i]]])

    for metric in [*tasks, "duration"]:
        impacts, flags = [], []
        for v in variables:
            impacts.append(sweeplab.impact(records, metric, v))
            res = sweeplab.wilcoxon_pairs(records, metric, v)
            flags.append(bool(res and res.p_value < 0.05))
        name = "duration_impact" if metric == "duration" else f"impact_{metric.replace('@', '_at_')}"
        svgchart.bar_chart(
            out / f"{name}.svg",
            f"impact on {metric}",
            variables,
            impacts,
            flags=flags,
            x_label="mean with variable - mean without",
        )
    div_vals = [sweeplab.divergence_probability(records, v) for v in variables]
    svgchart.bar_chart(out / "divergence.svg", "P(diverge | variable)", variables, div_vals, x_label="probability")
    if matrix is not None:
        svgchart.matrix_chart(out / "correlation.svg", "task metric correlation", tasks, matrix.tolist())
    print(f"report written to {out} ({len(records)} records, {sum(r.diverged for r in records)} divergent)")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="worldmachine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset container")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--export-csv", default=None, metavar="DIR")
    g.add_argument("--raw-sequences", type=int, default=10_000)
    g.add_argument("--raw-length", type=int, default=1_000)
    g.add_argument("--window-length", type=int, default=200)
    g.add_argument("--windows-per-raw", type=int, default=4)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run evaluation tasks on a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--tasks", default="all")
    e.add_argument("--mask-x", type=float, default=100.0)
    e.add_argument("--out", default=None)
    e.add_argument("--variation-id", default="model")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate a manifest of variations")
    s.add_argument("--manifest", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--config", default=None, help="base config (defaults to the desk preset)")
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("impact-report", help="aggregate sweep records into CSVs and charts")
    r.add_argument("--records", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_impact_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
