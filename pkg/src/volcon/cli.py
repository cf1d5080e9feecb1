"""Command-line surface for the full pipeline.

Subcommands: ``synth`` (layered toy volume), ``make-labels`` (position
pseudo-labels), ``pretrain``, ``finetune``, ``evaluate``, and ``report``.
Progress goes to standard error; machine-readable records (resolved config,
checkpoints, logs, reports, summaries) are written under
``<output.dir>/run-<timestamp>/`` unless ``--overwrite`` reuses a named
directory. Exit codes: 0 success, 2 configuration, 3 data, 4 missing
artifact, 5 degenerate training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from . import evaluation, models, training
from .config import RunConfig
from .errors import (
    ConfigError,
    DataError,
    DegenerateBatchError,
    MissingArtifactError,
    TrainingError,
)
from .volume_data import (
    SyntheticVolumeConfig,
    assign_volume_labels,
    build_test_splits,
    compute_normalization_stats,
    extract_crosslines,
    generate_synthetic_volume,
    load_volume,
    save_volume,
    write_split_specs,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MISSING = 4
EXIT_TRAINING = 5


# ----------------------------------------------------------------- plumbing


def _make_run_dir(cfg: RunConfig, overwrite: bool) -> Path:
    out = cfg.section("output")
    base = Path(out["dir"])
    if out["run_name"]:
        run_dir = base / str(out["run_name"])
        if run_dir.exists() and not overwrite:
            raise ConfigError(
                f"run directory {run_dir} exists; pass --overwrite to reuse it"
            )
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        run_dir = base / f"run-{stamp}"
        suffix = 0
        while run_dir.exists():
            suffix += 1
            run_dir = base / f"run-{stamp}-{suffix}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _resolve_normalization(cfg: RunConfig, train_vol=None) -> tuple[float, float]:
    """Stats for the augmentation policy; 'volume' pulls them from the train volume."""
    raw = cfg.section("augmentation")["normalization"]
    if raw != "volume":
        return (float(raw[0]), float(raw[1]))
    if train_vol is None:
        train_vol = load_volume(cfg.require("data", "train_volume"), "amplitude")
    stats = compute_normalization_stats(train_vol)
    # Echo the resolved numbers so the persisted config stands alone.
    cfg.document["augmentation"]["normalization"] = [stats[0], stats[1]]
    return stats


def _write_summary(run_dir: Path, payload: dict) -> Path:
    # Summaries hold only run-content values (no wall times, no absolute
    # paths) so reruns with identical inputs produce identical bytes.
    path = run_dir / "summary.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, overrides=args.set or [])


def _checkpoint_path(cfg: RunConfig, section: str, flag_value: str | None) -> Path:
    if flag_value:
        return Path(flag_value)
    configured = cfg.section(section)["checkpoint"]
    if not configured:
        raise MissingArtifactError(
            f"no {section} checkpoint: pass --checkpoint or set "
            f"{section}.checkpoint in the config"
        )
    return Path(configured)


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    dims = tuple(int(v) for v in args.dims.split(","))
    if len(dims) != 3:
        raise ConfigError(f"--dims expects inline,crossline,depth, got {args.dims!r}")
    cfg = SyntheticVolumeConfig(
        num_layers=args.layers, dims=dims, dip=args.dip, noise=args.noise, seed=args.seed
    )
    vol, labels = generate_synthetic_volume(cfg)
    out = Path(args.out)
    amp_path = save_volume(out / "amplitude.npy", vol.amplitudes)
    lab_path = save_volume(out / "labels.npy", labels.classes)
    logger.info("wrote %s and %s", amp_path, lab_path)
    return EXIT_OK


def cmd_make_labels(args) -> int:
    vol = load_volume(args.train_volume, "amplitude")
    assignment = assign_volume_labels(vol.num_crosslines, args.num_partitions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(assignment.to_json(), indent=2) + "\n")
    logger.info(
        "labeled %d crosslines with %d partitions -> %s",
        assignment.num_slices,
        assignment.num_partitions,
        out,
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    vol = load_volume(cfg.require("data", "train_volume"), "amplitude")
    stats = _resolve_normalization(cfg, vol)
    slices = extract_crosslines(vol)

    stage = cfg.stage_config("pretrain")
    assignment = None
    if stage.pair_strategy == "volume_labels":
        assignment = assign_volume_labels(len(slices), stage.num_partitions)

    run_dir = _make_run_dir(cfg, args.overwrite)
    policy = cfg.augmentation_policy("contrastive", stats)
    ckpt, log = training.pretrain_contrastive(
        slices,
        stage,
        cfg.optimizer_config(),
        cfg.encoder_spec(),
        cfg.projection_spec(),
        policy,
        assignment=assignment,
    )

    ckpt_path = models.save_checkpoint(ckpt, run_dir / "pretrain.ckpt")
    log.write_jsonl(run_dir / "train_log_pretrain.jsonl")
    if assignment is not None:
        (run_dir / "volume_labels.json").write_text(
            json.dumps(assignment.to_json(), indent=2) + "\n"
        )
    cfg.document["pretrain"]["checkpoint"] = str(ckpt_path)
    cfg.save(run_dir / "resolved_config.json")
    _write_summary(
        run_dir,
        {
            "stage": "pretrain",
            "pair_strategy": stage.pair_strategy,
            "num_partitions": stage.num_partitions,
            "epochs": stage.epochs,
            "batch_size": stage.batch_size,
            "seed": stage.seed,
            "temperature": stage.temperature,
            "final_mean_loss": log.records[-1].mean_loss,
            "loss_sequence": log.loss_sequence(),
        },
    )
    logger.info("pretrain finished: %s", run_dir)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    vol = load_volume(cfg.require("data", "train_volume"), "amplitude")
    stats = _resolve_normalization(cfg, vol)
    labels = load_volume(cfg.require("data", "train_labels"), "label")
    slices = extract_crosslines(vol, labels)

    pretrained = models.load_checkpoint(_checkpoint_path(cfg, "pretrain", args.checkpoint))
    stage = cfg.stage_config("finetune")
    run_dir = _make_run_dir(cfg, args.overwrite)
    policy = cfg.augmentation_policy("finetune", stats)
    ckpt, log = training.finetune_segmentation(
        slices,
        pretrained,
        stage,
        cfg.optimizer_config(),
        cfg.head_spec(),
        policy,
    )

    ckpt_path = models.save_checkpoint(ckpt, run_dir / "finetune.ckpt")
    log.write_jsonl(run_dir / "train_log_finetune.jsonl")
    cfg.document["finetune"]["checkpoint"] = str(ckpt_path)
    cfg.save(run_dir / "resolved_config.json")
    _write_summary(
        run_dir,
        {
            "stage": "finetune",
            "pair_strategy": ckpt.metrics.get("pair_strategy"),
            "num_partitions": ckpt.metrics.get("num_partitions"),
            "epochs": stage.epochs,
            "batch_size": stage.batch_size,
            "seed": stage.seed,
            "final_mean_loss": log.records[-1].mean_loss,
            "loss_sequence": log.loss_sequence(),
        },
    )
    logger.info("finetune finished: %s", run_dir)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    stats = _resolve_normalization(cfg)
    test_volume_paths = cfg.require("data", "test_volumes")
    test_label_paths = cfg.require("data", "test_labels")
    if len(test_volume_paths) != len(test_label_paths):
        raise ConfigError(
            f"{len(test_volume_paths)} test volumes but "
            f"{len(test_label_paths)} label volumes"
        )

    volumes = {}
    for vid, (vol_path, lab_path) in enumerate(zip(test_volume_paths, test_label_paths)):
        volumes[vid] = (load_volume(vol_path, "amplitude"), load_volume(lab_path, "label"))

    num_splits = int(cfg.section("data")["num_test_splits"])
    counts = [volumes[vid][0].num_crosslines for vid in sorted(volumes)]
    if len(counts) == 1:
        counts.append(0)
    if len(counts) != 2:
        raise ConfigError(f"expected one or two test volumes, got {len(counts)}")
    splits = build_test_splits(counts[0], counts[1], num_splits)

    ckpt = models.load_checkpoint(_checkpoint_path(cfg, "finetune", args.checkpoint))
    bundle = models.load_segmentation_bundle(ckpt)
    run_dir = _make_run_dir(cfg, args.overwrite)
    policy = cfg.augmentation_policy("eval", stats)
    reports, average = evaluation.evaluate_splits(bundle, splits, volumes, policy)

    write_split_specs(splits, run_dir / "splits")
    evaluation.write_reports(reports, average, run_dir / "reports.json")
    cfg.save(run_dir / "resolved_config.json")
    _write_summary(
        run_dir,
        {
            "stage": "evaluate",
            "pair_strategy": ckpt.metrics.get("pair_strategy"),
            "num_partitions": ckpt.metrics.get("num_partitions"),
            "average_miou": average,
            "per_split_miou": [r.miou for r in reports],
            "num_splits": num_splits,
        },
    )
    logger.info("average MIOU over %d splits: %.4f", num_splits, average)
    return EXIT_OK


def _load_run(run_dir: Path) -> dict:
    reports_path = run_dir / "reports.json"
    if not reports_path.exists():
        raise MissingArtifactError(f"{run_dir}: no reports.json (run evaluate first)")
    reports, average = evaluation.read_reports(reports_path)
    summary = {}
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
    logs = {}
    for log_path in sorted(run_dir.glob("train_log_*.jsonl")):
        stage = log_path.stem.replace("train_log_", "")
        logs[stage] = training.TrainLog.read_jsonl(log_path, stage=stage).loss_sequence()
    return {
        "name": run_dir.name,
        "pair_strategy": summary.get("pair_strategy"),
        "num_partitions": summary.get("num_partitions"),
        "average_miou": average,
        "splits": [r.to_json() for r in reports],
        "loss_curves": logs,
    }


def _format_text_table(runs: list[dict]) -> str:
    header = f"{'run':<28} {'method':<16} {'N':>6} {'avg MIOU':>10}  per-split MIOU"
    lines = [header, "-" * len(header)]
    for run in runs:
        n = run["num_partitions"]
        split_text = " ".join(f"{s['miou']:.4f}" for s in run["splits"])
        lines.append(
            f"{run['name']:<28} {str(run['pair_strategy']):<16} "
            f"{('-' if n is None else str(n)):>6} {run['average_miou']:>10.4f}  {split_text}"
        )
    return "\n".join(lines)


def _write_plots(runs: list[dict], out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [run["name"] for run in runs]
    values = [run["average_miou"] for run in runs]
    ax.bar(range(len(runs)), values)
    ax.set_xticks(range(len(runs)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("average MIOU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    bars_path = out_dir / "miou_bars.png"
    fig.savefig(bars_path)
    plt.close(fig)
    written.append(bars_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    any_curve = False
    for run in runs:
        for stage, losses in run["loss_curves"].items():
            if losses:
                any_curve = True
                ax.plot(range(1, len(losses) + 1), losses, label=f"{run['name']}:{stage}")
    if any_curve:
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        curves_path = out_dir / "loss_curves.png"
        fig.savefig(curves_path)
        written.append(curves_path)
    plt.close(fig)
    return written


def cmd_report(args) -> int:
    runs = [_load_run(Path(d)) for d in args.run_dir]
    if args.format == "json":
        print(json.dumps({"runs": runs}, indent=2, sort_keys=True))
    elif args.format == "text":
        print(_format_text_table(runs))
    else:
        out_dir = Path(args.out) if args.out else Path(args.run_dir[0])
        for path in _write_plots(runs, out_dir):
            logger.info("wrote %s", path)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_config_arguments(sub, needs_checkpoint=False):
    sub.add_argument("--config", required=True, help="path to the run config JSON")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY.PATH=VALUE",
        help="override a config value (repeatable), e.g. --set pretrain.epochs=5",
    )
    sub.add_argument(
        "--overwrite",
        action="store_true",
        help="reuse the named run directory instead of requiring a fresh one",
    )
    if needs_checkpoint:
        sub.add_argument(
            "--checkpoint", help="checkpoint path (overrides the config value)"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volcon",
        description=(
            "Volume-position contrastive pretraining and frozen-encoder "
            "segmentation fine-tuning for seismic crossline slices."
        ),
    )
    parser.add_argument("--verbose", action="store_true", help="debug-level progress")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a layered synthetic volume pair")
    synth.add_argument("--layers", type=int, default=3)
    synth.add_argument("--dims", default="32,64,64", help="inline,crossline,depth")
    synth.add_argument("--dip", type=float, default=0.25)
    synth.add_argument("--noise", type=float, default=0.05)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(func=cmd_synth)

    labels = commands.add_parser(
        "make-labels", help="assign position pseudo-labels to crosslines"
    )
    labels.add_argument("--train-volume", required=True)
    labels.add_argument("--num-partitions", type=int, required=True)
    labels.add_argument("--out", required=True, help="output JSON path")
    labels.set_defaults(func=cmd_make_labels)

    pretrain = commands.add_parser("pretrain", help="contrastive encoder pretraining")
    _add_config_arguments(pretrain)
    pretrain.set_defaults(func=cmd_pretrain)

    finetune = commands.add_parser(
        "finetune", help="train a segmentation head on a frozen encoder"
    )
    _add_config_arguments(finetune, needs_checkpoint=True)
    finetune.set_defaults(func=cmd_finetune)

    evaluate = commands.add_parser(
        "evaluate", help="score a fine-tuned model on the test splits"
    )
    _add_config_arguments(evaluate, needs_checkpoint=True)
    evaluate.set_defaults(func=cmd_evaluate)

    report = commands.add_parser("report", help="summarize one or more evaluated runs")
    report.add_argument(
        "--run-dir", action="append", required=True, help="run directory (repeatable)"
    )
    report.add_argument("--format", choices=("text", "json", "plot"), default="text")
    report.add_argument("--out", help="output directory for plot files")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except DataError as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except (DegenerateBatchError, TrainingError) as exc:
        logger.error("%s", exc)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
