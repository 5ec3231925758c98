"""Batch command line: synth, render, train, evaluate, detect, export-embeddings.

Exit codes: 0 success, 1 I/O or input-data error, 2 configuration error,
3 training divergence. Every run writes a JSON manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError
from .evaluate import config_hash, evaluate_scores, write_pr_csv, write_report_line, write_roc_csv
from .ingest import IngestError, Label, parse_fleet
from .netcore import InferenceNet, NetConfig, load_checkpoint, save_checkpoint
from .pipeline import RenderOptions, RenderStats, render_series
from .profile import channel_to_png, load_rendered_dir, save_super_image
from .synth import SynthConfig, generate_fleet, read_truth, write_fleet
from .trainer import (
    SampleSet,
    TrainConfig,
    TrainingDivergence,
    labeled_subset,
    predict,
    split_by_customer,
    train_loop,
)

logger = logging.getLogger("ntlprofile")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_NAME = "model"


# -- helpers -------------------------------------------------------------------

def _prepare_dir(path: Path, force: bool, marker: str) -> Path:
    """Create ``path``; refuse to reuse one holding ``marker`` unless forced."""
    if (path / marker).exists() and not force:
        raise FileExistsError(f"{path} already holds {marker}; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: dict, seed, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _render_options(args) -> RenderOptions:
    opts = RenderOptions(args.sigma, args.threshold, args.window_days, args.step_days)
    if opts.sigma_px <= 0:
        raise ConfigError("--sigma must be positive")
    if not 0 <= opts.threshold_frac < 1:
        raise ConfigError("--threshold must lie in [0, 1)")
    if opts.window_days <= 0 or opts.step_days <= 0:
        raise ConfigError("--window-days and --step-days must be positive")
    return opts


def _load_fleet(telemetry: str, meta: str):
    diagnostics: list[str] = []
    fleet = parse_fleet(_require(telemetry, "telemetry CSV"), _require(meta, "meta CSV"), diagnostics)
    for line in diagnostics:
        logger.warning("%s", line)
    return fleet


def _load_model(path: str):
    base = Path(path)
    if base.suffix in (".manifest", ".bin"):
        base = base.with_suffix("")
    _require(base.with_suffix(".manifest"), "checkpoint manifest")
    _require(base.with_suffix(".bin"), "checkpoint data")
    _, teacher, meta = load_checkpoint(base)
    widths = tuple(int(w) for w in meta.get("widths", "").split(",") if w) or NetConfig().widths
    net = InferenceNet(NetConfig(widths=widths))
    roi = meta.get("roi_pooling", "true") == "true"
    return net, teacher, roi, meta


def _truth_code(label: Label | None) -> int:
    return -1 if label is None or label is Label.UNLABELED else label.code


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    text = _require(args.config, "synth config").read_text() if args.config else ""
    overrides = {"seed": args.seed} if args.seed is not None else {}
    config = SynthConfig.from_text(text, **overrides)
    out = _prepare_dir(Path(args.out), args.force, MANIFEST_NAME)
    fleet = generate_fleet(config)
    paths = write_fleet(fleet, out)
    write_manifest(out / MANIFEST_NAME, "synth", asdict(config), {"config": args.config or ""}, paths, config.seed, started)
    logger.info("wrote %d customers to %s", len(fleet), out)
    return EXIT_OK


def cmd_render(args) -> int:
    started = time.perf_counter()
    opts = _render_options(args)
    fleet = _load_fleet(args.telemetry, args.meta)
    out = _prepare_dir(Path(args.out), args.force, MANIFEST_NAME)
    stats = RenderStats()
    images = render_series(fleet, opts, stats=stats)
    for old in out.glob("*.ntlp"):
        old.unlink()
    for im in images:
        save_super_image(im, out / f"{im.customer_id}_{im.window_start.replace(':', '')}.ntlp")
    pngs = 0
    if args.png and images:
        png_dir = out / "png"
        png_dir.mkdir(exist_ok=True)
        picks = np.unique(np.linspace(0, len(images) - 1, min(args.png_limit, len(images))).astype(int))
        for i in picks:
            im = images[i]
            stem = f"{im.customer_id}_{im.window_start.replace(':', '')}"
            for c in range(im.channels.shape[0]):
                channel_to_png(im.channels[c], png_dir / f"{stem}_ch{c}.png")
                pngs += 1
            if args.figures:
                from .plotting import plot_super_image

                plot_super_image(im, png_dir / f"{stem}_panel.png")
    logger.info("rendered %d windows, skipped %d incomplete", stats.windows, stats.skipped)
    write_manifest(
        out / MANIFEST_NAME,
        "render",
        {**asdict(opts), "windows": stats.windows, "skipped": stats.skipped, "pngs": pngs},
        {"telemetry": args.telemetry, "meta": args.meta},
        {"dir": out},
        None,
        started,
    )
    return EXIT_OK


def load_training_pools(rendered: str, truth_path: str, train_fraction: float, seed: int):
    """Rendered images + truth CSV -> (all samples, train idx, val idx, unlabeled idx).

    Customers whose metadata marks them unlabeled stay unlabeled whatever the
    truth CSV says; every other customer takes its label from the truth CSV.
    """
    images = load_rendered_dir(_require(rendered, "rendered directory"))
    truth = read_truth(_require(truth_path, "truth CSV"))
    if not images:
        raise IngestError(f"no super images in {rendered}")
    labels = [-1 if im.label is Label.UNLABELED else _truth_code(truth.get(im.customer_id)) for im in images]
    samples = SampleSet.from_images(images, labels)
    lab = np.flatnonzero(samples.labels >= 0)
    unl = np.flatnonzero(samples.labels < 0)
    tr, va = split_by_customer(samples.subset(lab), train_fraction, seed)
    return samples, lab[tr], lab[va], unl


def cmd_train(args) -> int:
    started = time.perf_counter()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.no_semi:
        overrides["semi_supervised"] = False
    if args.no_triplet:
        overrides["triplet_loss"] = False
    if args.no_roi:
        overrides["roi_pooling"] = False
    text = _require(args.config, "train config").read_text() if args.config else ""
    config = TrainConfig.from_text(text, **overrides)
    if args.labeled_count is not None and args.labeled_count < 2:
        raise ConfigError("--labeled-count must be >= 2")

    samples, tr, va, unl = load_training_pools(args.rendered, args.truth, args.train_fraction, config.seed)
    labeled = labeled_subset(samples.subset(tr), args.labeled_count, config.seed)
    validation = samples.subset(va)
    unlabeled = samples.subset(unl)
    out = _prepare_dir(Path(args.out), args.force, MANIFEST_NAME)

    split_path = out / "split.csv"
    with open(split_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("customer_id", "role"))
        roles = {}
        for idx, role in ((unl, "unlabeled"), (va, "validation"), (tr, "train")):
            for i in idx:
                roles[samples.customer_ids[i]] = role
        for cid in sorted(roles):
            writer.writerow((cid, roles[cid]))

    net = InferenceNet()
    loss_path, val_path = out / "loss.csv", out / "val.csv"

    def progress(step, result):
        if step % 10 == 0 or step == config.iterations:
            logger.info("step %d xent %.4f cons %.4f contr %.4f", step, result.xent, result.consistency, result.contrastive)

    with open(loss_path, "w", newline="") as lf, open(val_path, "w", newline="") as vf:
        result = train_loop(labeled, unlabeled, validation, config, net, lf, vf, progress)

    ckpt = out / CHECKPOINT_NAME
    meta = {
        "roi_pooling": "true" if config.roi_pooling else "false",
        "widths": ",".join(str(w) for w in net.cfg.widths),
        "teacher": "best-validation-f1" if result.val_log else "final",
        "best_f1": repr(result.best_f1),
        "config_hash": config_hash(asdict(config)),
    }
    save_checkpoint(ckpt, result.student, result.best_teacher, meta)
    outputs = {"checkpoint": ckpt, "loss_log": loss_path, "val_log": val_path, "split": split_path}
    if args.figures:
        from .plotting import plot_losses

        rows = [{"step": i + 1, **asdict(r)} for i, r in enumerate(result.loss_log)]
        outputs["loss_png"] = plot_losses(rows, out / "loss.png")
    write_manifest(
        out / MANIFEST_NAME,
        "train",
        {**asdict(config), "labeled_count": len(labeled), "validation_count": len(validation), "unlabeled_count": len(unlabeled)},
        {"rendered": args.rendered, "truth": args.truth, "config": args.config or ""},
        outputs,
        config.seed,
        started,
    )
    return EXIT_OK


def _split_filter(path: str | None, role: str) -> set[str] | None:
    if not path:
        return None
    with open(_require(path, "split CSV"), newline="") as fh:
        return {row["customer_id"] for row in csv.DictReader(fh) if row["role"] == role}


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    if not 0 <= args.threshold <= 1:
        raise ConfigError("--threshold must lie in [0, 1]")
    net, params, roi, meta = _load_model(args.checkpoint)
    images = load_rendered_dir(_require(args.rendered, "rendered directory"))
    truth = read_truth(_require(args.truth, "truth CSV"))
    keep = _split_filter(args.split, args.role)
    labels = [_truth_code(truth.get(im.customer_id)) for im in images]
    picked = [i for i, im in enumerate(images) if labels[i] >= 0 and (keep is None or im.customer_id in keep)]
    if not picked:
        raise IngestError("no samples with known truth to evaluate")
    samples = SampleSet.from_images([images[i] for i in picked], [labels[i] for i in picked])
    scores, _ = predict(net, params, samples, roi)
    report = evaluate_scores(
        scores,
        samples.labels,
        args.threshold,
        samples.customer_ids if args.per_customer else None,
        meta.get("config_hash", ""),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"report": out / "report.jsonl"}
    with open(outputs["report"], "a") as fh:
        write_report_line(report, fh)
    if report.roc is not None:
        outputs["roc"] = out / "roc.csv"
        outputs["pr"] = out / "pr.csv"
        with open(outputs["roc"], "w", newline="") as fh:
            write_roc_csv(report.roc, fh)
        with open(outputs["pr"], "w", newline="") as fh:
            write_pr_csv(report.roc, fh)
        if args.figures:
            from .plotting import plot_roc

            outputs["roc_png"] = plot_roc(report.roc, out / "roc.png")
    logger.info("NTL P %.4f R %.4f F1 %.4f AUC %s", report.ntl.precision, report.ntl.recall, report.ntl.f1, report.auc)
    write_manifest(
        out / MANIFEST_NAME,
        "evaluate",
        {"threshold": args.threshold, "per_customer": args.per_customer, "role": args.role if args.split else "all"},
        {"checkpoint": args.checkpoint, "rendered": args.rendered, "truth": args.truth, "split": args.split or ""},
        outputs,
        None,
        started,
    )
    return EXIT_OK


def cmd_detect(args) -> int:
    started = time.perf_counter()
    opts = _render_options(args)
    net, params, roi, _ = _load_model(args.checkpoint)
    fleet = _load_fleet(args.telemetry, args.meta)
    images = render_series(fleet, opts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scores = np.zeros(0)
    if images:
        scores, _ = predict(net, params, SampleSet.from_images(images), roi)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("customer_id", "window_start", "ntl_score"))
        for im, s in zip(images, scores):
            writer.writerow((im.customer_id, im.window_start, repr(float(s))))
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "detect",
        asdict(opts),
        {"checkpoint": args.checkpoint, "telemetry": args.telemetry, "meta": args.meta},
        {"scores": out},
        None,
        started,
    )
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    started = time.perf_counter()
    net, params, roi, _ = _load_model(args.checkpoint)
    images = load_rendered_dir(_require(args.rendered, "rendered directory"))
    truth = read_truth(_require(args.truth, "truth CSV")) if args.truth else {}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    embeddings = np.zeros((0, net.cfg.embedding_dim), np.float32)
    if images:
        _, embeddings = predict(net, params, SampleSet.from_images(images, [0] * len(images)), roi)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["customer_id", "window_start"] + [f"e{j}" for j in range(net.cfg.embedding_dim)] + ["label"])
        for im, row in zip(images, embeddings):
            label = truth.get(im.customer_id, im.label)
            writer.writerow([im.customer_id, im.window_start] + [repr(float(v)) for v in row] + [label.value])
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "export-embeddings",
        {"rows": len(images), "dim": int(net.cfg.embedding_dim)},
        {"checkpoint": args.checkpoint, "rendered": args.rendered, "truth": args.truth or ""},
        {"embeddings": out},
        None,
        started,
    )
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_render_flags(p) -> None:
    d = RenderOptions()
    p.add_argument("--sigma", type=float, default=d.sigma_px, help="KDE bandwidth in pixels (default %(default)s)")
    p.add_argument(
        "--threshold",
        type=float,
        default=d.threshold_frac,
        help="bounding-box pixel threshold as a fraction of the channel maximum (default %(default)s)",
    )
    p.add_argument("--window-days", type=int, default=d.window_days, help="window length in days (default %(default)s)")
    p.add_argument("--step-days", type=int, default=d.step_days, help="window stride in days (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntlprofile",
        description="Non-technical-loss detection from smart-meter profiles.",
        epilog=(
            "Formats: telemetry CSV customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor; "
            "meta CSV customer_id,rated_voltage,contracted_power,label; truth CSV customer_id,label,anomaly_kind; "
            "configs are flat key=value text. Exit codes: 0 ok, 1 I/O or input data, 2 config, 3 divergence."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet (telemetry, meta and truth CSVs)")
    p.add_argument("--config", help="key=value file with SynthConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing run in --out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="cut windows and write one NTLP1 super image per window")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    _add_render_flags(p)
    p.add_argument("--png", action="store_true", help="also write 7 grey-scale PNGs for sampled windows")
    p.add_argument("--png-limit", type=int, default=20, help="number of windows sampled for --png (default %(default)s)")
    p.add_argument("--no-figures", dest="figures", action="store_false", help="skip the 7-panel figures that accompany --png")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="mean-teacher training on rendered super images")
    p.add_argument("--rendered", required=True, help="directory of .ntlp files")
    p.add_argument("--truth", required=True, help="truth CSV; customers with meta label 'unlabeled' stay unlabeled")
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int, help="overrides the config iteration count")
    p.add_argument("--labeled-count", type=int, help="train on a random subset of this many labeled samples")
    p.add_argument("--train-fraction", type=float, default=0.25, help="labeled samples kept for training (by customer)")
    p.add_argument("--no-semi", action="store_true", help="supervised only (no teacher losses)")
    p.add_argument("--no-triplet", action="store_true", help="drop the contrastive term")
    p.add_argument("--no-roi", action="store_true", help="pool over the full image instead of the boxes")
    p.add_argument("--no-figures", dest="figures", action="store_false", help="skip loss.png")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score rendered samples and write metrics")
    p.add_argument("--checkpoint", required=True, help="checkpoint base path (without .manifest/.bin)")
    p.add_argument("--rendered", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", help="split.csv from train; restricts to customers with --role")
    p.add_argument("--role", default="validation", choices=("train", "validation", "unlabeled"))
    p.add_argument("--per-customer", action="store_true", help="add a per-customer majority vote")
    p.add_argument("--no-figures", dest="figures", action="store_false", help="skip roc.png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="score raw telemetry: customer_id,window_start,ntl_score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--telemetry", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_render_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("export-embeddings", help="write per-sample embeddings and labels as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rendered", required=True)
    p.add_argument("--truth", help="truth CSV; falls back to the rendered labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
