"""Command-line entry point: ``kanet <command> [--config FILE] [--key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adapter, pipeline
from .config import ConfigFileError, RunConfig, load_config
from .encoder import valid_splits
from .ipel import train
from .protocol import SessionState, run_incremental

log = logging.getLogger("kanet")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out_dir: Path) -> Path:
    stream = pipeline.session_stream(cfg)
    model = pipeline.build_model(cfg)
    base = stream[0].train
    feats = model.frozen_features(base.images, base.labels, cfg.batch_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as fh:
        result = train(feats, model, cfg.ipel_config(),
                       on_step=lambda rec: fh.write(json.dumps(rec) + "\n"))
    ckpt = out_dir / "theta_g.kant"
    pipeline.save_checkpoint(model, ckpt)
    result.library.save(out_dir / "library_base.kant")
    (out_dir / "config.txt").write_text(cfg.to_text())
    log.info("wrote %s (%d steps)", ckpt, len(result.log))
    return ckpt


def cmd_eval(cfg: RunConfig, out_dir: Path, checkpoint=None, baseline: bool = False):
    stream = pipeline.session_stream(cfg)
    model = pipeline.build_model(cfg, checkpoint, baseline)
    report = run_incremental(model, stream, batch_size=cfg.batch_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.csv").write_text(report.to_csv())
    log.info("Avg %.2f  PD %.2f", report.avg, report.pd)
    return report


def cmd_sweep_layers(cfg: RunConfig, out_dir: Path, pairs=None) -> list[dict]:
    """Train and evaluate every (KS, KF) stage split of the configured depth."""
    total = cfg.n_early + cfg.n_middle + cfg.n_post
    pairs = valid_splits(total) if pairs is None else pairs
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = pipeline.session_stream(cfg)
    rows = []
    for ks, kf in pairs:
        run_cfg = pipeline.layer_split(cfg, ks, kf)
        model = pipeline.build_model(run_cfg)
        base = stream[0].train
        feats = model.frozen_features(base.images, base.labels, cfg.batch_size)
        train(feats, model, run_cfg.ipel_config())
        report = run_incremental(model, stream, batch_size=cfg.batch_size)
        rows.append({"ks": ks, "kf": kf, "avg": f"{report.avg:.2f}", "pd": f"{report.pd:.2f}",
                     "last": f"{report.per_session_accuracy[-1]:.2f}"})
        log.info("KS=%d KF=%d Avg %.2f", ks, kf, report.avg)
    with (out_dir / "layer_sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["ks", "kf", "avg", "pd", "last"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def _final_state(cfg: RunConfig, checkpoint, baseline: bool):
    stream = pipeline.session_stream(cfg)
    model = pipeline.build_model(cfg, checkpoint, baseline)
    states: list[SessionState] = []
    run_incremental(model, stream, on_session=states.append, batch_size=cfg.batch_size)
    test_images = np.concatenate([s.test.images for s in stream if len(s.test)])
    test_labels = np.concatenate([s.test.labels for s in stream if len(s.test)])
    return model, states[-1].library, test_images, test_labels


def cmd_dump_attention(cfg: RunConfig, out_dir: Path, checkpoint=None, sample_ids=None) -> list[Path]:
    """Per test sample, the fusion unit's attention over the final library (class_id, head, weight)."""
    model, lib, images, labels = _final_state(cfg, checkpoint, baseline=False)
    if sample_ids is None:
        sample_ids = [int(np.flatnonzero(labels == c)[0]) for c in np.unique(labels)]
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid in sample_ids:
        if not 0 <= sid < len(labels):
            raise ValueError(f"sample id {sid} outside the {len(labels)} test samples")
        feats = model.frozen_features(images[sid : sid + 1], labels[sid : sid + 1])
        w = adapter.attention_weights(feats.middle[0, 0], lib, model.params)
        path = out_dir / f"attention_{sid}.csv"
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["class_id", "head", "weight"])
            for h in range(w.shape[0]):
                for j, c in enumerate(lib.class_ids):
                    wr.writerow([c, h, f"{w[h, j]:.8f}"])
        paths.append(path)
    (out_dir / "attention_samples.csv").write_text(
        "sample_id,label\n" + "".join(f"{s},{labels[s]}\n" for s in sample_ids)
    )
    return paths


def cmd_export_embeddings(cfg: RunConfig, out_dir: Path, checkpoint=None) -> None:
    """Refined and plain-encoder test features as CSV (label, f0..f{D-1})."""
    model, lib, images, labels = _final_state(cfg, checkpoint, baseline=False)
    feats = model.frozen_features(images, labels, cfg.batch_size)
    refined = model.refine_batched(feats.middle, lib, cfg.batch_size)
    model.use_fusion = False
    plain = model.refine_batched(feats.middle, lib, cfg.batch_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in (("refined", refined), ("unrefined", plain)):
        with (out_dir / f"embeddings_{name}.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["label"] + [f"f{i}" for i in range(arr.shape[1])])
            for y, row in zip(labels, arr):
                wr.writerow([int(y)] + [f"{v:.7g}" for v in row])


# ---------------------------------------------------------------- argument handling


COMMANDS = ("train", "eval", "sweep-layers", "dump-attention", "export-embeddings")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kanet", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--checkpoint", help="theta_g checkpoint (KANT) for eval/dumps")
    p.add_argument("--baseline", action="store_true", help="disable knowledge fusion")
    p.add_argument("--ks", type=int, help="knowledge summary layer")
    p.add_argument("--kf", type=int, help="knowledge fusion layer")
    p.add_argument("--samples", help="comma-separated test sample ids for dump-attention")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigFileError(f"unrecognised argument {arg!r}; overrides take the form --key=value")
        key, value = arg[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        overrides = _overrides(extra)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out_dir is not None:
            overrides["out_dir"] = args.out_dir
        cfg = load_config(args.config, overrides)
        cfg = pipeline.layer_split(cfg, args.ks, args.kf).validate()
        if args.checkpoint is not None and not Path(args.checkpoint).is_file():
            raise ConfigFileError(f"checkpoint not found: {args.checkpoint}")
        samples = None
        if args.samples:
            samples = [int(s) for s in args.samples.split(",") if s.strip()]
        out = Path(cfg.out_dir)

        if args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.checkpoint, args.baseline)
        elif args.command == "sweep-layers":
            pairs = None
            if args.ks is not None or args.kf is not None:
                pairs = [(cfg.n_early, cfg.n_early + cfg.n_middle)]
            cmd_sweep_layers(cfg, out, pairs)
        elif args.command == "dump-attention":
            cmd_dump_attention(cfg, out, args.checkpoint, samples)
        else:
            cmd_export_embeddings(cfg, out, args.checkpoint)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"kanet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
