"""Command-line entry point: ``vcbm generate|train|ablate|eval|export-tsne|replay``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import anchored_embedding, write_embedding
from .lcbm import VCBM
from .metrics import TABLE_COLUMNS
from .synthdata import (
    SPLITS,
    AnnotationError,
    GeneratorConfig,
    assign_splits,
    dataset_checksum,
    generate,
    load_dataset,
    split_counts,
    write_dataset,
)
from .schema import MANEUVERS
from .tape import DomainError
from .training import (
    ABLATION_AXES,
    NumericError,
    TrainConfig,
    TrainState,
    ablate,
    evaluate,
    lambda_gradient_check,
    load_checkpoint,
    save_checkpoint,
    split_samples,
    train,
    write_table,
)

log = logging.getLogger("vcbm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
DATASET_ENV = "VCBM_DATASET_DIR"

# train flags that override config-file values; dest -> TrainConfig field
OVERRIDES = {
    "epochs": "epochs",
    "lam": "lam",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "k": "k",
    "seed": "seed",
    "gaze_variant": "gaze_variant",
    "severity": "shuffle_severity",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(path, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, seed, artifacts: list[str], dataset=None) -> None:
    doc = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "dataset": None if dataset is None else {"path": str(dataset), "checksum": dataset_checksum(dataset)},
        "artifacts": {a: _file_sha(out / a) for a in sorted(artifacts)},
        "tool_version": __version__,
    }
    (out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _dataset_dir(args) -> Path:
    path = args.dataset_dir or os.environ.get(DATASET_ENV)
    if not path:
        raise UsageError(f"--dataset-dir is required (or set {DATASET_ENV})")
    path = Path(path)
    if not (path / "manifest.jsonl").is_file():
        raise DataError(f"{path}: not a dataset directory (no manifest.jsonl)")
    return path


def _load_splits(path: Path) -> dict:
    samples, _ = load_dataset(path)
    return split_samples(samples)


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like T,H,W,C, got {text!r}") from None
    if len(shape) != 4 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"shape must be four positive integers, got {text!r}")
    return shape


def _train_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config: {exc}") from None
    cfg = TrainConfig.from_dict(base)
    over = {f: getattr(args, d) for d, f in OVERRIDES.items() if getattr(args, d, None) is not None}
    return cfg.replace(**over) if over else cfg


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, argv) -> int:
    out = _out_dir(args.out, args.force)
    cfg = GeneratorConfig(shape=args.shape, noise=args.noise, frequency=args.frequency_profile)
    samples = assign_splits(generate(args.n, args.seed, config=cfg), tuple(args.ratios), args.seed)
    if args.force:
        for f in ("manifest.jsonl", "dataset.json"):
            (out / f).unlink(missing_ok=True)
    records = write_dataset(out, samples, {"generator": cfg.to_dict(), "n": args.n, "seed": args.seed, "ratios": list(args.ratios)})
    counts = split_counts(records)
    (out / "split_counts.json").write_text(json.dumps(counts, indent=1, sort_keys=True))
    _write_manifest(out, "generate", argv, {"generator": cfg.to_dict(), "ratios": list(args.ratios)}, args.seed,
                    ["manifest.jsonl", "dataset.json", "split_counts.json"])
    print(f"wrote {len(records)} samples to {out}")
    for m in MANEUVERS:
        c = counts.get(m, {})
        print(f"  {m:4s} " + " ".join(f"{s}={c.get(s, 0)}" for s in SPLITS))
    return EXIT_OK


def cmd_train(args, argv) -> int:
    data = _dataset_dir(args)
    out = _out_dir(args.out, args.force)
    splits = _load_splits(data)
    if args.resume:
        model, cfg, state = load_checkpoint(args.resume, resume=True)
        over = {f: getattr(args, d) for d, f in OVERRIDES.items() if getattr(args, d, None) is not None}
        cfg = cfg.replace(**over) if over else cfg
        log.info("resuming at epoch %d", state.epoch)
    else:
        cfg = _train_config(args)
        model = VCBM.init(cfg.model_config(splits["train"][0].front_u8.shape[1:]), cfg.seed)
        state = TrainState()
    artifacts = ["checkpoint.json", "train_log.csv", "train_log.json"]
    if cfg.lam == 0:
        check = lambda_gradient_check(model, splits["train"][: cfg.batch_size], cfg)
        log.info("lambda=0 concept-gradient check: %s", check)
        (out / "lambda_check.json").write_text(json.dumps(check, indent=1, sort_keys=True))
        artifacts.append("lambda_check.json")
        if not check["passed"]:
            raise NumericError(f"lambda=0 gradient check failed: {check}")
    _, tlog = train(model, splits["train"], splits["val"], cfg, state)
    save_checkpoint(out / "checkpoint.json", model, cfg, state)
    tlog.to_csv(out / "train_log.csv")
    tlog.to_json(out / "train_log.json")
    _write_manifest(out, "train", argv, cfg.to_dict(), cfg.seed, artifacts, data)
    if tlog.rows:
        last = tlog.rows[-1]
        print(f"epoch {last['epoch']}: val acc {last['val_action_acc']:.3f} val micro-F1 {last['val_expl_f1_micro']:.3f}")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    data = _dataset_dir(args)
    out = _out_dir(args.out, args.force)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    cfg = _train_config(args)
    splits = _load_splits(data)
    rows = []
    for seed in args.seeds or [cfg.seed]:
        rows += ablate(splits, args.axis, values, cfg.replace(seed=seed))
    write_table(rows, out / "ablation.csv")
    _write_manifest(out, "ablate", argv, {"axis": args.axis, "values": values, "base": cfg.to_dict()}, cfg.seed, ["ablation.csv"], data)
    for r in rows:
        print(f"{r['axis']}={r['value']} seed={r['seed']}: " + " ".join(f"{c}={r[c]:.3f}" for c in TABLE_COLUMNS))
    return EXIT_OK


def _checkpoint(args):
    try:
        return load_checkpoint(args.checkpoint)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None


def cmd_eval(args, argv) -> int:
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; expected one of {SPLITS}")
    data = _dataset_dir(args)
    out = _out_dir(args.out, args.force)
    model, cfg, _ = _checkpoint(args)
    if args.severity is not None:
        cfg = cfg.replace(shuffle_severity=args.severity)
    samples = _load_splits(data)[args.split]
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    res = evaluate(model, samples, cfg)
    (out / "report.json").write_text(json.dumps(res.report.to_dict(), indent=1, sort_keys=True))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true", "pred", *(f"p_{m}" for m in MANEUVERS), "true_bits", "pred_bits"])
        for s, pm, pe in zip(samples, res.maneuver_probs, res.expl_probs):
            bits = "".join(str(b) for b in s.record.ego_explanations)
            pbits = "".join("1" if p >= cfg.threshold else "0" for p in pe)
            w.writerow([s.record.sample_id, s.record.maneuver, MANEUVERS[int(np.argmax(pm))], *map(repr, map(float, pm)), bits, pbits])
    config = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": _file_sha(args.checkpoint), "split": args.split, **cfg.to_dict()}
    _write_manifest(out, "eval", argv, config, cfg.seed, ["report.json", "predictions.csv"], data)
    print(" ".join(f"{c}={v:.4f}" for c, v in res.report.row().items()))
    return EXIT_OK


def cmd_export_tsne(args, argv) -> int:
    data = _dataset_dir(args)
    out = _out_dir(args.out, args.force)
    model, cfg, _ = _checkpoint(args)
    splits = _load_splits(data)
    samples = [s for name in (args.splits or SPLITS) for s in splits[name]]
    res = evaluate(model, samples, cfg)
    masks = np.array([s.record.ego_explanations for s in samples], dtype=np.float64)
    emb = anchored_embedding(res.pooled, masks, args.perplexity, args.iterations, args.seed)
    n = write_embedding(out / "tsne.csv", emb, [s.record.sample_id for s in samples])
    config = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": _file_sha(args.checkpoint), "perplexity": args.perplexity,
              "iterations": args.iterations, "splits": list(args.splits or SPLITS)}
    _write_manifest(out, "export-tsne", argv, config, args.seed, ["tsne.csv"], data)
    print(f"wrote {n} rows ({len(samples)} samples, {int(emb.present.sum())} anchors)")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    """Re-run the command recorded in a manifest into a fresh directory."""
    doc = json.loads(Path(args.manifest).read_text())
    old = list(doc["argv"])
    if "--out" not in old:
        raise DataError("manifest argv has no --out")
    old[old.index("--out") + 1] = str(args.out)
    ds = doc.get("dataset")
    if ds and dataset_checksum(ds["path"]) != ds["checksum"]:
        raise DataError(f"dataset {ds['path']} no longer matches the recorded checksum")
    return main(old)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcbm", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[verbose], help="write a synthetic planted-concept dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--shape", type=_parse_shape, default=(32, 64, 64, 3), help="T,H,W,C")
    g.add_argument("--frequency-profile", default="zipf", help="zipf[:a], uniform, or 7 comma-separated weights")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.2, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    def common(sp, config=True):
        sp.add_argument("--dataset-dir", help=f"defaults to ${DATASET_ENV}")
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true")
        if config:
            sp.add_argument("--config", help="JSON training config; flags override it")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lambda", dest="lam", type=float)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--k", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--gaze-variant")
            sp.add_argument("--severity", type=int)

    t = sub.add_parser("train", parents=[verbose], help="train a model and write checkpoint + epoch log")
    common(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", parents=[verbose], help="train/test once per value of one ablation axis")
    common(a)
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--values", required=True, help="comma-separated")
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", parents=[verbose], help="score a checkpoint on one split")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--severity", type=int)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-tsne", parents=[verbose], help="label-anchored t-SNE of pooled merged tokens")
    common(x, config=False)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--perplexity", type=float, default=30.0)
    x.add_argument("--iterations", type=int, default=1000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--splits", nargs="+", choices=SPLITS)
    x.set_defaults(func=cmd_export_tsne)

    r = sub.add_parser("replay", parents=[verbose], help="re-run the command recorded in a run manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"vcbm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DomainError) as exc:
        print(f"vcbm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AnnotationError, FileNotFoundError) as exc:
        print(f"vcbm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"vcbm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
