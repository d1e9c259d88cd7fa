"""Command-line entry point: ``dualprompt <command> ...``.

Exit codes: 0 success, 2 validation error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_digest
from .data import (FormatError, ZslSplit, load_dataset, make_catalog, make_zsl_split, mask_labels,
                   relabel_manifest, restrict_labels_to_seen, save_dataset, synth_dataset)
from .encoders import ToyEncoders
from .metrics import EvalMode, IncompatibleCheckpointError, evaluate
from .prompts import CheckpointError, load_checkpoint, save_checkpoint
from .scoring import ClassifierConfig, RegionLogits, export_attention_maps, write_grid_csv, write_pgm
from .train import TrainingAborted, bank_digest, train, unit_regions, _TextPath

log = logging.getLogger("dualprompt")

EXIT_OK, EXIT_VALIDATION, EXIT_ABORT = 0, 2, 3
OUT_ENV = "DUALPROMPT_OUT"


class ValidationError(Exception):
    pass


def _default_out(name: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, ".")) / name)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}")
    return int(parts[0]), int(parts[1])


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- config helpers --------------------------------------------------------

def load_run_config(path: str | None, overrides: dict) -> tuple[RunConfig, bool]:
    """Read the JSON config (or defaults) and apply flag overrides; flags win.

    Returns the config and whether the prompt dim was set explicitly.
    """
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    explicit_dim = "dim" in raw.get("train", {}).get("prompt", {})
    train_raw = dict(raw.get("train", {}))
    train_raw.update({k: v for k, v in overrides.items() if v is not None})
    raw = {**raw, "train": train_raw}
    return RunConfig.from_dict(raw), explicit_dim


def _fit_prompt_dim(cfg: RunConfig, dim: int, explicit: bool) -> RunConfig:
    if cfg.train.prompt.dim == dim:
        return cfg
    if explicit:
        raise ValidationError(f"config prompt dim {cfg.train.prompt.dim} does not match data token dim {dim}")
    prompt = dataclasses.replace(cfg.train.prompt, dim=dim)
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, prompt=prompt))


def build_encoders(cfg: RunConfig, catalog, visual_dim: int) -> ToyEncoders:
    e = cfg.encoder
    return ToyEncoders.build(e.mode, catalog.dim, visual_dim=visual_dim, emb_dim=e.emb_dim,
                             text_dim=e.text_dim, seed=e.seed)


def _load_split(path) -> ZslSplit:
    return ZslSplit.from_dict(json.loads(Path(path).read_text()))


def _run_meta(cfg: RunConfig, enc: ToyEncoders, catalog, split=None) -> dict:
    d = cfg.to_dict()
    return {"config": d, "config_digest": config_digest(d), "prompt": d["train"]["prompt"],
            "classifier": d["train"]["classifier"], "encoder": enc.spec(), "encoder_digest": enc.digest(),
            "classes": list(catalog.names), "split": split.to_dict() if split else None}


def _checkpoint_context(path, expect_mode=None, allow_mode_change=False):
    bank, meta = load_checkpoint(path, expect_mode=expect_mode, allow_mode_change=allow_mode_change)
    if "encoder" not in meta or "classifier" not in meta:
        raise ValidationError(f"{path}: checkpoint trailer lacks encoder/classifier settings")
    enc = ToyEncoders.from_spec(meta["encoder"])
    if enc.digest() != meta.get("encoder_digest", enc.digest()):
        raise ValidationError(f"{path}: rebuilt encoder parameters do not match the recorded digest")
    classifier = ClassifierConfig(**meta["classifier"])
    return bank, meta, enc, classifier


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.images < 1:
        raise ValidationError("--images must be >= 1")
    if args.classes < 1:
        raise ValidationError("--classes must be >= 1")
    catalog = make_catalog(args.classes, args.dim, args.catalog_seed)
    ds = synth_dataset(args.images, catalog, args.grid, (args.labels_min, args.labels_max), args.sigma,
                       args.seed, id_prefix=args.id_prefix)
    out = Path(args.out or _default_out("synth"))
    manifest = out / "manifest.json"
    save_dataset(ds, manifest)
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
                if k not in ("func", "out", "verbose")}
    meta = json.loads(manifest.read_text())
    meta["config_digest"] = config_digest(settings)
    meta["generator"] = settings
    manifest.write_text(json.dumps(meta, indent=1) + "\n")
    print(f"synth: {len(ds)} images, {len(catalog)} classes, grid {args.grid[0]}x{args.grid[1]}, "
          f"dim {args.dim}, {int((ds.labels == 1).sum())} positives -> {manifest} "
          f"(sha256 {_file_digest(manifest)[:16]})")
    return EXIT_OK


def cmd_mask(args) -> int:
    if not 0.0 < args.keep <= 1.0:
        raise ValidationError(f"--keep must lie in (0, 1], got {args.keep}")
    ds = load_dataset(args.inp)
    masked = mask_labels(ds.labels, args.keep, args.seed)
    relabel_manifest(args.inp, args.out, masked)
    _stamp(args.out, {"keep": args.keep, "seed": args.seed, "source": str(args.inp)})
    print(f"mask: kept {int((masked != 0).sum())} of {masked.size} label cells -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_dataset(args.inp)
    split = make_zsl_split(ds.catalog, args.unseen)
    d = split.to_dict()
    d["config_digest"] = config_digest({"unseen": sorted(split.unseen), "source": str(args.inp)})
    Path(args.out).write_text(json.dumps(d, indent=1) + "\n")
    if args.labels_out:
        relabel_manifest(args.inp, args.labels_out, restrict_labels_to_seen(ds.labels, split))
    print(f"split: {len(split.seen)} seen, {len(split.unseen)} unseen -> {args.out}")
    return EXIT_OK


def _stamp(manifest_path, settings: dict) -> None:
    p = Path(manifest_path)
    m = json.loads(p.read_text())
    m["config_digest"] = config_digest(settings)
    p.write_text(json.dumps(m, indent=1) + "\n")


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "lr0": args.lr, "seed": args.seed, "batch_size": args.batch_size}
    if args.strict:
        overrides["strict_deterministic"] = True
    cfg, explicit_dim = load_run_config(args.config, overrides)
    data_path = args.data or cfg.paths.data
    if not data_path:
        raise ValidationError("no training data given (--data or paths.data)")
    if not Path(data_path).exists():
        raise ValidationError(f"training data {data_path} does not exist")
    ds = load_dataset(data_path)
    cfg = _fit_prompt_dim(cfg, ds.catalog.dim, explicit_dim)
    split_path = args.split or cfg.paths.split
    split = _load_split(split_path) if split_path else None
    enc = build_encoders(cfg, ds.catalog, ds.images[0].feature_map.shape[2])
    out = args.out_checkpoint or _default_out("prompts.dcpt")
    meta = _run_meta(cfg, enc, ds.catalog, split)
    try:
        bank, history = train(cfg.train, ds, enc, split=split)
    except TrainingAborted as e:
        last = f"{out}.lastgood"
        save_checkpoint(last, e.last_good, {**meta, "aborted": True})
        diag = {**e.diagnostic(), "last_good_checkpoint": last}
        print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_ABORT
    meta["final_mean_loss"] = history.mean_loss[-1]
    meta["parameter_digest"] = bank_digest(bank)
    save_checkpoint(out, bank, meta)
    hist = args.history or _default_out("history.csv")
    history.write_csv(hist, meta["config_digest"])
    print(f"train: {cfg.train.epochs} epochs, loss {history.mean_loss[0]:.6f} -> {history.mean_loss[-1]:.6f}; "
          f"checkpoint {out}, history {hist}")
    return EXIT_OK


_MODE_ALIASES = {"partial": "partial_label", "partial_label": "partial_label", "zsl": "zsl", "gzsl": "gzsl"}


def cmd_eval(args) -> int:
    kind = _MODE_ALIASES[args.mode]
    expect = "shared" if kind in ("zsl", "gzsl") else None
    try:
        bank, meta, enc, classifier = _checkpoint_context(args.checkpoint, expect_mode=expect,
                                                          allow_mode_change=args.allow_mode_change)
    except CheckpointError as e:
        raise IncompatibleCheckpointError(str(e)) from None
    ds = load_dataset(args.data)
    split = None
    if kind != "partial_label":
        if args.split:
            split = _load_split(args.split)
        elif meta.get("split"):
            split = ZslSplit.from_dict(meta["split"])
        else:
            raise ValidationError(f"--mode {args.mode} needs --split (none recorded in the checkpoint)")
    mode = EvalMode(kind, tuple(args.topk), split)
    report = evaluate(bank, ds.catalog, enc, ds, mode, classifier)
    report.meta = {"checkpoint_sha256": _file_digest(args.checkpoint), "config_digest": meta.get("config_digest"),
                   "data": str(args.data), "topk": list(args.topk)}
    out = args.report or _default_out("report.json")
    report.write_json(out)
    csv_path = args.csv or str(Path(out).with_suffix(".csv"))
    report.write_csv_row(csv_path, {"config_digest": meta.get("config_digest")})
    k_desc = " ".join(f"F1@{k}={v['F1']:.4f}" for k, v in sorted(report.topk.items()))
    print(f"eval[{kind}]: mAP={report.mAP:.4f} CF1={report.CF1:.4f} OF1={report.OF1:.4f} {k_desc} -> {out}")
    return EXIT_OK


def cmd_attmap(args) -> int:
    bank, meta, enc, classifier = _checkpoint_context(args.checkpoint)
    if classifier.aggregation != "softmax_weighted":
        classifier = dataclasses.replace(classifier, aggregation="softmax_weighted")
    ds = load_dataset(args.data)
    i = ds.find(args.image_id)
    cls = int(args.cls) if args.cls.isdigit() else args.cls
    m = ds.catalog.index(cls)
    fm = ds.images[i].feature_map
    H, W = fm.shape[:2]
    text = _TextPath(bank, ds.catalog.token_embeddings, enc)
    regions = unit_regions(enc, fm[None])[0]
    rl = RegionLogits(regions @ text.feats["+"].T, regions @ text.feats["-"].T)
    grid = export_attention_maps(rl, classifier, m, (H, W))
    out = Path(args.out or _default_out(f"attmap_{args.image_id}_{m}"))
    write_grid_csv(out.with_suffix(".csv"), grid)
    write_pgm(out.with_suffix(".pgm"), grid)
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    print(f"attmap: image {args.image_id} class {ds.catalog.names[m]}: peak weight {grid.max():.4f} "
          f"at cell ({r}, {c}) -> {out.with_suffix('.csv')}, {out.with_suffix('.pgm')}")
    return EXIT_OK


def _trend(rows: list[dict], metric: str = "mAP", tol: float = 0.02) -> str:
    by_value: dict[float, list[float]] = {}
    for r in rows:
        by_value.setdefault(float(r["value"]), []).append(float(r[metric]))
    means = [np.mean(by_value[v]) for v in sorted(by_value)]
    ok = all(b >= a - tol for a, b in zip(means, means[1:]))
    return "nondecreasing" if ok else "not_monotone"


def cmd_sweep(args) -> int:
    if (args.keep_list is None) == (args.nctx_list is None):
        raise ValidationError("give exactly one of --keep-list or --nctx-list")
    variable = "keep" if args.keep_list is not None else "n_ctx"
    values = args.keep_list if variable == "keep" else args.nctx_list
    if variable == "keep" and any(not 0 < v <= 1 for v in values):
        raise ValidationError("--keep-list values must lie in (0, 1]")
    cfg, explicit_dim = load_run_config(args.config, {"epochs": args.epochs, "lr0": args.lr})
    train_ds = load_dataset(args.data)
    test_ds = load_dataset(args.test_data)
    cfg = _fit_prompt_dim(cfg, train_ds.catalog.dim, explicit_dim)
    enc = build_encoders(cfg, train_ds.catalog, train_ds.images[0].feature_map.shape[2])
    split = _load_split(args.split) if args.split else None
    kind = "zsl" if split is not None else "partial_label"
    mode = EvalMode(kind, tuple(args.topk or cfg.eval.topk), split)

    out = Path(args.out or _default_out("sweep.csv"))
    rows: list[dict] = []
    if out.exists() and out.stat().st_size:
        with open(out, newline="") as f:
            rows = list(csv.DictReader(f))
    done = {(r["variable"], float(r["value"]), int(r["repeat"])) for r in rows}

    for value in values:
        for rep in range(args.repeat):
            if (variable, float(value), rep) in done:
                log.info("skip %s=%s repeat %d (already in %s)", variable, value, rep, out)
                continue
            tc = dataclasses.replace(cfg.train, seed=cfg.train.seed + rep)
            ds = train_ds
            if variable == "keep":
                if value < 1.0:
                    ds = train_ds.with_labels(mask_labels(train_ds.labels, value, args.mask_seed + rep))
            else:
                tc = dataclasses.replace(tc, prompt=dataclasses.replace(tc.prompt, n_ctx_pos=int(value),
                                                                        n_ctx_neg=int(value)))
            bank, hist = train(tc, ds, enc, split=split)
            rep_ = evaluate(bank, test_ds.catalog, enc, test_ds, mode, tc.classifier)
            row = {"variable": variable, "value": value, "repeat": rep,
                   "config_digest": config_digest({**dataclasses.replace(cfg, train=tc).to_dict(),
                                                   "sweep": {variable: value, "mask_seed": args.mask_seed + rep}}),
                   "final_loss": hist.mean_loss[-1], **rep_.flat()}
            rows.append({k: (repr(v) if isinstance(v, float) else str(v)) for k, v in row.items()})
            _write_sweep(out, rows)
            print(f"sweep: {variable}={value} repeat {rep}: mAP={rep_.mAP:.4f}")
    _write_sweep(out, rows)
    print(f"sweep: {len(rows)} rows, trend {_trend(rows) if rows else 'n/a'} -> {out}")
    return EXIT_OK


def _write_sweep(path: Path, rows: list[dict]) -> None:
    rows = sorted(rows, key=lambda r: (float(r["value"]), int(r["repeat"])))
    trend = _trend(rows)
    fields = [k for k in rows[0] if k != "trend"] + ["trend"]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**{k: r.get(k, "") for k in fields}, "trend": trend})
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualprompt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic planted-prototype dataset")
    s.add_argument("--classes", type=int, default=20)
    s.add_argument("--images", type=int, default=2000)
    s.add_argument("--grid", type=_grid, default=(8, 8))
    s.add_argument("--labels-min", type=int, default=1)
    s.add_argument("--labels-max", type=int, default=3)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--catalog-seed", type=int, default=0,
                   help="seed for class prototypes; keep equal across train/test sets")
    s.add_argument("--id-prefix", default="img")
    s.add_argument("--out", help="output directory (manifest.json + features/)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mask", help="randomly hide labels, keeping a fraction of cells")
    s.add_argument("--keep", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("split", help="define unseen classes for zero-shot runs")
    s.add_argument("--unseen", type=_int_list, required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="split JSON path")
    s.add_argument("--labels-out", help="also write a manifest with unseen labels zeroed")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="optimize prompt contexts")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--split")
    s.add_argument("--out-checkpoint")
    s.add_argument("--history")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--strict", action="store_true", help="strict deterministic mode (no wall-clock fields)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=sorted(_MODE_ALIASES), default="partial")
    s.add_argument("--split")
    s.add_argument("--topk", type=_int_list, default=[3, 5])
    s.add_argument("--report")
    s.add_argument("--csv")
    s.add_argument("--allow-mode-change", action="store_true",
                   help="let a class_specific checkpoint be averaged into shared prompts")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attmap", help="export a class-specific spatial attention map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--image-id", required=True)
    s.add_argument("--class", dest="cls", required=True, help="class name or index")
    s.add_argument("--out", help="output path prefix (.csv and .pgm are appended)")
    s.set_defaults(func=cmd_attmap)

    s = sub.add_parser("sweep", help="train+eval over label fractions or context lengths")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--test-data", required=True)
    s.add_argument("--split")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--keep-list", type=_float_list)
    g.add_argument("--nctx-list", type=_int_list)
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--mask-seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--topk", type=_int_list, help="defaults to eval.topk from the config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, FormatError, CheckpointError, IncompatibleCheckpointError,
            FileNotFoundError, KeyError, IndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingAborted, RuntimeError, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
