"""Command-line entry point: train, eval, infer, gradcheck, synth.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    DataError,
    DatasetSpec,
    FundusSample,
    _read_raster,
    _to_gray,
    drive_split,
    extract_patches,
    generate_synthetic,
    load_drive_layout,
    load_mask,
    save_mask,
    stack,
    write_drive_layout,
)
from .gradsuite import CASE_NAMES, run_suite
from .metrics import format_table, metrics_report
from .network import VARIANTS, ModelConfig, build_model, load_model, param_count
from .tensor import ConfigurationError, ContractError, ShapeError
from .training import TrainConfig, TrainingAborted, evaluate, predict_proba, train, write_jsonl

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gccunet")

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
DATA_KEYS = {f.name for f in dataclasses.fields(DatasetSpec)} | {"val_count", "test_count"}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int
    version: str = __version__
    model_config: Optional[dict] = None
    train_config: Optional[dict] = None
    dataset: Optional[dict] = None
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------- config merge

def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or any(isinstance(v, (dict, list)) for v in cfg.values()):
        raise UsageError(f"config file {p} must be a flat key-value object")
    unknown = sorted(set(cfg) - MODEL_KEYS - TRAIN_KEYS - DATA_KEYS)
    if unknown:
        raise UsageError(f"config file {p} has unknown keys: {unknown}")
    return cfg


FLAG_TO_KEY = {
    "epochs": "max_epochs", "batch_size": "batch_size", "lr": "learning_rate", "patience": "patience",
    "max_seconds": "max_seconds", "clip_norm": "clip_norm", "variant": "variant", "depth": "depth",
    "base_channels": "base_channels", "msgf_mode": "msgf_mode", "fusion_mode": "fusion_mode",
    "count": "count", "size": "size", "val_count": "val_count", "test_count": "test_count",
    "patch_size": "patch_size", "patch_stride": "patch_stride", "routing_iterations": "routing_iterations",
}


def _merged(args) -> dict:
    cfg = _load_config_file(getattr(args, "config", None))
    for flag, key in FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    for flag in ("no_bga", "no_msgf"):
        if getattr(args, flag, False):
            cfg["use_" + flag[3:]] = False
    cfg["seed"] = args.seed
    return cfg


def _configs(cfg: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    model_cfg = ModelConfig.from_dict({k: v for k, v in cfg.items() if k in MODEL_KEYS})
    train_keys = {k: v for k, v in cfg.items() if k in TRAIN_KEYS}
    # a short --epochs run should not trip over the default patience
    if "patience" not in train_keys and "max_epochs" in train_keys:
        train_keys["patience"] = min(TrainConfig.patience, train_keys["max_epochs"])
    train_cfg = TrainConfig.from_dict(train_keys)
    data_cfg = {k: v for k, v in cfg.items() if k in DATA_KEYS}
    return model_cfg, train_cfg, data_cfg


# ----------------------------------------------------------------- datasets

def _parse_data(spec: Optional[str], synthetic: bool) -> tuple[str, Optional[str]]:
    if spec and synthetic:
        raise UsageError("use either --synthetic or --data, not both")
    if not spec:
        return "synthetic", None
    kind, _, path = spec.partition(":")
    if kind != "drive" or not path:
        raise UsageError(f"--data must look like drive:<path>, got {spec!r}")
    if not Path(path).is_dir():
        raise UsageError(f"data root {path} does not exist")
    return "drive", path


def _datasets(source: str, path: Optional[str], data_cfg: dict, seed: int, depth: int):
    """Return (train, val, test) sample lists plus the dataset description."""
    size = int(data_cfg.get("size", 48))
    desc = {"source": source, "path": path, "seed": seed}
    if source == "synthetic":
        count = int(data_cfg.get("count", 200))
        n_val = int(data_cfg.get("val_count", 50))
        n_test = int(data_cfg.get("test_count", 50))
        if size % 2 ** depth:
            raise ConfigurationError(f"synthetic size {size} must be divisible by {2 ** depth}")
        desc.update(count=count, val_count=n_val, test_count=n_test, size=size)
        return (generate_synthetic(seed, count, size), generate_synthetic(seed + 1, n_val, size),
                generate_synthetic(seed + 2, n_test, size), desc)
    samples = load_drive_layout(path)
    train_imgs, test_imgs = drive_split(samples)
    ps = int(data_cfg.get("patch_size", 48))
    stride = int(data_cfg.get("patch_stride", 24))
    DatasetSpec(source="drive", path=path, patch_size=ps, patch_stride=stride).validate(depth)
    patches = [p for s in train_imgs for p in extract_patches(s, ps, stride)]
    n_val = max(1, len(patches) // 10)
    desc.update(patch_size=ps, patch_stride=stride, train_images=len(train_imgs), test_images=len(test_imgs))
    return patches[:-n_val], patches[-n_val:], test_imgs, desc


def _drive_eval_samples(path: str, split: str) -> list[FundusSample]:
    samples = load_drive_layout(path)
    if split == "all":
        return samples
    train_imgs, test_imgs = drive_split(samples)
    return train_imgs if split == "train" else test_imgs


def _padded_predict(model, samples: list[FundusSample]) -> np.ndarray:
    """Whole-image prediction for extents not divisible by 2^depth: reflect-pad, predict, crop."""
    f = 2 ** model.config.depth
    out = []
    for s in samples:
        H, W = s.shape
        ph, pw = (-H) % f, (-W) % f
        img = np.pad(s.image, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else s.image
        out.append(predict_proba(model, img[None], 1)[0, :H, :W])
    return np.stack(out)


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _merged(args)
    model_cfg, train_cfg, data_cfg = _configs(cfg)
    source, path = _parse_data(args.data, args.synthetic)
    out = Path(args.out)
    train_cfg.checkpoint_dir = str(out)
    train_set, val_set, _, desc = _datasets(source, path, data_cfg, args.seed, model_cfg.depth)
    model = build_model(model_cfg)
    log.info("training %s (%d parameters) on %d samples", model_cfg.variant, param_count(model), len(train_set))
    result = train(model, train_set, val_set, train_cfg)
    ckpt = out / "best.gccw"
    manifest = RunManifest(
        "train", list(args.argv), args.seed, model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
        dataset=desc, artifacts={"checkpoint": str(ckpt), "checkpoint_sha256": _sha256(ckpt),
                                 "history": str(out / "history.jsonl")},
        timings={"total_seconds": time.perf_counter() - t0})
    manifest.write(out)
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}, "
          f"stopped by {result.stop_reason}; checkpoint {ckpt}")
    return EXIT_OK


def _report_dict(rep) -> dict:
    rep.check()
    return rep.to_dict()


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.variants:
        return _eval_variants(args, out, t0)
    source, path = _parse_data(args.data, args.synthetic)
    cfg = _merged(args)
    model_cfg = None
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint {args.checkpoint} does not exist")
        model = load_model(args.checkpoint)
        model_cfg = model.config
    elif not args.predictions:
        raise UsageError("eval needs --checkpoint, --predictions or --variants")
    if source == "synthetic":
        depth = model_cfg.depth if model_cfg else 3
        _, _, samples, desc = _datasets(source, None, cfg, args.seed, depth)
    else:
        samples = _drive_eval_samples(path, args.split)
        desc = {"source": source, "path": path, "split": args.split}
    _, labels, fovs = stack(samples) if len({s.shape for s in samples}) == 1 else (None, None, None)
    if args.predictions:
        scores = np.stack([_read_prediction(Path(args.predictions), s.name) for s in samples])
    else:
        if model_cfg.in_channels != samples[0].image.shape[0]:
            raise UsageError(f"checkpoint expects {model_cfg.in_channels} channels, data has "
                             f"{samples[0].image.shape[0]}")
        scores = _padded_predict(model, samples)
    if labels is None:
        labels = np.stack([s.label for s in samples])
        fovs = np.stack([s.fov for s in samples])
    rep = metrics_report(scores, labels, fovs, args.threshold)
    report = {"summary": _report_dict(rep), "threshold": args.threshold}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    per_sample = []
    for s, sc in zip(samples, scores):
        r = metrics_report(sc, s.label, s.fov, args.threshold).to_dict()
        per_sample.append({"sample": s.name, **r})
    write_jsonl(per_sample, out / "samples.jsonl")
    RunManifest("eval", list(args.argv), args.seed, model_config=model_cfg.to_dict() if model_cfg else None,
                dataset=desc, artifacts={"report": str(out / "report.json"),
                                         "checkpoint": args.checkpoint, "predictions": args.predictions},
                timings={"total_seconds": time.perf_counter() - t0}).write(out)
    print(format_table({"eval": rep}))
    return EXIT_OK


def _read_prediction(folder: Path, name: str) -> np.ndarray:
    npy, png = folder / f"{name}_prob.npy", folder / f"{name}_prob.png"
    if npy.is_file():
        return np.load(npy)
    if png.is_file():
        return load_mask(png)
    mask = folder / f"{name}.png"
    if mask.is_file():
        return load_mask(mask)
    raise UsageError(f"no prediction for sample {name!r} in {folder}")


def _eval_variants(args, out: Path, t0: float) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = sorted(set(variants) - set(VARIANTS))
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    source, path = _parse_data(args.data, args.synthetic)
    cfg = _merged(args)
    rows, records = {}, {}
    for v in variants:
        model_cfg, train_cfg, data_cfg = _configs({**cfg, "variant": v})
        train_set, val_set, test_set, desc = _datasets(source, path, data_cfg, args.seed, model_cfg.depth)
        train_cfg.checkpoint_dir = str(out / v)
        model = build_model(model_cfg)
        train(model, train_set, val_set, train_cfg)
        rep = evaluate(model, test_set, args.threshold) if source == "synthetic" else metrics_report(
            _padded_predict(model, test_set), *stack(test_set)[1:], args.threshold)
        rows[v] = rep
        records[v] = {"params": param_count(model), **_report_dict(rep)}
    # rows keep the order the variants were requested in
    (out / "variants.json").write_text(json.dumps(records, indent=2))
    RunManifest("eval", list(args.argv), args.seed, train_config=train_cfg.to_dict(), dataset=desc,
                artifacts={"report": str(out / "variants.json")},
                timings={"total_seconds": time.perf_counter() - t0}).write(out)
    print(format_table(rows))
    return EXIT_OK


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in
                       (".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp", ".npy"))
        if not files:
            raise UsageError(f"no images in {path}")
        return files
    if not path.is_file():
        raise UsageError(f"input {path} does not exist")
    return [path]


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f = 2 ** model.config.depth
    written = {}
    for src in _input_images(Path(args.input)):
        img = np.load(src) if src.suffix == ".npy" else _to_gray(_read_raster(src))
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        H, W = img.shape[1:]
        if H % f or W % f:
            raise UsageError(f"{src}: extents {H}x{W} are not divisible by {f}; "
                             f"pad by {(-H) % f} rows and {(-W) % f} columns")
        prob = predict_proba(model, img[None], 1)[0]
        np.save(out / f"{src.stem}_prob.npy", prob)
        save_mask(prob, out / f"{src.stem}_prob.png")
        save_mask((prob >= args.threshold).astype(np.float64), out / f"{src.stem}_mask.png")
        written[src.stem] = [f"{src.stem}_prob.npy", f"{src.stem}_prob.png", f"{src.stem}_mask.png"]
    RunManifest("infer", list(args.argv), args.seed, model_config=model.config.to_dict(),
                artifacts={"checkpoint": args.checkpoint, "outputs": written},
                timings={"total_seconds": time.perf_counter() - t0}).write(out)
    print(f"wrote {len(written)} prediction(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = [n.strip() for n in args.op.split(",")] if args.op else None
    if names and set(names) - set(CASE_NAMES):
        raise UsageError(f"unknown op(s) {sorted(set(names) - set(CASE_NAMES))}; available: {CASE_NAMES}")
    results = run_suite(names, trials=args.trials, seed=args.seed)
    print(f"{'case':<24}{'kind':<7}{'tol':>8}{'max_rel_err':>14}{'coords':>8}{'kinks':>7}  status")
    for r in results:
        status = "pass" if r.passed else "FAIL"
        extra = f"  excluded={','.join(r.excluded_ops)}" if r.excluded_ops else ""
        print(f"{r.name:<24}{r.kind:<7}{r.tol:>8.0e}{r.max_rel_error:>14.3e}{r.n_checked:>8}{r.n_kinks:>7}  "
              f"{status}{extra}")
    failing = [r.name for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        RunManifest("gradcheck", list(args.argv), args.seed,
                    artifacts={"results": [dataclasses.asdict(r) for r in results]}).write(out)
    if failing:
        print("failing: " + ", ".join(failing))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = generate_synthetic(args.seed, args.count, args.size)
    out = Path(args.out)
    write_drive_layout(samples, out)
    RunManifest("synth", list(args.argv), args.seed,
                dataset={"source": "synthetic", "count": args.count, "size": args.size},
                artifacts={"root": str(out)}).write(out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--verbose", "-v", action="store_true")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file with model/train/data keys; flags override it")
    p.add_argument("--synthetic", action="store_true", help="use the seeded synthetic corpus (default)")
    p.add_argument("--data", help="dataset as drive:<root> with images/, labels/, masks/")
    p.add_argument("--epochs", type=int, help="maximum epochs (default 60)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 32)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 10)")
    p.add_argument("--max-seconds", type=float, help="wall-clock training budget")
    p.add_argument("--clip-norm", type=float, help="global gradient-norm clip (default 1.0)")
    p.add_argument("--variant", choices=VARIANTS, help="network variant (default fusion)")
    p.add_argument("--depth", type=int, help="encoder stages (default 3)")
    p.add_argument("--base-channels", type=int, help="width of the first stage (default 16)")
    p.add_argument("--routing-iterations", type=int, help="dynamic routing iterations (default 3)")
    p.add_argument("--msgf-mode", choices=("shared", "individual", "concat"))
    p.add_argument("--fusion-mode", choices=("serial", "parallel"))
    p.add_argument("--no-bga", action="store_true", help="drop the bottleneck graph attention")
    p.add_argument("--no-msgf", action="store_true", help="drop multi-scale graph fusion")
    p.add_argument("--count", type=int, help="synthetic training samples (default 200)")
    p.add_argument("--val-count", type=int, help="synthetic validation samples (default 50)")
    p.add_argument("--test-count", type=int, help="synthetic test samples (default 50)")
    p.add_argument("--size", type=int, help="synthetic sample extent (default 48)")
    p.add_argument("--patch-size", type=int, help="DRIVE patch size (default 48)")
    p.add_argument("--patch-stride", type=int, help="DRIVE patch stride (default 24)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gccunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and manifest")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--out", default="runs/train", help="run directory (default runs/train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, saved predictions, or a variant sweep")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--checkpoint", help="weights written by train")
    p.add_argument("--predictions", help="folder of <name>_prob.npy / <name>_prob.png / <name>.png")
    p.add_argument("--variants", help="comma-separated variants to train and compare")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="DRIVE split (default test)")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")
    p.add_argument("--out", default="runs/eval", help="report directory (default runs/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write probability and binary masks for images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or folder")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default="runs/infer")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every operator and block")
    _add_common(p)
    p.add_argument("--op", help=f"comma-separated subset of: {', '.join(CASE_NAMES)}")
    p.add_argument("--trials", type=int, default=50, help="random trials per case (default 50)")
    p.add_argument("--out", help="optional directory for a manifest with the results")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic corpus in the DRIVE layout")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"numerical abort: {exc} (epoch {exc.epoch}, batch {exc.batch}, parameter {exc.parameter})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, ContractError, ShapeError, DataError, FileNotFoundError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
