"""Command-line entry point: ``relaynet {train,segment,eval,gradcheck,phantom}``."""

import argparse
import contextlib
import logging
import sys
import time
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, data, gradcheck, metrics, model, training
from .config import PRESETS, ConfigError, resolve
from .optim import NumericError
from .tensor import FormatError, write_rtn1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# RGB per class id; fixed so overlays from different runs are comparable.
PALETTE = np.array([
    [0, 0, 0],        # RaR
    [255, 0, 0],      # ILM
    [255, 165, 0],    # NFL-IPL
    [255, 255, 0],    # INL
    [0, 200, 0],      # OPL
    [0, 255, 255],    # ONL-ISM
    [0, 90, 255],     # ISE
    [160, 0, 255],    # OS-RPE
    [90, 90, 90],     # RbR
    [255, 0, 200],    # Fluid
], dtype=np.uint8)
OVERLAY_ALPHA = 0.45
RUN_CONFIG = "run_config.txt"

log = logging.getLogger("relaynet")


def palette_legend() -> str:
    lines = ["class_id\tname\tr\tg\tb"]
    for i, (name, rgb) in enumerate(zip(metrics.CLASS_NAMES, PALETTE)):
        lines.append(f"{i}\t{name}\t{rgb[0]}\t{rgb[1]}\t{rgb[2]}")
    return "\n".join(lines) + "\n"


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the class colours over a grey B-scan; returns (H, W, 3) uint8."""
    grey = np.repeat(np.clip(image, 0, 1)[..., None] * 255.0, 3, axis=2)
    mixed = (1 - alpha) * grey + alpha * PALETTE[labels].astype(np.float64)
    return np.round(mixed).astype(np.uint8)


def _echo(out_dir: Path, values: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k}={v}\n" for k, v in values.items())
    (out_dir / RUN_CONFIG).write_text(text)


def _threads(deterministic: bool):
    return threadpool_limits(limits=1) if deterministic else contextlib.nullcontext()


# ------------------------------------------------------------------- train

_TRAIN_OVERRIDES = (
    "epochs", "max_steps", "batch_size", "slice_width", "seed", "base_lr", "depth",
    "channels", "skip_mode", "checkpoint_every", "data", "out",
)


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in _TRAIN_OVERRIDES}
    if args.no_augment:
        overrides["augment"] = False
    cfg = resolve(preset=args.preset, config_file=args.config, **overrides)
    if not cfg.data:
        raise ConfigError("no dataset given (--data or data= in the config file)")
    out = Path(cfg.out)
    _echo(out, {**asdict(cfg), "deterministic": args.deterministic})
    scans = data.load_dataset(cfg.data)
    log.info("loaded %d scans from %s", len(scans), cfg.data)
    mc = cfg.model_config()
    params = model.init_params(mc, cfg.seed)
    log_lines = ["step\tepoch\tlr\tloss"]
    epoch_lines = ["epoch\tlr\tmean_loss"]

    def on_epoch_end(epoch, result):
        epoch_lines.append(f"{epoch}\t{result.history[-1].lr:.6g}\t{result.epoch_losses[-1]:.6f}")
        print(f"epoch {epoch:4d}  lr {result.history[-1].lr:.2e}  mean loss {result.epoch_losses[-1]:.5f}")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            model.save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}", params, mc,
                                  seed=cfg.seed, epoch=epoch + 1, step=result.steps)

    def write_logs(history):
        lines = log_lines + [f"{r.step}\t{r.epoch}\t{r.lr:.6g}\t{r.loss:.6f}" for r in history]
        (out / "train_log.tsv").write_text("\n".join(lines) + "\n")
        (out / "epoch_log.tsv").write_text("\n".join(epoch_lines) + "\n")

    try:
        with _threads(args.deterministic):
            progress = training.fit(scans, cfg, params=params, on_epoch_end=on_epoch_end)
    except NumericError as exc:
        # the failing step never reached the optimizer, so params are the last good state
        model.save_checkpoint(out / "checkpoint", params, mc, seed=cfg.seed, aborted="numeric")
        write_logs(getattr(exc, "result", training.TrainResult(params, mc)).history)
        print(f"error: {exc}; last good weights saved to {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_NUMERIC
    model.save_checkpoint(out / "checkpoint", params, mc, seed=cfg.seed, step=progress.steps)
    write_logs(progress.history)
    print(f"trained {progress.steps} steps; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


# ----------------------------------------------------------------- segment

def cmd_segment(args) -> int:
    try:
        params, mc, _ = model.load_checkpoint(args.checkpoint)
    except (FileNotFoundError, KeyError, FormatError) as exc:
        raise data.DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    scans = data.load_dataset(args.data, require_labels=False)
    entries = data.read_manifest(args.data)
    out = Path(args.out)
    _echo(out, {"command": "segment", "checkpoint": args.checkpoint, "data": args.data,
                "out": args.out, "save_probs": args.save_probs, "overlay": not args.no_overlay,
                "deterministic": args.deterministic})
    legend = palette_legend()
    (out / "palette.tsv").write_text(legend)
    print("palette (class_id name r g b):")
    print(legend, end="")
    lines = [data.MANIFEST_HEADER]
    with _threads(args.deterministic):
        for scan, entry in zip(scans, entries):
            stem = data.scan_stem(scan)
            t0 = time.perf_counter()
            labels, probs = model.predict(params, mc, scan.image)
            elapsed = time.perf_counter() - t0
            label_name = f"{stem}_labels.pgm"
            data.write_pgm(out / label_name, labels[0].astype(np.uint8))
            if not args.no_overlay:
                data.write_ppm(out / f"{stem}_overlay.ppm", overlay(scan.image[0, 0], labels[0]))
            if args.save_probs:
                write_rtn1(out / f"{stem}_probs.rtn", probs)
            lines.append(f"{scan.subject_id}\t{scan.frame_id}\t{entry.image_path.resolve()}\t"
                         f"{label_name}\t{int(scan.is_fovea)}")
            h, w = scan.shape
            print(f"{stem}  {h}x{w}  {elapsed:.3f} s")
    (out / data.MANIFEST).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- eval

def _by_key(scans):
    return {(s.subject_id, s.frame_id): s for s in scans}


def etdrs_difference(pairs, spec_kwargs) -> list:
    """Mean |zone_pred - zone_truth| over subjects; the fovea frame comes from the truth manifest."""
    per_subject = defaultdict(list)
    for pred, truth in pairs:
        per_subject[truth.subject_id].append((pred, truth))
    diffs = []
    for subject, items in sorted(per_subject.items()):
        items.sort(key=lambda pt: pt[1].frame_id)
        fovea = [i for i, (_, t) in enumerate(items) if t.is_fovea]
        if len(fovea) != 1:
            raise data.DataError(
                f"subject {subject}: expected exactly one frame marked is_fovea=1, found {len(fovea)}"
            )
        spec = metrics.EtdrsSpec(fovea_frame=fovea[0], **spec_kwargs)
        grid_p = metrics.etdrs_grid([metrics.thickness_profile(p.labels) for p, _ in items], spec)
        grid_t = metrics.etdrs_grid([metrics.thickness_profile(t.labels) for _, t in items], spec)
        diffs.append(np.abs(grid_p - grid_t))
    with np.errstate(invalid="ignore"):
        stacked = np.stack(diffs)
        valid = ~np.isnan(stacked)
        counts = valid.sum(axis=0)
        sums = np.where(valid, stacked, 0).sum(axis=0)
        return [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]


def cmd_eval(args) -> int:
    preds = _by_key(data.load_dataset(args.pred))
    truths = _by_key(data.load_dataset(args.truth))
    missing = sorted(set(truths) ^ set(preds))
    if missing:
        where = ", ".join(
            f"subject {s} frame {f} ({'prediction' if (s, f) in truths else 'ground truth'} missing)"
            for s, f in missing[:5]
        )
        raise data.DataError(f"unpaired scans: {where}")
    keys = sorted(truths)
    pairs = [(preds[k], truths[k]) for k in keys]
    for (p, t), k in zip(pairs, keys):
        if p.shape != t.shape:
            raise data.DataError(f"subject {k[0]} frame {k[1]}: shapes {p.shape} vs {t.shape}")
    rep = metrics.report([p.labels for p, _ in pairs], [t.labels for _, t in pairs])
    if args.etdrs:
        spec_kwargs = {"lateral_res_um": args.lateral_res, "azimuthal_spacing_um": args.frame_spacing}
        if args.frame_offsets == "duke":
            spec_kwargs["frame_offsets"] = metrics.DUKE_FRAME_OFFSETS
        rep.etdrs = etdrs_difference(pairs, spec_kwargs)
    out = Path(args.out)
    _echo(out, {"command": "eval", "pred": args.pred, "truth": args.truth, "etdrs": args.etdrs,
                "lateral_res": args.lateral_res, "frame_spacing": args.frame_spacing,
                "frame_offsets": args.frame_offsets})
    (out / "metrics.tsv").write_text(rep.to_tsv())
    (out / "metrics.txt").write_text(rep.to_text())
    print(rep.to_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    with _threads(True):
        results = gradcheck.run_all(args.seed, corrupt=args.corrupt)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_NUMERIC if failed else EXIT_OK


# ----------------------------------------------------------------- phantom

def phantom_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cmd_phantom(args) -> int:
    if args.count < 1 or args.frames_per_subject < 1:
        raise ConfigError("--count and --frames-per-subject must be >= 1")
    out = Path(args.out)
    scans = []
    for i in range(args.count):
        spec = data.PhantomSpec(
            height=args.height, width=args.width, noise=args.noise,
            fluid_blobs=0 if args.no_fluid else args.fluid_blobs,
            seed=phantom_seed(args.seed, i),
        )
        subject, frame = divmod(i, args.frames_per_subject)
        scan = data.generate_phantom(spec, subject_id=subject + 1, frame_id=frame)
        scan.is_fovea = frame == args.frames_per_subject // 2
        scans.append(scan)
    data.save_dataset(out, scans, image_format=args.format)
    _echo(out, {"command": "phantom", "count": args.count, "seed": args.seed,
                "height": args.height, "width": args.width, "noise": args.noise,
                "fluid_blobs": 0 if args.no_fluid else args.fluid_blobs,
                "frames_per_subject": args.frames_per_subject, "format": args.format})
    print(f"wrote {args.count} phantoms to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaynet", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--slice-width", type=int)
    t.add_argument("--seed", type=int, help="defaults to $RELAYNET_SEED, else 0")
    t.add_argument("--base-lr", type=float)
    t.add_argument("--depth", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--skip-mode")
    t.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints (0 = final only)")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--deterministic", action="store_true", help="single-threaded reference path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment every scan listed in a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--save-probs", action="store_true", help="also write class probabilities as RTN1")
    s.add_argument("--no-overlay", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="compare predicted and reference label maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--etdrs", action="store_true", help="add the 9 ETDRS zone rows")
    e.add_argument("--lateral-res", type=float, default=11.4, help="micrometres per A-scan")
    e.add_argument("--frame-spacing", type=float, default=122.0, help="micrometres between frames")
    e.add_argument("--frame-offsets", choices=("consecutive", "duke"), default="consecutive")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    ph = sub.add_parser("phantom", help="write synthetic labelled B-scans")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=4)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--height", type=int, default=512)
    ph.add_argument("--width", type=int, default=256)
    ph.add_argument("--noise", type=float, default=0.15)
    ph.add_argument("--fluid-blobs", type=int, default=1)
    ph.add_argument("--no-fluid", action="store_true")
    ph.add_argument("--frames-per-subject", type=int, default=1)
    ph.add_argument("--format", choices=("pgm", "rtn1"), default="pgm")
    ph.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
