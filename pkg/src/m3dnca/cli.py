"""Command line front end.

Every subcommand prints a JSON summary to stdout; artifacts (volumes,
checkpoints, calibrations) go to the paths given by flags. All randomness is
seed-driven, so rerunning a command with the same inputs and seed rewrites
byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, inference, io, pipeline, quality, synth
from .core import Model, ModelConfig, param_count
from .errors import NcaError, UnsupportedFormatError
from .kernels import fold_seed


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _parse_triple(text: str, name: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise SystemExit(f"{name} wants one or three comma-separated integers")
    return tuple(int(p) for p in parts)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _config_from_args(args) -> ModelConfig:
    return ModelConfig(
        levels=args.levels,
        scale_factor=args.scale,
        kernel_sizes=_parse_ints(args.kernels),
        channels=args.channels,
        hidden=args.hidden,
        fire_rate=args.fire_rate,
        step_policy=args.step_policy,
        legacy_extra_downscale=args.legacy_extra_downscale,
        state_upscale=args.state_upscale,
    )


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--kernels", default="7,3", help="per-level kernel sizes, csv")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--fire-rate", type=float, default=0.5)
    p.add_argument(
        "--step-policy",
        choices=["runtime-extent", "frozen-training-extent"],
        default="runtime-extent",
    )
    p.add_argument("--legacy-extra-downscale", action="store_true")
    p.add_argument("--state-upscale", choices=["nearest", "trilinear"], default="nearest")


def _load_image(path: str) -> np.ndarray:
    if path.endswith((".nii", ".nii.gz")):
        return io.load_nifti(path)[0]
    arr, _ = io.load_volume(path)
    return arr.astype(np.float32)


def _load_dataset(root: str) -> tuple[np.ndarray, np.ndarray, dict]:
    base = Path(root)
    manifest = json.loads((base / "dataset.json").read_text())
    images = []
    labels = []
    for case in manifest["cases"]:
        img, _ = io.load_volume(base / case["image"])
        lbl, _ = io.load_volume(base / case["label"])
        images.append(img.astype(np.float32))
        labels.append(lbl.astype(np.uint8))
    return np.stack(images), np.stack(labels), manifest


def _corrupt_plan(n: int, frac: float) -> list[bool]:
    cut = int(round(frac * n))
    return [i < cut for i in range(n)]


def _apply_corruption(image, kind: str, args, seed: int):
    """Dispatch one artifact with its kind-specific parameters."""
    if kind == "noise":
        return synth.corrupt_noise(image, args.corrupt_std, seed=seed)
    if kind == "spike":
        return synth.corrupt_spike(
            image, args.corrupt_intensity, num_spikes=args.corrupt_spikes, seed=seed
        )
    return synth.corrupt_ghost(
        image,
        args.corrupt_ghosts,
        args.corrupt_ghost_intensity,
        axis=args.corrupt_axis,
        seed=seed,
    )


def _scored_cases(
    model: Model, images, labels, args
) -> tuple[list[float], list[float], list[str], list[dict]]:
    """Ensemble every case (optionally corrupting some) -> scores and Dice."""
    corrupted = _corrupt_plan(images.shape[0], args.corrupt_frac)
    scores: list[float] = []
    dices: list[float] = []
    kinds: list[str] = []
    rows: list[dict] = []
    for i in range(images.shape[0]):
        img = images[i]
        hit = bool(corrupted[i] and args.corrupt_kind != "none")
        if hit:
            img = _apply_corruption(
                img, args.corrupt_kind, args, seed=fold_seed(args.seed, 0xC0, i)
            )
        res = inference.ensemble(
            model, img, seed=fold_seed(args.seed, i), members=args.members
        )
        score = quality.nqm_score(
            res.mean_prob.astype(np.float64),
            res.sd.astype(np.float64),
            hard_denominator=args.hard_denominator,
        )
        dice = synth.dice_score(res.mask, labels[i])
        scores.append(score)
        dices.append(dice)
        kinds.append(args.corrupt_kind if hit else "none")
        rows.append(
            {
                "case": i,
                "corrupted": hit,
                "score": score,
                "dice": dice,
            }
        )
    return scores, dices, kinds, rows


def _add_corrupt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--corrupt-kind",
        choices=["none", "noise", "spike", "ghost"],
        default="none",
        help="artifact applied to a leading fraction of cases",
    )
    p.add_argument("--corrupt-frac", type=float, default=0.5)
    p.add_argument("--corrupt-std", type=float, default=0.5)
    p.add_argument("--corrupt-intensity", type=float, default=5.0)
    p.add_argument("--corrupt-spikes", type=int, default=1)
    p.add_argument("--corrupt-ghosts", type=int, default=6)
    p.add_argument("--corrupt-ghost-intensity", type=float, default=2.5)
    p.add_argument("--corrupt-axis", choices=["z", "y", "x"], default="x")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extents = _parse_triple(args.extents, "--extents")
    spec = synth.SyntheticSpec(
        extents=extents,
        family=args.family,
        radius_range=(args.radius_min, args.radius_max),
        center_jitter=args.jitter,
        count=args.count,
        seed=args.seed,
    )
    cases = []
    for i, (img, lbl) in enumerate(synth.generate(spec)):
        img_name = f"vol_{i:04d}.image.m3dvol"
        lbl_name = f"vol_{i:04d}.label.m3dvol"
        io.save_volume(out / img_name, img, kind="image", meta={"case": i})
        io.save_volume(out / lbl_name, lbl, kind="label", meta={"case": i})
        cases.append({"image": img_name, "label": lbl_name})
    manifest = {
        "count": args.count,
        "seed": args.seed,
        "extents": list(extents),
        "family": spec.family,
        "radius_range": list(spec.radius_range),
        "center_jitter": spec.center_jitter,
        "cases": cases,
    }
    (out / "dataset.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    _emit({"written": args.count, "dir": str(out)})


def cmd_train(args) -> None:
    images, labels, _ = _load_dataset(args.data)
    if args.val_count >= images.shape[0]:
        raise SystemExit("--val-count must leave at least one training case")
    config = _config_from_args(args)
    model = Model.initial(config, seed=args.seed)
    n_train = images.shape[0] - args.val_count
    tconf = pipeline.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        dup_factor=args.dup,
        lr=args.lr,
        seed=args.seed,
        steps_override=_parse_ints(args.steps) if args.steps else None,
        eval_every=args.eval_every,
        eval_cases=args.eval_cases,
    )
    result = pipeline.train(
        model,
        images[:n_train],
        labels[:n_train],
        tconf,
        val_images=images[n_train:] if args.val_count else None,
        val_labels=labels[n_train:] if args.val_count else None,
        log=args.verbose,
    )
    model.meta["epochs"] = args.epochs
    model.meta["final_loss"] = float(result.loss_history[-1])
    io.save_checkpoint(args.out, model)
    summary = {
        "checkpoint": args.out,
        "optimizer_steps": result.steps_run,
        "final_loss": float(result.loss_history[-1]),
        "parameters": param_count(config),
        "seconds": round(result.seconds, 3),
    }
    if result.eval_history:
        summary["val_dice"] = result.eval_history[-1][1]
    _emit(summary)


def cmd_infer(args) -> None:
    model = io.load_checkpoint(args.model)
    image = _load_image(args.image)
    budget = args.budget_mb * (1 << 20) if args.budget_mb else None
    tile = _parse_triple(args.tile, "--tile") if args.tile else None
    t0 = time.perf_counter()
    res = inference.segment(
        model, image, seed=args.seed, tile=tile, budget_bytes=budget, chunk=args.chunk
    )
    io.save_volume(args.out, res.mask, kind="label", meta={"seed": args.seed})
    if args.prob:
        io.save_volume(args.prob, res.prob, kind="probability", meta={"seed": args.seed})
    _emit(
        {
            "mask": args.out,
            "steps": list(res.steps),
            "foreground_voxels": int(res.mask.sum()),
            "peak_bytes": res.peak_bytes,
            "tile": list(res.plan.tile) if res.plan else (list(tile) if tile else None),
            "seconds": round(time.perf_counter() - t0, 3),
        }
    )


def cmd_ensemble(args) -> None:
    model = io.load_checkpoint(args.model)
    image = _load_image(args.image)
    res = inference.ensemble(model, image, seed=args.seed, members=args.members)
    io.save_volume(args.out, res.mask, kind="label", meta={"seed": args.seed, "members": args.members})
    if args.mean:
        io.save_volume(args.mean, res.mean_prob, kind="probability")
    if args.sd:
        io.save_volume(args.sd, res.sd, kind="spread")
    _emit(
        {
            "mask": args.out,
            "members": args.members,
            "nqm": res.nqm,
            "foreground_voxels": int(res.mask.sum()),
        }
    )


def cmd_nqm(args) -> None:
    model = io.load_checkpoint(args.model)
    image = _load_image(args.image)
    res = inference.ensemble(model, image, seed=args.seed, members=args.members)
    score = quality.nqm_score(
        res.mean_prob.astype(np.float64),
        res.sd.astype(np.float64),
        hard_denominator=args.hard_denominator,
    )
    _emit({"nqm": score, "members": args.members, "hard_denominator": args.hard_denominator})


def cmd_calibrate(args) -> None:
    model = io.load_checkpoint(args.model)
    images, labels, _ = _load_dataset(args.data)
    scores, dices, _, rows = _scored_cases(model, images, labels, args)
    calib = quality.calibrate(
        scores, dices, dice_target=args.dice_target, hard_denominator=args.hard_denominator
    )
    quality.save_calibration(args.out, calib)
    _emit(
        {
            "calibration": args.out,
            "threshold": calib.threshold,
            "slope": calib.slope,
            "intercept": calib.intercept,
            "pearson_r": calib.pearson_r,
            "n_cases": calib.n_cases,
            "cases": rows,
        }
    )


def cmd_qc_eval(args) -> None:
    model = io.load_checkpoint(args.model)
    calib = quality.load_calibration(args.calibration)
    images, labels, _ = _load_dataset(args.data)
    scores, dices, kinds, _ = _scored_cases(model, images, labels, args)
    ids = [f"case-{i:03d}" for i in range(len(scores))]
    report = quality.evaluate_qc(
        scores, dices, calib, case_ids=ids, corruptions=kinds
    )
    doc = {
        "n_cases": report.n_cases,
        "n_failures": report.n_failures,
        "n_flagged": report.n_flagged,
        "detection_rate": report.detection_rate,
        "false_negative_rate": report.false_negative_rate,
        "false_positive_rate": report.false_positive_rate,
        "spearman_rho": report.spearman_rho,
        "cases": [
            {
                "case_id": c.case_id,
                "corruption": c.corruption,
                "dice": c.dice,
                "nqm": c.nqm,
                "flagged": c.flagged,
            }
            for c in report.cases
        ],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    if args.csv:
        Path(args.csv).write_text(quality.report_csv(report))
    _emit(doc)


def cmd_corrupt(args) -> None:
    image = _load_image(args.image)
    if args.kind == "noise":
        out = synth.corrupt_noise(image, args.std, seed=args.seed)
        detail = {"std": args.std}
    elif args.kind == "spike":
        out = synth.corrupt_spike(
            image, args.intensity, num_spikes=args.num_spikes, seed=args.seed
        )
        detail = {"intensity": args.intensity, "num_spikes": args.num_spikes}
    else:
        out = synth.corrupt_ghost(
            image, args.num_ghosts, args.intensity, axis=args.axis, seed=args.seed
        )
        detail = {
            "intensity": args.intensity,
            "num_ghosts": args.num_ghosts,
            "axis": args.axis,
        }
    io.save_volume(
        args.out,
        out,
        kind="image",
        meta={"corruption": args.kind, "seed": args.seed, **detail},
    )
    _emit({"out": args.out, "kind": args.kind, **detail})


def cmd_plan(args) -> None:
    if args.model:
        config = io.load_checkpoint(args.model).config
    else:
        config = _config_from_args(args)
    extents = _parse_triple(args.extents, "--extents")
    plan = inference.memory_plan(
        extents, config, args.budget_mb * (1 << 20), chunk=args.chunk
    )
    _emit(
        {
            "tile": list(plan.tile),
            "chunk": plan.chunk,
            "resident_bytes": plan.resident_bytes,
            "tile_bytes": plan.tile_bytes,
            "expected_peak_bytes": plan.expected_peak_bytes,
            "budget_bytes": plan.budget_bytes,
        }
    )


def cmd_info(args) -> None:
    path = Path(args.path)
    with path.open("rb") as f:
        head = f.read(8)
    if head == io.CHECKPOINT_MAGIC:
        model = io.load_checkpoint(path)
        cfg = model.config
        _emit(
            {
                "record": "checkpoint",
                "levels": cfg.levels,
                "kernel_sizes": list(cfg.kernel_sizes),
                "channels": cfg.channels,
                "hidden": cfg.hidden,
                "parameters": param_count(cfg),
                "file_bytes": path.stat().st_size,
                "meta": model.meta,
            }
        )
    elif head == io.VOLUME_MAGIC:
        arr, manifest = io.load_volume(path)
        _emit(
            {
                "record": "volume",
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "kind": manifest.get("kind"),
                "min": float(arr.min()),
                "max": float(arr.max()),
            }
        )
    elif str(path).endswith((".nii", ".nii.gz")) or head[:2] == b"\x1f\x8b":
        arr, info = io.load_nifti(path)
        _emit(
            {
                "record": "scanner-volume",
                "shape": list(arr.shape),
                "range": info["range"],
            }
        )
    else:
        raise UnsupportedFormatError(f"{path}: unrecognized file")


def cmd_convert(args) -> None:
    arr, info = io.load_nifti(args.input)
    if args.kind == "label":
        # Nonzero in the original values means foreground; undo the
        # loader's normalization before thresholding.
        lo, hi = info["range"]
        raw = arr * np.float32(hi - lo) + np.float32(lo)
        out = (np.abs(raw) > 1e-6).astype(np.uint8)
    else:
        out = arr.astype(np.float32)
    io.save_volume(args.output, out, kind=args.kind, meta={"source": Path(args.input).name})
    _emit({"out": args.output, "shape": list(out.shape), "kind": args.kind})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="m3dnca",
        description="3D cellular-automaton segmentation with quality control",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", default="64,64,64")
    p.add_argument("--family", choices=list(synth.FAMILIES), default="two-lobe")
    p.add_argument("--radius-min", type=float, default=0.16)
    p.add_argument("--radius-max", type=float, default=0.23)
    p.add_argument("--jitter", type=float, default=0.06)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--dup", type=int, default=2)
    p.add_argument("--lr", type=float, default=1.6e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", default="", help="override per-level step counts, csv")
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--eval-cases", type=int, default=4)
    p.add_argument("--verbose", action="store_true")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume with a single pass")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", default="", help="tile extents, csv; empty = untiled")
    p.add_argument("--budget-mb", type=int, default=0, help="derive tile from a memory plan")
    p.add_argument("--chunk", type=int, default=inference.DEFAULT_CHUNK)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ensemble", help="pooled stochastic passes over one volume")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mean", default="")
    p.add_argument("--sd", default="")
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("nqm", help="ensemble disagreement score for one volume")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard-denominator", action="store_true")
    p.set_defaults(func=cmd_nqm)

    p = sub.add_parser("calibrate", help="fit the score-to-Dice flagging line")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dice-target", type=float, default=0.8)
    p.add_argument("--hard-denominator", action="store_true")
    _add_corrupt_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("qc-eval", help="score a calibration on labeled cases")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--out", default="")
    p.add_argument("--csv", default="", help="also write per-case rows as CSV")
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard-denominator", action="store_true")
    _add_corrupt_flags(p)
    p.set_defaults(func=cmd_qc_eval)

    p = sub.add_parser("corrupt", help="apply an acquisition artifact to a volume")
    p.add_argument("--image", required=True)
    p.add_argument("--kind", choices=list(synth.CORRUPTION_KINDS), required=True)
    p.add_argument("--std", type=float, default=0.5, help="noise std")
    p.add_argument("--intensity", type=float, default=5.0, help="spike or ghost strength")
    p.add_argument("--num-spikes", type=int, default=1)
    p.add_argument("--num-ghosts", type=int, default=6)
    p.add_argument("--axis", choices=["z", "y", "x"], default="x")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("plan", help="tile plan for extents under a memory budget")
    p.add_argument("--extents", required=True)
    p.add_argument("--budget-mb", type=int, required=True)
    p.add_argument("--chunk", type=int, default=inference.DEFAULT_CHUNK)
    p.add_argument("--model", default="")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("info", help="describe a checkpoint or volume file")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("convert", help="convert a scanner volume to the native format")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kind", choices=["image", "label"], default="image")
    p.set_defaults(func=cmd_convert)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NcaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
