"""``cartseg`` command line: phantoms, training, inference, evaluation and slice export.

Exit codes: 0 ok, 2 bad arguments or config, 3 I/O failure, 4 missing
prerequisite, 5 case pairing, 6 value out of range.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CartsegError

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_PREREQ, EXIT_PAIRING, EXIT_RANGE = 0, 2, 3, 4, 5, 6

_EXIT_BY_CODE = {
    "case-mismatch": EXIT_PAIRING,
    "image-label-mismatch": EXIT_PAIRING,
    "slice-out-of-range": EXIT_RANGE,
    "missing-coarse-checkpoint": EXIT_PREREQ,
    "missing-dataset": EXIT_PREREQ,
    "no-training-data": EXIT_PREREQ,
    "incompatible-checkpoint": EXIT_PREREQ,
    "missing-checkpoint": EXIT_PREREQ,
}
_IO_PREFIXES = ("csgv-", "dataset-read", "dataset-write", "config-read", "checkpoint-read", "write-failed")

CONTOUR_COLORS = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}  # FC red, TC green, PC blue

log = logging.getLogger("cartseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def exit_code_for(err: CartsegError) -> int:
    if err.code in _EXIT_BY_CODE:
        return _EXIT_BY_CODE[err.code]
    if err.code.startswith(_IO_PREFIXES):
        return EXIT_IO
    return EXIT_ARGS


def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return parts


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .phantom import Dataset, PhantomSpec, generate_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if not 0.0 <= args.defect_prob <= 1.0:
        raise UsageError("--defect-prob must lie in [0, 1]")
    spec = PhantomSpec(dims=args.size, seed=args.seed, defect_probability=args.defect_prob)
    manifest = generate_dataset(spec, args.count, args.out)
    ds = Dataset.load(args.out)
    splits = {name: len(ds.split(name)) for name in ("train", "val", "test")}
    labels = np.stack([c.labels.array for c in ds.cases])
    fractions = {name: float((labels == i).mean()) for i, name in ((1, "FC"), (2, "TC"), (3, "PC"))}
    defects = sum(len(c["defects"]) for c in manifest["cases"])
    print(f"wrote {args.count} cases to {args.out}")
    print("split " + " ".join(f"{k}={v}" for k, v in splits.items()))
    print("voxel fraction " + " ".join(f"{k}={v:.4%}" for k, v in fractions.items()))
    print(f"defects {defects}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _load_ckpt(path, what: str):
    from .training import Checkpoint

    if path is None:
        return None
    if not Path(path).exists():
        raise CartsegError("missing-checkpoint", f"{what} checkpoint {path} does not exist")
    return Checkpoint.load(path)


def _load_dataset(root):
    from .phantom import Dataset

    if not (Path(root) / "manifest.json").exists():
        raise CartsegError("missing-dataset", f"no manifest.json under {root}; run `cartseg phantom` first")
    return Dataset.load(root)


def cmd_train(args) -> int:
    from .config import load_run_config
    from .training import set_deterministic, train

    cfg = load_run_config(args.config)
    config = cfg.train_config(args.regime)
    set_deterministic(config.deterministic)
    out = Path(args.out) if args.out else cfg.out_dir / args.regime
    resume = _load_ckpt(args.resume, "resume")
    coarse = _load_ckpt(args.coarse, "coarse")
    warm = _load_ckpt(args.warm_start, "warm-start")
    if args.regime != "coarse" and config.roi_source == "coarse-centroid" and coarse is None:
        raise CartsegError("missing-coarse-checkpoint", f"regime {args.regime} with coarse-centroid ROIs needs --coarse")
    if args.regime == "coarse" and (coarse is not None or warm is not None):
        raise UsageError("--coarse and --warm-start do not apply to the coarse regime")
    dataset = _load_dataset(cfg.data_dir)
    sources = {}
    if args.coarse:
        sources["coarse"] = str(args.coarse)
    if args.warm_start:
        sources["warm_start"] = str(args.warm_start)
    if args.resume:
        sources["resumed_from"] = str(args.resume)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CartsegError("write-failed", f"{out}: {exc}") from exc
    log_path = out / "epochs.log"
    if resume is None and log_path.exists():
        log_path.unlink()
    with open(log_path, "a") as fh:
        for key, value in sources.items():
            fh.write(f"# {key}={value}\n")
    ckpt = train(config, dataset, resume=resume, coarse=coarse, warm_start=warm, log_path=log_path, sources=sources)
    ckpt.save(out / "last.ckpt")
    ckpt.best_checkpoint().save(out / "best.ckpt")
    print(f"{args.regime}: {ckpt.epoch} epochs, final loss {ckpt.final_loss:.6f}, best epoch {ckpt.best_epoch}")
    print(f"wrote {out / 'last.ckpt'} and {out / 'best.ckpt'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# infer / evaluate
# --------------------------------------------------------------------------


def cmd_infer(args) -> int:
    from .training import Pipeline
    from .volume import write_csgv

    coarse = _load_ckpt(args.coarse, "coarse")
    agents = _load_ckpt(args.agents, "agents")
    dataset = _load_dataset(args.data)
    cases = dataset.cases if args.split == "all" else dataset.split(args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} has no cases")
    pipeline = Pipeline(coarse, agents)
    out = Path(args.out)
    for case in cases:
        result = pipeline(case.image)
        try:
            (out / case.case_id).mkdir(parents=True, exist_ok=True)
            write_csgv(out / case.case_id / "label.csgv", result.labels)
            (out / case.case_id / "roi_plan.json").write_text(
                json.dumps(result.plan.to_dict(), indent=2, sort_keys=True) + "\n"
            )
        except OSError as exc:
            raise CartsegError("write-failed", f"{out / case.case_id}: {exc}") from exc
    print(f"wrote {len(cases)} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset

    for p in (args.pred, args.gt):
        if not Path(p).is_dir():
            raise CartsegError("dataset-read-failed", f"{p} is not a directory")
    report = evaluate_dataset(args.pred, args.gt)
    try:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.report)
    except OSError as exc:
        raise CartsegError("write-failed", f"{args.report}: {exc}") from exc
    print(f"{len(report.cases)} cases, mean foreground DSC {report.mean_foreground_dsc():.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# export-slices
# --------------------------------------------------------------------------


def _slice(arr: np.ndarray, axis: int, index: int) -> np.ndarray:
    # rows follow the second remaining axis, columns the first
    return np.take(arr, index, axis=axis).T


def contour(mask2d: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; the image border counts as background."""
    p = np.pad(mask2d, 1, constant_values=False)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask2d & ~inner


def render_slice(image2d: np.ndarray, labels2d: np.ndarray | None) -> np.ndarray:
    gray = (np.clip(image2d, 0.0, 1.0) * 255).round().astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    if labels2d is not None:
        for value, color in CONTOUR_COLORS.items():
            rgb[contour(labels2d == value)] = color
    return rgb


def cmd_export_slices(args) -> int:
    from PIL import Image

    from .volume import read_csgv

    image = read_csgv(args.image)
    volumes = [read_csgv(p) for p in (args.labels, args.labels2) if p is not None]
    for v in volumes:
        if v.dims != image.dims:
            raise CartsegError("image-label-mismatch", f"labels {v.dims} vs image {image.dims}")
    axis = "xyz".index(args.axis)
    if not 0 <= args.index < image.dims[axis]:
        raise CartsegError(
            "slice-out-of-range", f"index {args.index} outside [0, {image.dims[axis] - 1}] on axis {args.axis}"
        )
    img2d = _slice(image.array, axis, args.index)
    panels = [render_slice(img2d, _slice(v.array, axis, args.index)) for v in volumes] or [render_slice(img2d, None)]
    gap = np.full((img2d.shape[0], 2, 3), 255, dtype=np.uint8)
    canvas = panels[0] if len(panels) == 1 else np.concatenate([panels[0], gap, panels[1]], axis=1)
    if args.scale > 1:
        canvas = canvas.repeat(args.scale, axis=0).repeat(args.scale, axis=1)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(canvas, mode="RGB").save(args.out, format="PNG")
    except OSError as exc:
        raise CartsegError("write-failed", f"{args.out}: {exc}") from exc
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


def cmd_ablation(args) -> int:
    from .config import load_run_config
    from .experiment import run_ablation

    cfg = load_run_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_ablation(cfg, seeds=seeds, out_dir=args.out, defect_cases=args.defect_cases)
    print(f"C0 mean DSC {result.coarse['mean_dsc']:.4f}")
    for seed, entry in result.seeds.items():
        print(f"seed {seed}: P1 {entry['p1']['mean_dsc']:.4f} P2 {entry['p2']['mean_dsc']:.4f}")
    if result.defects:
        print(f"defect voxels recovered as background by P2: {result.defects['p2']['fraction']:.2%}")
    print(f"{result.seconds:.0f} s")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cartseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic knee phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_triple, default=(64, 64, 64))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--defect-prob", type=float, default=0.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one regime")
    p.add_argument("--regime", choices=("coarse", "p1", "p2"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--coarse")
    p.add_argument("--warm-start")
    p.add_argument("--out", help="output directory (default <out_dir>/<regime>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the full pipeline on a dataset")
    p.add_argument("--coarse", required=True)
    p.add_argument("--agents", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predicted label volumes against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-slices", help="render one slice with label contours to PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--labels2")
    p.add_argument("--axis", choices=("x", "y", "z"), required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_export_slices)

    p = sub.add_parser("ablation", help="C0 / P1 / P2 comparison over several training seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="7,8,9")
    p.add_argument("--out")
    p.add_argument("--defect-cases", type=int, default=5)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_ARGS
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    if os.environ.get("CARTSEG_DETERMINISTIC", "").strip() == "1":
        log.info("deterministic mode forced by CARTSEG_DETERMINISTIC")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cartseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except CartsegError as exc:
        print(f"cartseg {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
