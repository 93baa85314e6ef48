"""Desk-scale ablation: coarse stage (C0), individual agents (P1) and
collaborative adversarial agents (P2), evaluated on the phantom test split."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coarse import coarse_labels
from .config import RunConfig
from .metrics import MetricsReport, case_metrics
from .phantom import Dataset, PhantomSpec, generate_case, generate_dataset
from .training import Checkpoint, Pipeline, train

logger = logging.getLogger(__name__)


def ensure_dataset(cfg: RunConfig) -> Dataset:
    manifest = cfg.data_dir / "manifest.json"
    if not manifest.exists():
        generate_dataset(cfg.phantom, cfg.count, cfg.data_dir)
    return Dataset.load(cfg.data_dir)


def _train_or_load(path: Path, fn, reused: list | None = None) -> Checkpoint:
    if path.exists():
        if reused is not None:
            reused.append(str(path))
        return Checkpoint.load(path)
    ckpt = fn()
    ckpt.save(path)
    ckpt.best_checkpoint().save(path.with_name("best.ckpt"))
    return ckpt


def evaluate_coarse(ckpt: Checkpoint, cases) -> MetricsReport:
    model = ckpt.models(best=True).coarse.eval()
    factors = ckpt.train_config.coarse_factors
    report = MetricsReport()
    for case in cases:
        pred = coarse_labels(model, case.image, factors)
        report.add(case.case_id, case_metrics(pred.array, case.labels.array, case.labels.spacing))
    return report


def evaluate_pipeline(pipeline: Pipeline, cases) -> MetricsReport:
    report = MetricsReport()
    for case in cases:
        result = pipeline(case.image)
        report.add(case.case_id, case_metrics(result.labels.array, case.labels.array, case.labels.spacing))
    return report


def defect_recovery(pipeline: Pipeline, spec: PhantomSpec, count: int) -> dict:
    """Fraction of removed cartilage voxels that the pipeline labels as background.

    Each defect case is compared with the defect-free case of the same seed and
    index, which shares geometry and noise.
    """
    defect_spec = PhantomSpec(**{**spec.to_dict(), "defect_probability": 1.0})
    clean_spec = PhantomSpec(**{**spec.to_dict(), "defect_probability": 0.0})
    removed_total, recovered_total, per_case = 0, 0, []
    for i in range(count):
        with_defect = generate_case(defect_spec, i)
        clean = generate_case(clean_spec, i)
        hole = (clean.labels.array > 0) & (with_defect.labels.array == 0)
        pred = pipeline(with_defect.image).labels.array
        recovered = int((pred[hole] == 0).sum())
        removed_total += int(hole.sum())
        recovered_total += recovered
        per_case.append({"case": with_defect.case_id, "removed": int(hole.sum()), "recovered": recovered})
    return {
        "fraction": recovered_total / removed_total if removed_total else float("nan"),
        "removed": removed_total,
        "recovered": recovered_total,
        "cases": per_case,
    }


@dataclass
class AblationResult:
    coarse: dict
    seeds: dict = field(default_factory=dict)
    defects: dict = field(default_factory=dict)
    seconds: float = 0.0  # wall time of this call
    train_seconds: float = 0.0  # summed epoch times of every checkpoint used
    disc_loss_max: float = 0.0  # largest per-epoch mean discriminator loss over all p2 runs
    reused: list = field(default_factory=list)  # checkpoints loaded instead of trained

    @property
    def total_seconds(self) -> float:
        """Cost of producing the result from scratch."""
        return self.seconds + self.train_seconds if self.reused else self.seconds

    def to_dict(self) -> dict:
        return {
            "coarse": self.coarse,
            "seeds": self.seeds,
            "defects": self.defects,
            "seconds": self.seconds,
            "train_seconds": self.train_seconds,
            "total_seconds": self.total_seconds,
            "disc_loss_max": self.disc_loss_max,
            "reused": self.reused,
        }


def _epoch_seconds(ckpt: Checkpoint) -> float:
    return float(sum(h.get("seconds", 0.0) for h in ckpt.history))


def _summary(report: MetricsReport) -> dict:
    return {"mean_dsc": report.mean_foreground_dsc(), "table": report.summary()}


def run_ablation(
    cfg: RunConfig,
    seeds=(7, 8, 9),
    out_dir=None,
    defect_cases: int = 5,
    defect_seed_offset: int = 1000,
) -> AblationResult:
    """Train C0 once, then P1 and warm-started P2 for each training seed.

    Existing checkpoints under ``out_dir`` are reused, so an interrupted run can
    be continued.
    """
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ensure_dataset(cfg)
    test = dataset.split("test")

    reused: list = []
    coarse_cfg = cfg.train_config("coarse")
    coarse = _train_or_load(
        out / "coarse" / "last.ckpt",
        lambda: train(coarse_cfg, dataset, log_path=out / "coarse" / "epochs.log"),
        reused,
    )
    result = AblationResult(coarse=_summary(evaluate_coarse(coarse, test)), reused=reused)
    result.train_seconds += _epoch_seconds(coarse)
    logger.info("C0 test mean DSC %.4f", result.coarse["mean_dsc"])

    for seed in seeds:
        sdir = out / f"seed{seed}"
        p1_cfg = cfg.train_config("p1").replace(seed=seed)
        p1 = _train_or_load(
            sdir / "p1" / "last.ckpt",
            lambda: train(p1_cfg, dataset, coarse=coarse, log_path=sdir / "p1" / "epochs.log"),
            reused,
        )
        p2_cfg = cfg.train_config("p2").replace(seed=seed)
        p2 = _train_or_load(
            sdir / "p2" / "last.ckpt",
            lambda: train(
                p2_cfg,
                dataset,
                coarse=coarse,
                warm_start=p1,
                log_path=sdir / "p2" / "epochs.log",
                sources={"warm_start": str(sdir / "p1" / "last.ckpt")},
            ),
            reused,
        )
        result.train_seconds += _epoch_seconds(p1) + _epoch_seconds(p2)
        d_losses = [h["losses"]["D"] for h in p2.history if "D" in h["losses"]]
        result.disc_loss_max = max([result.disc_loss_max, *d_losses])
        p1_pipe, p2_pipe = Pipeline(coarse, p1), Pipeline(coarse, p2)
        entry = {"p1": _summary(evaluate_pipeline(p1_pipe, test)), "p2": _summary(evaluate_pipeline(p2_pipe, test))}
        if seed == seeds[0] and defect_cases:
            defect_spec = PhantomSpec(**{**cfg.phantom.to_dict(), "seed": cfg.phantom.seed + defect_seed_offset})
            result.defects = {
                "p2": defect_recovery(p2_pipe, defect_spec, defect_cases),
                "p1": defect_recovery(p1_pipe, defect_spec, defect_cases),
            }
        result.seeds[str(seed)] = entry
        logger.info(
            "seed %d test mean DSC: P1 %.4f P2 %.4f", seed, entry["p1"]["mean_dsc"], entry["p2"]["mean_dsc"]
        )

    result.seconds = round(time.perf_counter() - t0, 1)
    result.train_seconds = round(result.train_seconds, 1)
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, default=_json_default) + "\n")
    return result


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v).__name__)
