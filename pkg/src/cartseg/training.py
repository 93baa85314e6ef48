"""Training regimes (coarse, p1, p2), checkpoints and the full inference pipeline.

Regime ``p1`` trains the agents on their own ROI losses only. Regime ``p2``
alternates, per case, one Adam step on the agents (discriminator frozen) with
one SGD step on the discriminator (agents frozen).
"""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agents import AgentTeam
from .coarse import CoarseModel, coarse_labels, downsample_labels, multiclass_ce, prepare_coarse_input
from .config import TrainConfig
from .errors import CartsegError
from .fusion import CaseTensors, Discriminator, FusedPrediction, agents_loss, discriminator_loss, fuse
from .metrics import dsc
from .phantom import Dataset
from .roi import RoiPlan, extract_samples, locate_rois
from .volume import Cartilage, LabelVolume, Volume, argmax_labels, pad_to_multiple

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cartseg-checkpoint/1"


def deterministic_requested(flag: bool = False) -> bool:
    return flag or os.environ.get("CARTSEG_DETERMINISTIC", "").strip() in {"1", "true", "yes", "on"}


def set_deterministic(flag: bool) -> None:
    if deterministic_requested(flag):
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def lr_multiplier(epoch: int, decay: float, every: int) -> float:
    """Step schedule: ``decay ** floor(epoch / every)`` for a 0-based epoch."""
    return decay ** (epoch // every)


# --------------------------------------------------------------------------
# models and checkpoints
# --------------------------------------------------------------------------


@dataclass
class Models:
    coarse: CoarseModel | None = None
    agents: AgentTeam | None = None
    disc: Discriminator | None = None

    def named(self) -> dict:
        out = {}
        if self.coarse is not None:
            out["coarse"] = self.coarse.net
        if self.agents is not None:
            for c in Cartilage:
                out[f"agent.{c.key}"] = self.agents.agent(c).net
        if self.disc is not None:
            out["disc"] = self.disc
        return out

    def state_dict(self) -> dict:
        """Flat parameter/buffer map keyed like ``agent.fc.enc0.res0.conv1.weight``."""
        flat = {}
        for prefix, module in self.named().items():
            for k, v in module.state_dict().items():
                flat[f"{prefix}.{k}"] = v.detach().clone()
        return flat

    def load_state_dict(self, flat: dict, prefixes=None) -> None:
        for prefix, module in self.named().items():
            if prefixes is not None and not any(prefix.startswith(p) for p in prefixes):
                continue
            sub = {k[len(prefix) + 1 :]: v for k, v in flat.items() if k.startswith(prefix + ".")}
            try:
                module.load_state_dict(sub, strict=True)
            except RuntimeError as exc:
                raise CartsegError("incompatible-checkpoint", f"{prefix}: {exc}") from exc


def build_models(config: TrainConfig, dtype=torch.float32) -> Models:
    torch.manual_seed(config.seed)
    if config.regime == "coarse":
        models = Models(coarse=CoarseModel(config.coarse_levels, config.coarse_channels))
    else:
        models = Models(
            agents=AgentTeam(config.agent_levels, config.agent_channels, config.agent_attention),
            disc=Discriminator(config.disc_channels, config.disc_levels),
        )
    for m in models.named().values():
        m.to(dtype)
    return models


@dataclass
class Checkpoint:
    regime: str
    epoch: int
    config: dict
    state: dict
    optimizers: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = 0
    best_val: float | None = None
    rng_state: torch.Tensor | None = None
    sources: dict = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    @property
    def final_loss(self) -> float | None:
        return self.history[-1]["loss"] if self.history else None

    def models(self, best: bool = False) -> Models:
        models = build_models(self.train_config)
        models.load_state_dict(self.best_state if best and self.best_state is not None else self.state)
        return models

    def best_checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            regime=self.regime,
            epoch=self.best_epoch,
            config=self.config,
            state=self.best_state if self.best_state is not None else self.state,
            history=self.history[: self.best_epoch],
            best_epoch=self.best_epoch,
            best_val=self.best_val,
            sources=dict(self.sources, selected="best-val"),
        )

    def to_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "regime": self.regime,
            "epoch": self.epoch,
            "config": json.dumps(self.config, sort_keys=True),
            "state": self.state,
            "optimizers": self.optimizers,
            "history": json.dumps(self.history),
            "best_state": self.best_state,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "rng_state": self.rng_state,
            "sources": json.dumps(self.sources, sort_keys=True),
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_payload(), path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise CartsegError("checkpoint-read-failed", f"{path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CartsegError("incompatible-checkpoint", f"{path} is not a cartseg checkpoint")
        return cls(
            regime=payload["regime"],
            epoch=int(payload["epoch"]),
            config=json.loads(payload["config"]),
            state=payload["state"],
            optimizers=payload["optimizers"],
            history=json.loads(payload["history"]),
            best_state=payload["best_state"],
            best_epoch=int(payload["best_epoch"]),
            best_val=payload["best_val"],
            rng_state=payload["rng_state"],
            sources=json.loads(payload["sources"]),
        )


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Exclude ``module`` from gradient tracking and restore its buffers afterwards.

    Batch-norm layers keep using batch statistics, so gradients seen through
    the module match training behaviour, but running statistics are unchanged.
    """
    params = list(module.parameters())
    flags = [p.requires_grad for p in params]
    saved = {k: v.clone() for k, v in module.named_buffers()}
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
        with torch.no_grad():
            for k, v in module.named_buffers():
                v.copy_(saved[k])


# --------------------------------------------------------------------------
# prepared cases
# --------------------------------------------------------------------------


@dataclass
class CoarseItem:
    case_id: str
    x: torch.Tensor
    target: torch.Tensor
    image: Volume
    labels: LabelVolume


@dataclass
class AgentItem:
    case_id: str
    tensors: CaseTensors
    plan: RoiPlan
    samples: list


def _prepare_coarse(case, config: TrainConfig) -> CoarseItem:
    arr, _ = prepare_coarse_input(case.image, config.coarse_factors, config.coarse_levels)
    target = downsample_labels(case.labels.array, config.coarse_factors)
    k = 2**config.coarse_levels
    target = pad_to_multiple(target, (k, k, k))
    return CoarseItem(
        case.case_id,
        torch.from_numpy(np.array(arr, dtype=np.float32))[None, None],
        torch.from_numpy(np.array(target))[None],
        case.image,
        case.labels,
    )


def plan_for(case, config: TrainConfig, coarse_model: CoarseModel | None) -> RoiPlan:
    if config.roi_source == "coarse-centroid":
        if coarse_model is None:
            raise CartsegError("missing-coarse-checkpoint", "roi_source coarse-centroid needs a coarse model")
        located = coarse_labels(coarse_model, case.image, config.coarse_factors)
    else:
        located = case.labels
    return locate_rois(located, config.roi_sizes, config.default_centers)


def _prepare_agents(case, config: TrainConfig, coarse_model) -> AgentItem:
    plan = plan_for(case, config, coarse_model)
    return AgentItem(
        case.case_id,
        CaseTensors.build(case.image, case.labels),
        plan,
        extract_samples(case.image, case.labels, plan),
    )


def _coarse_model_from(coarse) -> CoarseModel | None:
    if coarse is None:
        return None
    if isinstance(coarse, CoarseModel):
        model = coarse
    else:
        if coarse.regime != "coarse":
            raise CartsegError("incompatible-checkpoint", f"expected a coarse checkpoint, got {coarse.regime}")
        model = coarse.models(best=True).coarse
    model.eval()
    return model


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def predict_agents(agents: AgentTeam, image: Volume, plan: RoiPlan) -> FusedPrediction:
    was_training = agents.training
    agents.eval()
    param = next(agents.parameters())
    outs = []
    with torch.no_grad():
        for box in plan.boxes:
            roi = torch.from_numpy(image.array[box.slices].copy()).to(param.dtype)[None, None]
            outs.append(agents.agent(box.cartilage)(roi))
        fused = fuse(outs, plan, image.dims)
    agents.train(was_training)
    return fused


def _class_dscs(pred: np.ndarray, gt: np.ndarray) -> dict:
    return {c.key: dsc(pred == int(c), gt == int(c)) for c in Cartilage}


def _validate(models: Models, config: TrainConfig, items) -> dict | None:
    if not items:
        return None
    scores = []
    for item in items:
        if config.regime == "coarse":
            models.coarse.eval()
            pred = coarse_labels(models.coarse, item.image, config.coarse_factors).array
            models.coarse.train()
            scores.append(_class_dscs(pred, item.labels.array))
        else:
            fused = predict_agents(models.agents, item.tensors.image, item.plan)
            pred = argmax_labels(fused.probs[0].numpy()).array
            scores.append(_class_dscs(pred, item.tensors.labels.array))
    return {c.key: float(np.mean([s[c.key] for s in scores])) for c in Cartilage}


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _optimizers(config: TrainConfig, models: Models) -> dict:
    opts = {}
    if models.coarse is not None:
        opts["coarse"] = torch.optim.Adam(models.coarse.parameters(), lr=config.lr_agents, betas=(0.9, 0.999), eps=1e-8)
    if models.agents is not None:
        opts["agents"] = torch.optim.Adam(models.agents.parameters(), lr=config.lr_agents, betas=(0.9, 0.999), eps=1e-8)
    if models.disc is not None:
        opts["disc"] = torch.optim.SGD(models.disc.parameters(), lr=config.lr_discriminator, momentum=0.0)
    return opts


def _base_lr(name: str, config: TrainConfig) -> float:
    return config.lr_discriminator if name == "disc" else config.lr_agents


def _format_log(record: dict) -> str:
    parts = [f"epoch={record['epoch']}"]
    for k, v in record["losses"].items():
        parts.append(f"{k}={v:.6f}")
    if record.get("val_dsc"):
        parts += [f"val_dsc_{k}={v:.4f}" for k, v in record["val_dsc"].items()]
    parts += [f"lr_{k}={v:.6g}" for k, v in record["lr"].items()]
    return " ".join(parts)


def train(
    config: TrainConfig,
    dataset: Dataset,
    resume: Checkpoint | None = None,
    coarse=None,
    warm_start: Checkpoint | None = None,
    log_path=None,
    sources: dict | None = None,
) -> Checkpoint:
    """Train ``config.regime`` up to ``config.epochs`` total epochs.

    ``resume`` continues a checkpoint of the same regime; ``warm_start`` copies
    agent parameters from a p1/p2 checkpoint into a fresh run; ``coarse`` (a
    checkpoint or model) supplies ROIs when ``roi_source`` is ``coarse-centroid``.
    """
    set_deterministic(config.deterministic)
    train_cases = dataset.split("train")
    if not train_cases:
        raise CartsegError("no-training-data", "dataset has no train cases")
    coarse_model = None
    if config.regime != "coarse":
        if config.roi_source == "coarse-centroid" and coarse is None:
            raise CartsegError("missing-coarse-checkpoint", "roi_source coarse-centroid needs --coarse")
        coarse_model = _coarse_model_from(coarse)

    models = build_models(config)
    opts = _optimizers(config, models)
    history: list = []
    start = 0
    best_val, best_epoch, best_state = None, 0, None
    sources = dict(sources or {})
    if resume is not None:
        if resume.regime != config.regime:
            raise CartsegError("incompatible-checkpoint", f"cannot resume {resume.regime} as {config.regime}")
        models.load_state_dict(resume.state)
        for name, opt in opts.items():
            if name in resume.optimizers:
                opt.load_state_dict(resume.optimizers[name])
        history = copy.deepcopy(resume.history)
        start = resume.epoch
        best_val, best_epoch, best_state = resume.best_val, resume.best_epoch, resume.best_state
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        sources = {**resume.sources, **sources}
    elif warm_start is not None:
        if config.regime == "coarse" or warm_start.regime == "coarse":
            raise CartsegError("incompatible-checkpoint", "warm start needs agent checkpoints")
        models.load_state_dict(warm_start.best_state or warm_start.state, prefixes=("agent.",))

    if config.regime == "coarse":
        items = [_prepare_coarse(c, config) for c in train_cases]
        val_items = [_prepare_coarse(c, config) for c in dataset.split("val")]
    else:
        items = [_prepare_agents(c, config, coarse_model) for c in train_cases]
        val_items = [_prepare_agents(c, config, coarse_model) for c in dataset.split("val")]

    weights = (config.w_s, config.w_m, config.w_a) if config.regime == "p2" else (config.w_s, 0.0, 0.0)
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for epoch in range(start, config.epochs):
            mult = lr_multiplier(epoch, config.lr_decay, config.decay_epochs)
            for name, opt in opts.items():
                for group in opt.param_groups:
                    group["lr"] = _base_lr(name, config) * mult
            order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
            sums: dict = {}
            t0 = time.perf_counter()
            for idx in order:
                item = items[idx]
                if config.regime == "coarse":
                    terms = _coarse_step(models, opts, item)
                else:
                    terms = _agent_step(models, opts, item, config, weights)
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
            losses = {k: v / len(items) for k, v in sums.items()}
            val = _validate(models, config, val_items)
            record = {
                "epoch": epoch + 1,
                "loss": losses["total"],
                "losses": losses,
                "val_dsc": val,
                "lr": {name: opt.param_groups[0]["lr"] for name, opt in opts.items()},
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(record)
            score = float(np.mean(list(val.values()))) if val else None
            if score is None or best_val is None or score > best_val:
                best_val, best_epoch, best_state = score, epoch + 1, models.state_dict()
            line = _format_log(record)
            logger.info("%s %s", config.regime, line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    return Checkpoint(
        regime=config.regime,
        epoch=max(start, config.epochs),
        config=config.to_dict(),
        state=models.state_dict(),
        optimizers={name: copy.deepcopy(opt.state_dict()) for name, opt in opts.items()},
        history=history,
        best_state=best_state,
        best_epoch=best_epoch,
        best_val=best_val,
        rng_state=torch.get_rng_state(),
        sources=sources,
    )


def _coarse_step(models: Models, opts: dict, item: CoarseItem) -> dict:
    opt = opts["coarse"]
    opt.zero_grad(set_to_none=True)
    loss = multiclass_ce(models.coarse(item.x), item.target)
    loss.backward()
    opt.step()
    return {"total": float(loss.detach()), "L_mce": float(loss.detach())}


def _agent_step(models: Models, opts: dict, item: AgentItem, config: TrainConfig, weights) -> dict:
    adversarial = config.regime == "p2" and weights[2] != 0.0
    factors = config.coarse_factors
    opt_a = opts["agents"]
    opt_a.zero_grad(set_to_none=True)
    with frozen(models.disc) if adversarial else contextlib.nullcontext():
        terms = agents_loss(
            models.agents,
            models.disc if adversarial else None,
            item.tensors,
            item.plan,
            weights,
            factors,
            item.samples,
        )
        terms.total.backward()
    opt_a.step()
    out = terms.as_floats()
    if config.regime == "p2":
        # agents are fixed here: the fused field is detached inside discriminator_loss
        opt_d = opts["disc"]
        opt_d.zero_grad(set_to_none=True)
        d_loss = discriminator_loss(models.disc, item.tensors.image_t, item.tensors.onehot_t, terms.fused, factors)
        d_loss.backward()
        opt_d.step()
        out["D"] = float(d_loss.detach())
    return out


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


@dataclass
class InferenceResult:
    labels: LabelVolume
    fused: np.ndarray  # (4, X, Y, Z)
    plan: RoiPlan


class Pipeline:
    """Coarse localisation, ROI agents and fusion, loaded once from checkpoints."""

    def __init__(self, coarse_ckpt: Checkpoint, agents_ckpt: Checkpoint, best: bool = True):
        if coarse_ckpt.regime != "coarse":
            raise CartsegError("incompatible-checkpoint", f"coarse checkpoint has regime {coarse_ckpt.regime}")
        if agents_ckpt.regime not in ("p1", "p2"):
            raise CartsegError("incompatible-checkpoint", f"agents checkpoint has regime {agents_ckpt.regime}")
        self.coarse_config = coarse_ckpt.train_config
        self.agent_config = agents_ckpt.train_config
        self.coarse = coarse_ckpt.models(best=best).coarse.eval()
        self.agents = agents_ckpt.models(best=best).agents.eval()

    def __call__(self, image: Volume) -> InferenceResult:
        cfg = self.agent_config
        if any(s > d for size in cfg.roi_sizes.values() for s, d in zip(size, image.dims)):
            raise CartsegError("incompatible-checkpoint", f"roi sizes {cfg.roi_sizes} exceed image {image.dims}")
        located = coarse_labels(self.coarse, image, self.coarse_config.coarse_factors)
        plan = locate_rois(located, cfg.roi_sizes, cfg.default_centers)
        fused = predict_agents(self.agents, image, plan).probs[0].numpy()
        return InferenceResult(hard_labels(fused, image.spacing, cfg.threshold), fused, plan)


def hard_labels(fused: np.ndarray, spacing, threshold: float = 0.5) -> LabelVolume:
    """Labels from a fused field.

    At 0.5 this is the plain argmax, which inside a single ROI is the same as
    thresholding that agent at 0.5. Other thresholds keep the most probable
    cartilage only where it exceeds ``threshold``.
    """
    if threshold == 0.5:
        return argmax_labels(fused, spacing)
    if not np.all(np.isfinite(fused)):
        raise CartsegError("non-finite-probability", "probability field contains NaN or inf")
    fg = fused[1:]
    labels = np.argmax(fg, axis=0) + 1
    labels[fg.max(axis=0) <= threshold] = 0
    return LabelVolume(labels.astype(np.uint8), spacing)


def infer(coarse_ckpt: Checkpoint, agents_ckpt: Checkpoint, image: Volume) -> InferenceResult:
    return Pipeline(coarse_ckpt, agents_ckpt)(image)
