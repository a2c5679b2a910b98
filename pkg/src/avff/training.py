"""Stage-1 self-supervised and stage-2 supervised training loops."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .checkpoint import load_params, save_params
from .config import ModelConfig
from .data.manifest import Manifest
from .data.sampling import (
    Batch, ClipStore, class_weights, collate, make_stage1_batch, make_stage2_batch, split_by_source,
)
from .inference import infer_manifest, summarize
from .losses import (
    LossReport, adversarial_losses, combined_generator_loss, contrastive_loss, cross_entropy,
    gather_tokens, gradient_penalty, reconstruction_loss,
)
from .masking import apply_mask, draw_batch_masks
from .model import AVFF
from .tokenizer import slice_index

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "split", "l_c", "l_rec", "l_adv_g", "l_adv_d", "l_total_g", "l_ce",
                 "acc", "auc", "ap", "lr", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    contrastive_only: bool = False
    no_cross_modal_fusion: bool = False
    random_masking: bool = False
    features_only: bool = False
    cross_modal_only: bool = False
    mean_pool_reduction: bool = False
    frozen_backbone: bool = False

    def __post_init__(self) -> None:
        if self.features_only and self.cross_modal_only:
            raise ValueError("features_only and cross_modal_only are mutually exclusive")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "AblationFlags":
        known = {f.name for f in dataclasses.fields(cls)}
        names = [n.replace("-", "_") for n in names]
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ValueError(f"unknown ablation flags {unknown}; choose from {sorted(known)}")
        return cls(**{n: True for n in names})

    @property
    def feature_mode(self) -> str:
        # stage-1 switches (contrastive_only, random_masking, ...) leave the
        # stage-2 features alone; A2V/V2A are trained there in any case
        if self.features_only:
            return "features"
        if self.cross_modal_only:
            return "cross"
        return "both"


def build_model(cfg: ModelConfig, flags: AblationFlags = AblationFlags()) -> AVFF:
    torch.manual_seed(cfg.seed)
    return AVFF(cfg, feature_mode=flags.feature_mode, mean_pool=flags.mean_pool_reduction)


def _param_groups(named, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for name, p in named:
        (no_decay if p.dim() < 2 or name.endswith(".pos") else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def warmup_cosine(total_steps: int, warmup_fraction: float):
    warmup = int(round(total_steps * warmup_fraction))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
    return factor


@dataclass
class TrainState:
    model: AVFF
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    rng: np.random.Generator
    critic_optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    epoch: int = 0
    best_metric: float | None = None

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def trainer_state(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "critic_optimizer": self.critic_optimizer.state_dict() if self.critic_optimizer else None,
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step, "epoch": self.epoch, "best_metric": self.best_metric,
        }

    def load_trainer_state(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        if self.critic_optimizer and state["critic_optimizer"]:
            self.critic_optimizer.load_state_dict(state["critic_optimizer"])
        self.rng.bit_generator.state = json.loads(state["rng"])
        self.step, self.epoch, self.best_metric = state["step"], state["epoch"], state["best_metric"]


def init_stage1(cfg: ModelConfig, flags: AblationFlags, total_steps: int, model: AVFF | None = None) -> TrainState:
    model = model or build_model(cfg, flags)
    opt = torch.optim.AdamW(_param_groups(model.group(AVFF.GENERATOR), cfg.weight_decay),
                            lr=cfg.stage1_lr, betas=(0.9, 0.95))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(total_steps, cfg.warmup_fraction))
    critic_opt = torch.optim.RMSprop(model.parameters_of(AVFF.CRITIC), lr=cfg.critic_lr)
    return TrainState(model, opt, sched, np.random.default_rng(cfg.seed), critic_opt)


def init_stage2(cfg: ModelConfig, flags: AblationFlags, steps_per_epoch: int,
                model: AVFF | None = None) -> TrainState:
    model = model or build_model(cfg, flags)
    groups = AVFF.HEADS if flags.frozen_backbone else AVFF.HEADS + AVFF.BACKBONE
    opt = torch.optim.AdamW(_param_groups(model.group(groups), cfg.weight_decay), lr=cfg.stage2_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=max(1, cfg.stage2_restart_epochs * steps_per_epoch))
    return TrainState(model, opt, sched, np.random.default_rng(cfg.seed))


def _check_finite(loss: torch.Tensor, state: TrainState, report: LossReport) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {state.step} (epoch {state.epoch}): {report}")


def stage1_losses(model: AVFF, batch: Batch, cfg: ModelConfig, flags: AblationFlags,
                  rng: np.random.Generator) -> dict:
    """Forward pass of the representation-learning stage (no parameter updates)."""
    x_a, x_v = model.tokenize(batch.audio, batch.visual)
    a, v = model.encode(x_a, "a"), model.encode(x_v, "v")
    sources = batch.source_ids if cfg.exclude_same_source_negatives else None
    out = {"l_c": contrastive_loss(a, v, cfg.temperature, sources)}
    if flags.contrastive_only:
        zero = out["l_c"].new_zeros(())
        out.update(l_rec=zero, l_adv_g=zero, parts={})
        out["total"] = combined_generator_loss(out["l_c"], zero, zero, cfg.loss_weights)
        return out
    mask_a, mask_v = draw_batch_masks(cfg, rng, len(batch), complementary=not flags.random_masking)
    bundle = model.mask_and_fuse(a, v, mask_a, mask_v, cross_modal=not flags.no_cross_modal_fusion,
                                 allow_fill=flags.random_masking)
    recon = {"a": model.decode(bundle.a_fused, "a"), "v": model.decode(bundle.v_fused, "v")}
    target = {"a": x_a, "v": x_v}
    masks = {"a": mask_a, "v": mask_v}
    parts, real_msk, fake_msk = {}, {}, {}
    l_rec = l_adv = 0.0
    for p in ("a", "v"):
        _, pos = apply_mask(target[p], slice_index(target[p].shape[1], cfg.num_slices), masks[p])
        parts[f"l_rec_{p}"] = reconstruction_loss(target[p], recon[p], pos)
        real_msk[p], fake_msk[p] = gather_tokens(target[p], pos), gather_tokens(recon[p], pos)
        parts[f"l_adv_g_{p}"] = -model.discriminate(fake_msk[p], p).mean()
        l_rec = l_rec + parts[f"l_rec_{p}"]
        l_adv = l_adv + parts[f"l_adv_g_{p}"]
    out.update(l_rec=l_rec, l_adv_g=l_adv, parts=parts, real_msk=real_msk, fake_msk=fake_msk,
               masks=(mask_a, mask_v), bundle=bundle, recon=recon)
    out["total"] = combined_generator_loss(out["l_c"], l_rec, l_adv, cfg.loss_weights)
    return out


def critic_loss(model: AVFF, real_msk: dict, fake_msk: dict, cfg: ModelConfig,
                gp_rng: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    total, parts = 0.0, {}
    for p in ("a", "v"):
        critic = model.critic_a if p == "a" else model.critic_v
        _, l_d = adversarial_losses(real_msk[p], fake_msk[p].detach(), critic)
        parts[f"l_adv_d_{p}"] = l_d
        total = total + l_d
        if cfg.gradient_penalty > 0:
            total = total + cfg.gradient_penalty * gradient_penalty(real_msk[p], fake_msk[p].detach(),
                                                                    critic, gp_rng)
    return total, parts


def _scalar(x) -> float:
    return x.item() if isinstance(x, torch.Tensor) else float(x)


def stage1_step(state: TrainState, batch: Batch, cfg: ModelConfig,
                flags: AblationFlags) -> tuple[TrainState, LossReport]:
    """One generator update (loss weights from ``cfg.loss_weights``) then
    ``cfg.n_critic`` critic updates with weight clipping."""
    model = state.model
    model.train()
    critic_params = model.parameters_of(AVFF.CRITIC)
    for p in critic_params:
        p.requires_grad_(False)
    try:
        out = stage1_losses(model, batch, cfg, flags, state.rng)
    finally:
        for p in critic_params:
            p.requires_grad_(True)
    report = LossReport(l_c=out["l_c"].item(), l_rec=_scalar(out["l_rec"]), l_adv_g=_scalar(out["l_adv_g"]),
                        l_total_g=out["total"].item(),
                        per_modality={k: v.item() for k, v in out["parts"].items()})
    _check_finite(out["total"], state, report)
    state.optimizer.zero_grad(set_to_none=True)
    out["total"].backward()
    state.optimizer.step()
    state.scheduler.step()

    if not flags.contrastive_only:
        gp_rng = torch.Generator().manual_seed(int(state.rng.integers(2**31))) if cfg.gradient_penalty else None
        for _ in range(cfg.n_critic):
            l_d, parts = critic_loss(model, out["real_msk"], out["fake_msk"], cfg, gp_rng)
            state.critic_optimizer.zero_grad(set_to_none=True)
            l_d.backward()
            state.critic_optimizer.step()
            if cfg.gradient_penalty == 0:
                model.critic_a.clip_(cfg.wgan_clip)
                model.critic_v.clip_(cfg.wgan_clip)
        report.l_adv_d = l_d.item()
        report.per_modality.update({k: v.item() for k, v in parts.items()})
        _check_finite(l_d, state, report)
    state.step += 1
    return state, report


def stage2_step(state: TrainState, batch: Batch, cfg: ModelConfig,
                flags: AblationFlags) -> tuple[TrainState, LossReport]:
    """Unmasked feature extraction, classifier, cross-entropy, update."""
    if not bool(((batch.target == 0) | (batch.target == 1)).all()):
        raise TrainingError("stage-2 batch contains unlabeled samples")
    model = state.model
    model.train()
    with torch.set_grad_enabled(not flags.frozen_backbone):
        x_a, x_v = model.tokenize(batch.audio, batch.visual)
        bundle = model.features(model.encode(x_a, "a"), model.encode(x_v, "v"))
    f_a, f_v = bundle.f_a, bundle.f_v
    if flags.frozen_backbone:
        f_a, f_v = f_a.detach(), f_v.detach()
    loss = cross_entropy(model.classify(f_a, f_v), batch.target)
    report = LossReport(l_ce=loss.item())
    _check_finite(loss, state, report)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return state, report


# ---------------------------------------------------------------------------
# loop

class MetricsWriter:
    """Tab-separated metrics stream with a header line; absent fields empty."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        self.rows: list[dict] = []
        if append and path.exists():
            lines = path.read_text().splitlines()[1:]
            self.rows = [dict(zip(METRIC_FIELDS, ln.split("\t"))) for ln in lines]
        else:
            path.write_text("\t".join(METRIC_FIELDS) + "\n")
        self._pending: list[str] = []

    def add(self, **values) -> None:
        row = {k: values.get(k) for k in METRIC_FIELDS}
        self.rows.append(row)
        self._pending.append("\t".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
                                       for v in row.values()))

    def flush(self) -> None:
        if self._pending:
            with open(self.path, "a") as fh:
                fh.write("\n".join(self._pending) + "\n")
            self._pending = []


@dataclass
class TrainResult:
    model: AVFF
    final: Path
    best: Path
    metrics: Path
    history: list[dict] = field(default_factory=list)
    load_report: object = None


STAGE1_INIT = AVFF.GENERATOR + AVFF.CRITIC


@torch.no_grad()
def validate_stage1(model: AVFF, manifest: Manifest, cfg: ModelConfig, flags: AblationFlags,
                    store: ClipStore, n_batches: int = 2) -> float:
    rng = np.random.default_rng(cfg.seed + 7919)
    model.eval()
    totals = []
    for _ in range(n_batches):
        batch = collate(make_stage1_batch(manifest, cfg, rng, cfg.batch_size, store))
        totals.append(stage1_losses(model, batch, cfg, flags, rng)["total"].item())
    model.train()
    return float(np.mean(totals))


def run_training(cfg: ModelConfig, manifest: Manifest, stage: int, flags: AblationFlags = AblationFlags(),
                 out_dir: str | Path = "run", init_checkpoint: str | Path | None = None,
                 resume: bool = False, store: ClipStore | None = None,
                 max_epochs: int | None = None) -> TrainResult:
    """Epoch loop with per-epoch checkpoints, validation and best-model retention.

    Stage 1 keeps the checkpoint with the lowest validation generator loss,
    stage 2 the one with the highest validation AUC. ``max_epochs`` stops the
    loop early (as if interrupted) without changing the schedule.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 1 and any(r.is_fake for r in manifest):
        raise ValueError("stage 1 trains on real clips only; the manifest contains fakes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or ClipStore(manifest, cfg)
    train, val = split_by_source(manifest, cfg.val_fraction, cfg.seed)
    if stage == 1:
        spe = math.ceil(len(train.sources()) / (cfg.batch_size // 2))
        epochs = cfg.stage1_epochs
        state = init_stage1(cfg, flags, spe * epochs)
        step_fn = stage1_step
    else:
        spe = math.ceil(len(train) / cfg.batch_size)
        epochs = cfg.stage2_epochs
        state = init_stage2(cfg, flags, spe)
        step_fn = stage2_step
    load_report = None
    if init_checkpoint is not None:
        load_report = load_params(state.model, cfg, init_checkpoint,
                                  only=STAGE1_INIT if stage == 2 else None)
        log.info("initialised %d tensors, %d fresh", len(load_report.initialized), len(load_report.fresh))

    last_params, last_state = out_dir / "last.avfp", out_dir / "last_state.pt"
    best, final = out_dir / "best.avfp", out_dir / "final.avfp"
    metrics = MetricsWriter(out_dir / "metrics.tsv", append=resume and last_state.exists())
    if resume and last_state.exists():
        load_params(state.model, cfg, last_params)
        state.load_trainer_state(torch.load(last_state, weights_only=False))
        log.info("resumed at epoch %d, step %d", state.epoch, state.step)

    weights = class_weights(train) if stage == 2 else None
    stop = epochs if max_epochs is None else min(epochs, max_epochs)
    t0 = time.perf_counter()
    while state.epoch < stop:
        epoch = state.epoch + 1
        for _ in range(spe):
            if stage == 1:
                samples = make_stage1_batch(train, cfg, state.rng, cfg.batch_size, store)
            else:
                samples = make_stage2_batch(train, cfg, state.rng, cfg.batch_size, store, weights)
            lr = state.lr
            state, rep = step_fn(state, collate(samples), cfg, flags)
            fields = (dict(l_c=rep.l_c, l_rec=rep.l_rec, l_adv_g=rep.l_adv_g, l_adv_d=rep.l_adv_d,
                           l_total_g=rep.l_total_g) if stage == 1 else dict(l_ce=rep.l_ce))
            metrics.add(step=state.step, epoch=epoch, split="train", lr=lr,
                        wall_ms=int(1000 * (time.perf_counter() - t0)), **fields)
        state.epoch = epoch
        if len(val) and (epoch % cfg.val_every == 0 or epoch == epochs):
            if stage == 1:
                value = validate_stage1(state.model, val, cfg, flags, store)
                metrics.add(step=state.step, epoch=epoch, split="val", l_total_g=value,
                            wall_ms=int(1000 * (time.perf_counter() - t0)))
                improved = state.best_metric is None or value < state.best_metric
            else:
                summary = summarize(infer_manifest(val, state.model, cfg, store))
                value = summary["auc"] if not math.isnan(summary["auc"]) else summary["acc"]
                metrics.add(step=state.step, epoch=epoch, split="val", acc=summary["acc"],
                            auc=summary["auc"], ap=summary["ap"],
                            wall_ms=int(1000 * (time.perf_counter() - t0)))
                improved = state.best_metric is None or value > state.best_metric
            if improved:
                state.best_metric = value
                save_params(state.model, cfg, best)
        elif not len(val):
            save_params(state.model, cfg, best)
        metrics.flush()
        save_params(state.model, cfg, last_params)
        torch.save(state.trainer_state(), last_state)
    metrics.flush()
    if state.epoch >= epochs:
        save_params(state.model, cfg, final)
    return TrainResult(state.model, final, best, metrics.path, metrics.rows, load_report)
