"""Two-phase optimization: composite-loss pretraining, then a short
finetuning pass, under a warmup + cosine learning-rate schedule with
optional restarts.

The optimizer is written out explicitly (Adam with bias correction and
decoupled weight decay) so every update is auditable and the serialized
TrainState resumes bit for bit in deterministic mode. All shuffling and
cropping randomness is derived statelessly from (seed, phase, epoch,
step), never from a mutable RNG carried across steps.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import data, losses, masks, metrics
from .errors import CheckpointError, ConfigError, DataError, MixexpoError, NumericError
from .model import (
    MixedExposureFormer,
    ModelConfig,
    apply_arrays,
    init_model,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)

PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for both phases."""

    lr_base: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 4
    warmup_epochs: int = 15
    eta_min: float = 1e-5
    epochs_pretrain: int = 50
    epochs_finetune: int = 10
    restarts: int = 0
    seed: int = 0
    deterministic: bool = True
    crop_size: int | None = None

    def validate(self) -> None:
        if self.lr_base <= 0:
            raise ConfigError(f"lr_base must be positive, got {self.lr_base}")
        if not (0 <= self.eta_min < self.lr_base):
            raise ConfigError(f"eta_min must satisfy 0 <= eta_min < lr_base, got {self.eta_min}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("warmup_epochs", "epochs_pretrain", "epochs_finetune", "restarts"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.warmup_epochs > self.epochs_pretrain:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must not exceed "
                f"epochs_pretrain ({self.epochs_pretrain})"
            )
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError(f"crop_size must be >= 1 or null, got {self.crop_size}")

    def to_dict(self) -> dict:
        return {
            "lr_base": self.lr_base,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "warmup_epochs": self.warmup_epochs,
            "eta_min": self.eta_min,
            "epochs_pretrain": self.epochs_pretrain,
            "epochs_finetune": self.epochs_finetune,
            "restarts": self.restarts,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "crop_size": self.crop_size,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass
class TrainState:
    """Everything a resume needs: weights, moments, counters, phase."""

    cfg: TrainConfig
    model: MixedExposureFormer
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    global_step: int = 0
    epoch: int = 0
    batch_index: int = 0
    phase: str = "pretrain"


def init_state(model: MixedExposureFormer, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    state = TrainState(cfg=cfg, model=model)
    _reset_moments(state)
    return state


def _reset_moments(state: TrainState) -> None:
    state.m = {n: torch.zeros_like(p) for n, p in state.model.named_parameters()}
    state.v = {n: torch.zeros_like(p) for n, p in state.model.named_parameters()}
    state.t = 0


def apply_determinism(cfg: TrainConfig) -> None:
    """Pin every source of nondeterminism for bit-exact reruns."""
    if cfg.deterministic:
        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ----------------------------------------------------------------- schedule


def lr_at(
    step: int,
    steps_per_epoch: int,
    cfg: TrainConfig,
    total_epochs: int | None = None,
    warmup_epochs: int | None = None,
) -> float:
    """Learning rate at a 0-based step of one phase.

    Linear warmup from 0 over warmup_epochs, then cosine decay from
    lr_base to eta_min over what remains. With restarts R > 0 the
    post-warmup span splits into R + 1 equal cycles, each starting back
    at lr_base and ending at eta_min; the jump happens only at a cycle
    start. Defaults describe the pretraining phase; finetuning passes its
    own spans.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ValueError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    total_epochs = cfg.epochs_pretrain if total_epochs is None else total_epochs
    warmup_epochs = cfg.warmup_epochs if warmup_epochs is None else warmup_epochs
    warmup_steps = warmup_epochs * steps_per_epoch
    total_steps = total_epochs * steps_per_epoch
    if warmup_steps > 0 and step <= warmup_steps:
        return cfg.lr_base * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return cfg.lr_base
    s = min(step - warmup_steps, span)
    cycles = cfg.restarts + 1
    cycle_len = span / cycles
    k = min(int(s // cycle_len), cycles - 1)
    u = (s - k * cycle_len) / cycle_len
    return cfg.eta_min + 0.5 * (cfg.lr_base - cfg.eta_min) * (1.0 + math.cos(math.pi * u))


# ---------------------------------------------------------------- optimizer


def adam_step(state: TrainState, grads: dict[str, torch.Tensor], lr: float) -> TrainState:
    """One Adam update with bias correction; weight decay is decoupled and
    subtracted after the update, so it never flows through the moments."""
    cfg = state.cfg
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    with torch.no_grad():
        for name, param in state.model.named_parameters():
            if name not in grads:
                raise ValueError(f"missing gradient for parameter {name}")
            g = grads[name]
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(cfg.adam_eps)
            param.addcdiv_(m / bc1, denom, value=-lr)
            if cfg.weight_decay:
                param.mul_(1.0 - lr * cfg.weight_decay)
    state.global_step += 1
    return state


# -------------------------------------------------------------- state files


def save_state(state: TrainState, path: str | os.PathLike) -> None:
    """Full resume snapshot in the checkpoint container format."""
    arrays = []
    for name, param in state.model.named_parameters():
        arrays.append((f"param.{name}", param.detach().cpu().numpy()))
    for name in state.m:
        arrays.append((f"m.{name}", state.m[name].cpu().numpy()))
        arrays.append((f"v.{name}", state.v[name].cpu().numpy()))
    meta = {
        "kind": "train_state",
        "model": state.model.config.to_dict(),
        "train": state.cfg.to_dict(),
        "progress": {
            "t": state.t,
            "global_step": state.global_step,
            "epoch": state.epoch,
            "batch_index": state.batch_index,
            "phase": state.phase,
        },
    }
    write_container(path, meta, arrays)


def load_state(path: str | os.PathLike) -> TrainState:
    meta, arrays = read_container(path)
    if not isinstance(meta, dict) or meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training-state file")
    try:
        model = MixedExposureFormer(ModelConfig.from_dict(meta["model"]))
        cfg = TrainConfig.from_dict(meta["train"])
        progress = meta["progress"]
        phase = progress["phase"]
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"corrupt training state in {path}: {exc}") from exc
    params = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    apply_arrays(model, params, str(path))
    state = TrainState(cfg=cfg, model=model)
    names = set(params)
    moment_names = {k[len("m.") :] for k in arrays if k.startswith("m.")}
    if moment_names != names:
        raise CheckpointError(f"corrupt training state in {path}: moments do not match parameters")
    state.m = {n: torch.from_numpy(arrays[f"m.{n}"]) for n in names}
    state.v = {n: torch.from_numpy(arrays[f"v.{n}"]) for n in names}
    state.t = int(progress["t"])
    state.global_step = int(progress["global_step"])
    state.epoch = int(progress["epoch"])
    state.batch_index = int(progress["batch_index"])
    state.phase = phase
    return state


# ------------------------------------------------------------ training loop


def _collate(samples: list[data.PairedSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    try:
        x = torch.from_numpy(np.stack([s.input for s in samples]))
        y = torch.from_numpy(np.stack([s.target for s in samples]))
        a = torch.from_numpy(np.stack([s.attn_target for s in samples]))
    except ValueError as exc:
        raise DataError(
            f"cannot batch samples of differing sizes ({exc}); set crop_size to equalize them"
        ) from exc
    return x.permute(0, 3, 1, 2), y.permute(0, 3, 1, 2), a.permute(0, 3, 1, 2)


def _phase_epochs(cfg: TrainConfig, phase: str) -> int:
    return cfg.epochs_pretrain if phase == "pretrain" else cfg.epochs_finetune


def train_phase(
    state: TrainState,
    manifest: data.DatasetManifest,
    weights: losses.LossWeights,
    phase: str,
    run_dir: str | os.PathLike | None = None,
    log_fn: Callable[[dict], None] | None = None,
    max_steps: int | None = None,
) -> TrainState:
    """Run one phase to its configured epoch count.

    Resumes from state.epoch/state.batch_index when the state already sits
    inside this phase. Every epoch end writes a model checkpoint and a
    resume snapshot when run_dir is given; max_steps stops early (possibly
    mid-epoch) after that many updates in this call, leaving a resumable
    state. A non-finite loss aborts before any update, so the last epoch
    checkpoint on disk stays good.
    """
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}; expected one of {PHASES}")
    weights.validate()
    cfg = state.cfg
    epochs = _phase_epochs(cfg, phase)
    fresh = state.phase != phase
    if fresh:
        state.phase = phase
        state.epoch = 0
        state.batch_index = 0
    if epochs == 0 or state.epoch >= epochs:
        return state
    if fresh:
        _reset_moments(state)  # each phase is its own optimization
    for e in manifest.entries:
        if e.mask_path is None or e.illum_path is None:
            raise DataError(f"entry {e.id} lacks precomputed masks or illum maps")

    steps_per_epoch = math.ceil(len(manifest.entries) / cfg.batch_size)
    warmup = cfg.warmup_epochs if phase == "pretrain" else 0
    extractor = losses.default_extractor() if phase == "pretrain" else None
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    epoch_offset = 0 if phase == "pretrain" else cfg.epochs_pretrain
    steps_done = 0

    for epoch in range(state.epoch, epochs):
        state.epoch = epoch
        shuffle_seed = data.derived_seed(cfg.seed, phase, "shuffle", epoch)
        for bi, samples in enumerate(data.make_batches(manifest, cfg.batch_size, shuffle_seed)):
            if bi < state.batch_index:
                continue
            if cfg.crop_size:
                rng = data.derived_rng(cfg.seed, phase, "crop", epoch, bi)
                samples = [data.random_crop_pair(s, cfg.crop_size, rng) for s in samples]
            x, y, attn_target = _collate(samples)
            state.model.train()
            output = state.model(x)
            if phase == "pretrain":
                report = losses.pretrain_total(output, y, x, attn_target, weights, extractor)
            else:
                report = losses.finetune_total(output, y, weights, target_attn=attn_target)
            if not torch.isfinite(report.total):
                raise NumericError(
                    f"non-finite loss in {phase} at epoch {epoch} step {state.global_step}; "
                    "the last epoch checkpoint on disk is still valid"
                )
            state.model.zero_grad(set_to_none=True)
            report.total.backward()
            grads = {
                n: p.grad for n, p in state.model.named_parameters() if p.grad is not None
            }
            step_in_phase = epoch * steps_per_epoch + bi
            lr = lr_at(step_in_phase + 1, steps_per_epoch, cfg, total_epochs=epochs, warmup_epochs=warmup)
            adam_step(state, grads, lr)
            state.batch_index = bi + 1
            steps_done += 1
            if log_fn is not None:
                log_fn(
                    {
                        "step": state.global_step,
                        "phase": phase,
                        "epoch": epoch,
                        "lr": lr,
                        "total": float(report.total.detach()),
                        "terms": report.per_term,
                    }
                )
            if max_steps is not None and steps_done >= max_steps:
                if ckpt_dir is not None:
                    save_state(state, ckpt_dir / "latest.state")
                return state
        state.epoch = epoch + 1
        state.batch_index = 0
        if ckpt_dir is not None:
            save_checkpoint(state.model, ckpt_dir / f"epoch_{epoch_offset + epoch:04d}.ckpt")
            save_state(state, ckpt_dir / "latest.state")
    return state


# ------------------------------------------------------------ orchestration


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MixexpoError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def run(
    run_dir: str | os.PathLike,
    manifest_path: str | os.PathLike,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: losses.LossWeights,
    mask_cfg: masks.MaskConfig | None = None,
    config_echo: str | os.PathLike | None = None,
    finetune_only: bool = False,
    init_from: str | os.PathLike | None = None,
    dry_run: bool = False,
    progress: Callable[[str], None] | None = None,
) -> dict:
    """End-to-end run: precompute, pretrain, finetune, evaluate.

    Writes the run directory (config echo, JSON-line train log, per-epoch
    checkpoints, sample outputs, eval report) and returns the artifact
    paths. dry_run validates configs and the manifest, then stops without
    creating or touching anything.
    """
    _stage("validate", model_cfg.validate)
    _stage("validate", train_cfg.validate)
    _stage("validate", weights.validate)
    if mask_cfg is not None:
        _stage("validate", mask_cfg.validate)
    if finetune_only and init_from is None:
        raise ConfigError("[validate] finetune_only needs init_from pointing at a checkpoint")
    manifest = _stage("manifest", data.load_manifest, manifest_path)
    if dry_run:
        return {"dry_run": True, "entries": len(manifest.entries)}

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if config_echo is not None:
        shutil.copyfile(config_echo, run_dir / "config.json")
    effective = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "losses": weights.to_dict(),
        "masks": (mask_cfg or masks.MaskConfig()).to_dict(),
    }
    with open(run_dir / "config_effective.json", "w", encoding="utf-8") as fh:
        json.dump(effective, fh, indent=2, sort_keys=True)
        fh.write("\n")

    needs_masks = any(e.mask_path is None for e in manifest.entries)
    needs_illum = any(e.illum_path is None for e in manifest.entries)
    if needs_masks:
        manifest = _stage("precompute", data.precompute_masks, manifest, mask_cfg or masks.MaskConfig())
    if needs_illum:
        manifest = _stage("precompute", data.precompute_illum, manifest)
    if needs_masks or needs_illum:
        data.save_manifest(manifest, run_dir / "manifest.json")

    apply_determinism(train_cfg)
    if init_from is not None:
        model = _stage("load", load_checkpoint, init_from, model_cfg)
    else:
        model = _stage("init", init_model, model_cfg)
    state = init_state(model, train_cfg)

    log_path = run_dir / "train.log"
    with open(log_path, "w", encoding="utf-8") as log_file:

        def log_fn(record: dict) -> None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            if progress is not None:
                progress(
                    f"step {record['step']:>6} {record['phase']:<9} epoch {record['epoch']:>4} "
                    f"total {record['total']:.4f} lr {record['lr']:.2e}"
                )

        if not finetune_only:
            state = _stage("pretrain", train_phase, state, manifest, weights, "pretrain", run_dir, log_fn)
        state = _stage("finetune", train_phase, state, manifest, weights, "finetune", run_dir, log_fn)

    final_ckpt = run_dir / "final.ckpt"
    save_checkpoint(state.model, final_ckpt)
    report = _stage(
        "eval",
        metrics.eval_dataset,
        state.model,
        manifest,
        out_dir=run_dir / "samples",
        checkpoint_name=final_ckpt.name,
    )
    metrics.save_report(report, run_dir / "eval.json")
    return {
        "run_dir": str(run_dir),
        "checkpoint": str(final_ckpt),
        "eval": str(run_dir / "eval.json"),
        "log": str(log_path),
        "aggregate": report["aggregate"],
    }
