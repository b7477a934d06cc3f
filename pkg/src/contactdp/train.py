"""Training: window materialization, EMA, checkpointing, deterministic runs."""

from __future__ import annotations

import copy
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .config import ExperimentConfig
from .data import (
    NormalizationStats,
    compute_normalization_stats,
    load_dataset,
    make_windows,
    target_dim_for,
    train_val_split,
)
from .model import SlowFastDenoiser
from .policy import DiffusionPolicy

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; a last-good checkpoint is kept."""


def build_model(config: ExperimentConfig, slow_dim: int, proprio_dim: int, force_dim: int) -> SlowFastDenoiser:
    return SlowFastDenoiser(
        config.model,
        config.horizons,
        slow_feature_dim=slow_dim,
        proprio_dim=proprio_dim,
        force_dim=force_dim,
        target_dim=target_dim_for(config.aux),
    )


def materialize_windows(episodes, horizons, aux, stats: NormalizationStats):
    """Stack every training window into normalized float32 tensors."""
    slow, prop, forces, targets = [], [], [], []
    for ep in episodes:
        for w in make_windows(ep, horizons, aux):
            slow.append(stats.normalize_slow(w.slow_frames))
            prop.append(stats.normalize_proprio(w.proprio))
            forces.append(stats.normalize_force(w.forces))
            targets.append(stats.normalize_target(w.target))
    to_t = lambda x: torch.from_numpy(np.stack(x)).float()
    return to_t(slow), to_t(prop), to_t(forces), to_t(targets)


class EMA:
    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    def state_dict(self) -> dict:
        return self.shadow


def train(
    config: ExperimentConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    seed: int | None = None,
) -> Path:
    """Train a policy on a demonstration dataset; returns the checkpoint path.

    Fully deterministic for a given (config, seed): init, batch order, noise
    draws and diffusion steps all come from explicitly seeded generators.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = config.train.seed if seed is None else seed

    episodes, _manifest = load_dataset(dataset_dir)
    train_eps, val_eps = train_val_split(episodes, config.train.val_fraction)
    stats = compute_normalization_stats(train_eps, config.horizons, config.aux)
    slow, prop, forces, targets = materialize_windows(train_eps, config.horizons, config.aux, stats)
    n_windows = targets.shape[0]
    logger.info("training on %d windows from %d episodes", n_windows, len(train_eps))

    torch.manual_seed(seed)
    model = build_model(config, slow.shape[-1], prop.shape[-1], forces.shape[-1])
    sched = diffusion.make_schedule(config.diffusion.train_steps, config.diffusion.schedule)
    gen = torch.Generator().manual_seed(seed + 1)

    opt = torch.optim.Adam(model.parameters(), lr=config.train.lr)
    total = config.train.steps
    lr_lambda = lambda step: 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda)
    ema = EMA(model, config.train.ema_decay)

    loss_curve: list[tuple[int, float]] = []
    last_good: dict | None = None

    model.train()
    for step in range(total):
        idx = torch.randint(n_windows, (config.train.batch_size,), generator=gen)
        slow_tok = model.encode_slow(slow[idx], prop[idx])
        fast_tok = model.encode_fast(forces[idx])
        model_fn = lambda noisy, k: model(noisy, k, slow_tok, fast_tok)
        loss = diffusion.diffusion_loss(
            model_fn, targets[idx], config.diffusion.parameterization, sched, generator=gen
        )
        if not torch.isfinite(loss):
            path = out_dir / "checkpoint_lastgood.pt"
            if last_good is not None:
                torch.save(last_good, path)
            raise TrainingDiverged(
                f"non-finite loss at step {step}; last good checkpoint at {path}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        ema.update(model)

        if step % config.train.log_every == 0 or step == total - 1:
            loss_curve.append((step, float(loss.item())))
            logger.info("step %d loss %.5f", step, loss.item())
        if step % config.train.checkpoint_every == 0:
            last_good = _checkpoint_dict(model, ema, config, stats, loss_curve, None)

    val_loss = None
    if val_eps:
        val_loss = _validation_loss(model, val_eps, config, stats, sched)
        logger.info("validation loss %.5f", val_loss)

    ckpt = _checkpoint_dict(model, ema, config, stats, loss_curve, val_loss)
    path = out_dir / "checkpoint.pt"
    torch.save(ckpt, path)
    return path


def _validation_loss(model, episodes, config, stats, sched) -> float:
    slow, prop, forces, targets = materialize_windows(episodes, config.horizons, config.aux, stats)
    gen = torch.Generator().manual_seed(12345)
    model.eval()
    with torch.no_grad():
        slow_tok = model.encode_slow(slow, prop)
        fast_tok = model.encode_fast(forces)
        loss = diffusion.diffusion_loss(
            lambda noisy, k: model(noisy, k, slow_tok, fast_tok),
            targets,
            config.diffusion.parameterization,
            sched,
            generator=gen,
        )
    model.train()
    return float(loss.item())


def _checkpoint_dict(model, ema, config: ExperimentConfig, stats, loss_curve, val_loss) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "model_state": copy.deepcopy(model.state_dict()),
        "ema_state": copy.deepcopy(ema.state_dict()),
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "training_signature": config.training_signature(),
        "stats": stats.to_dict(),
        "dims": {
            "slow": int(stats.slow_mean.shape[0]),
            "proprio": int(stats.proprio_mean.shape[0]),
            "force": int(stats.force_mean.shape[0]),
            "target": int(stats.target_lower.shape[0]),
        },
        "loss_curve": list(loss_curve),
        "val_loss": val_loss,
    }


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    required = {"model_state", "ema_state", "config", "config_hash", "training_signature", "stats"}
    missing = required - set(ckpt)
    if missing:
        raise ValueError(f"checkpoint {path} is missing fields: {sorted(missing)}")
    return ckpt


def load_policy(path: str | Path, use_ema: bool = True) -> tuple[DiffusionPolicy, dict]:
    """Rebuild an inference policy from a checkpoint; the stored config hash is
    validated against the stored config contents."""
    ckpt = load_checkpoint(path)
    config = ExperimentConfig.from_dict(ckpt["config"])
    if config.config_hash() != ckpt["config_hash"]:
        raise ValueError(
            f"checkpoint {path}: stored config hash {ckpt['config_hash']} does not match "
            f"its config contents ({config.config_hash()})"
        )
    stats = NormalizationStats.from_dict(ckpt["stats"])
    dims = ckpt["dims"]
    model = build_model(config, dims["slow"], dims["proprio"], dims["force"])
    model.load_state_dict(ckpt["ema_state"] if use_ema else ckpt["model_state"])
    model.eval()
    sampler = diffusion.SamplerConfig(
        num_inference_steps=config.diffusion.inference_steps, eta=config.diffusion.eta
    )
    sched = diffusion.make_schedule(config.diffusion.train_steps, config.diffusion.schedule)
    policy = DiffusionPolicy(
        model,
        sched,
        sampler,
        stats,
        config.horizons,
        aux=config.aux,
        parameterization=config.diffusion.parameterization,
        clip_sample=config.diffusion.clip_sample,
    )
    return policy, ckpt
