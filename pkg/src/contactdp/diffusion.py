"""Noise schedules, forward diffusion, prediction parameterizations, and the
deterministic DDIM sampler.

Everything is stateless given an immutable :class:`NoiseSchedule`; tensors of
any floating dtype are accepted and the schedule coefficients are cast to
match, so float64 callers keep full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

SCHEDULE_KINDS = ("squared_cosine", "linear")
PARAMETERIZATIONS = ("epsilon", "sample", "velocity")


class SamplingNumericsError(RuntimeError):
    """Raised when the denoiser emits non-finite values during sampling."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions for each train step.

    ``alpha_bar`` has ``num_train_steps + 1`` entries, ``alpha_bar[0] == 1``
    (the clean sample), strictly decreasing, and strictly positive at the end.
    """

    num_train_steps: int
    alpha_bar: torch.Tensor
    kind: str

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.num_train_steps + 1,):
            raise ValueError("alpha_bar must have num_train_steps + 1 entries")
        if ab[0].item() != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if ab[-1].item() <= 0.0:
            raise ValueError("alpha_bar must stay positive")
        if not torch.all(ab[1:] < ab[:-1]):
            raise ValueError("alpha_bar must be strictly decreasing")

    def gather(self, k, like: torch.Tensor) -> torch.Tensor:
        """alpha_bar[k] shaped to broadcast against ``like`` and cast to its dtype."""
        k_t = torch.as_tensor(k, dtype=torch.long)
        ab = self.alpha_bar.to(like.dtype)[k_t]
        while ab.dim() < like.dim():
            ab = ab.unsqueeze(-1)
        return ab


def make_schedule(num_train_steps: int, kind: str = "squared_cosine") -> NoiseSchedule:
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be >= 1")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if kind == "squared_cosine":
        s = 0.008
        steps = np.arange(num_train_steps + 1, dtype=np.float64)
        f = np.cos((steps / num_train_steps + s) / (1 + s) * math.pi / 2.0) ** 2
        raw = f / f[0]
        # rebuild from per-step ratios clipped away from 0 so the product stays
        # strictly decreasing and positive
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        betas = np.linspace(1e-4, 0.02, num_train_steps, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(
        num_train_steps=num_train_steps,
        alpha_bar=torch.from_numpy(alpha_bar),
        kind=kind,
    )


def default_step_indices(num_train_steps: int, num_inference_steps: int) -> tuple[int, ...]:
    """Evenly spaced strictly decreasing step indices from K down to 0."""
    idx = np.linspace(num_train_steps, 0, num_inference_steps + 1)
    idx = np.unique(np.round(idx).astype(int))[::-1]
    return tuple(int(i) for i in idx)


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int
    eta: float = 0.0
    step_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.eta != 0.0:
            raise ValueError("only eta=0 (deterministic) sampling is implemented")
        if self.step_indices:
            diffs = np.diff(self.step_indices)
            if np.any(diffs >= 0):
                raise ValueError("step_indices must be strictly decreasing")

    def resolve_steps(self, sched: NoiseSchedule) -> tuple[int, ...]:
        if self.step_indices:
            if self.step_indices[0] > sched.num_train_steps or self.step_indices[-1] < 0:
                raise ValueError("step_indices out of schedule range")
            return self.step_indices
        return default_step_indices(sched.num_train_steps, self.num_inference_steps)


# -- forward process and parameterization algebra --------------------------
#
# With a = sqrt(alpha_bar) and b = sqrt(1 - alpha_bar):
#   noisy    x_k = a*x0 + b*eps
#   velocity v   = a*eps - b*x0
# and the inversions used below follow by substitution.


def forward_diffuse(clean, k, eps, sched: NoiseSchedule):
    clean = torch.as_tensor(clean)
    eps = torch.as_tensor(eps)
    if eps.shape != clean.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(clean.shape)}")
    ab = sched.gather(k, clean)
    return ab.sqrt() * clean + (1.0 - ab).sqrt() * eps


def velocity_target(clean, eps, k, sched: NoiseSchedule):
    clean = torch.as_tensor(clean)
    eps = torch.as_tensor(eps)
    if eps.shape != clean.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(clean.shape)}")
    ab = sched.gather(k, clean)
    return velocity_from_alpha_bar(clean, eps, ab)


def velocity_from_alpha_bar(clean, eps, alpha_bar):
    return torch.sqrt(alpha_bar) * eps - torch.sqrt(1.0 - alpha_bar) * clean


def training_target(kind: str, clean, eps, k, sched: NoiseSchedule):
    if kind == "epsilon":
        return torch.as_tensor(eps)
    if kind == "sample":
        return torch.as_tensor(clean)
    if kind == "velocity":
        return velocity_target(clean, eps, k, sched)
    raise ValueError(f"unknown parameterization {kind!r}")


def split_prediction(pred, noisy, k, kind: str, sched: NoiseSchedule):
    """Resolve a model prediction into (sample estimate, noise estimate)."""
    pred = torch.as_tensor(pred)
    noisy = torch.as_tensor(noisy)
    ab = sched.gather(k, noisy)
    a, b = ab.sqrt(), (1.0 - ab).sqrt()
    if kind == "velocity":
        x0 = a * noisy - b * pred
        eps = b * noisy + a * pred
    elif kind == "epsilon":
        eps = pred
        x0 = (noisy - b * eps) / a
    elif kind == "sample":
        x0 = pred
        eps = (noisy - a * x0) / b
    else:
        raise ValueError(f"unknown parameterization {kind!r}")
    return x0, eps


def convert_prediction(pred, noisy, k, from_kind: str, to_kind: str, sched: NoiseSchedule):
    """Exact algebraic conversion between prediction parameterizations."""
    if to_kind not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {to_kind!r}")
    if from_kind == to_kind:
        return torch.as_tensor(pred)
    x0, eps = split_prediction(pred, noisy, k, from_kind, sched)
    if to_kind == "sample":
        return x0
    if to_kind == "epsilon":
        return eps
    ab = sched.gather(k, torch.as_tensor(noisy))
    return velocity_from_alpha_bar(x0, eps, ab)


def ddim_sample(
    model_fn,
    initial_noise: torch.Tensor,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    parameterization: str = "velocity",
    clip_sample: float | None = None,
):
    """Deterministic (eta=0) DDIM sampling.

    ``model_fn(noisy, k) -> prediction`` in the declared parameterization.
    The output is a pure function of ``initial_noise`` and the model, so
    repeated calls with identical inputs are bitwise identical.
    """
    steps = cfg.resolve_steps(sched)
    x = initial_noise
    for i in range(len(steps) - 1):
        k_cur, k_next = steps[i], steps[i + 1]
        pred = model_fn(x, k_cur)
        if not torch.all(torch.isfinite(pred)):
            raise SamplingNumericsError(f"non-finite model output at diffusion step {k_cur}")
        x0_hat, eps_hat = split_prediction(pred, x, k_cur, parameterization, sched)
        if clip_sample is not None:
            x0_hat = x0_hat.clamp(-clip_sample, clip_sample)
        ab_next = sched.gather(k_next, x)
        x = ab_next.sqrt() * x0_hat + (1.0 - ab_next).sqrt() * eps_hat
    return x


def diffusion_loss(
    model_fn,
    clean_chunk: torch.Tensor,
    kind: str,
    sched: NoiseSchedule,
    *,
    generator: torch.Generator | None = None,
    k: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
):
    """Mean squared error against the target of the selected parameterization,
    with the diffusion step sampled uniformly per batch element.

    ``k`` and ``eps`` may be pinned for deterministic checks (gradient tests,
    oracle models); otherwise they are drawn from ``generator``.
    """
    batch = clean_chunk.shape[0]
    if k is None:
        k = torch.randint(1, sched.num_train_steps + 1, (batch,), generator=generator)
    if eps is None:
        eps = torch.randn(clean_chunk.shape, generator=generator, dtype=clean_chunk.dtype)
    noisy = forward_diffuse(clean_chunk, k, eps, sched)
    target = training_target(kind, clean_chunk, eps, k, sched)
    pred = model_fn(noisy, k)
    return torch.mean((pred - target) ** 2)
