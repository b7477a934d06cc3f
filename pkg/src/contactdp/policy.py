"""Inference-facing policy bundles.

:class:`DiffusionPolicy` owns the trained denoiser, schedule, sampler and
normalization statistics and exposes the two calls the runtime needs: cache a
chunk's slow context and noise once, then re-denoise growing prefixes of that
cached noise as new force samples arrive. Scripted policies (expert, random)
share the per-step interface used for demonstrations and sanity baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion
from .config import DiffusionConfig, HorizonConfig, ModelConfig
from .data import NormalizationStats, target_dim_for
from .model import SlowFastDenoiser
from .simworld import PlanarContactSim, ScriptedExpert

ACTION_DIM = 3


@dataclass
class ChunkCache:
    """Immutable per-chunk context: slow tokens and the chunk's noise tensor,
    drawn exactly once."""

    slow_tokens: torch.Tensor    # (1, n_slow, embed)
    initial_noise: torch.Tensor  # (chunk_steps, target_dim)
    chunk_start_time: int
    anchor_pose: np.ndarray      # (3,)


class DiffusionPolicy:
    def __init__(
        self,
        model: SlowFastDenoiser,
        schedule: diffusion.NoiseSchedule,
        sampler: diffusion.SamplerConfig,
        stats: NormalizationStats,
        horizons: HorizonConfig,
        aux: str,
        parameterization: str,
        clip_sample: float | None = 1.3,
    ):
        self.model = model.eval()
        self.schedule = schedule
        self.sampler = sampler
        self.stats = stats
        self.horizons = horizons
        self.aux = aux
        self.parameterization = parameterization
        self.clip_sample = clip_sample
        self.target_dim = target_dim_for(aux)

    @torch.no_grad()
    def start_chunk(
        self,
        slow_frames: np.ndarray,
        proprio: np.ndarray,
        anchor_pose: np.ndarray,
        chunk_start_time: int,
        generator: torch.Generator,
    ) -> ChunkCache:
        frames = torch.from_numpy(
            self.stats.normalize_slow(np.asarray(slow_frames, dtype=np.float64))
        ).float().unsqueeze(0)
        prop = torch.from_numpy(
            self.stats.normalize_proprio(np.asarray(proprio, dtype=np.float64))
        ).float().unsqueeze(0)
        slow_tokens = self.model.encode_slow(frames, prop)
        noise = torch.randn(
            self.horizons.chunk_steps, self.target_dim, generator=generator
        )
        return ChunkCache(
            slow_tokens=slow_tokens,
            initial_noise=noise,
            chunk_start_time=chunk_start_time,
            anchor_pose=np.asarray(anchor_pose, dtype=np.float64).copy(),
        )

    @torch.no_grad()
    def denoise_prefix(
        self,
        cache: ChunkCache,
        forces: np.ndarray,
        collect_attention: bool = False,
    ):
        """Denoise the first ``len(forces)`` rows of the cached noise with the
        cached slow tokens and the given raw force window; returns the
        denormalized augmented chunk (and optionally layer-1 attention)."""
        n = forces.shape[0]
        f_norm = torch.from_numpy(
            self.stats.normalize_force(np.asarray(forces, dtype=np.float64))
        ).float().unsqueeze(0)
        fast_tokens = self.model.encode_fast(f_norm)
        attention = {}

        def model_fn(noisy, k):
            if collect_attention:
                out, maps = self.model(
                    noisy, k, cache.slow_tokens, fast_tokens, return_attention=True
                )
                attention["maps"] = maps
                return out
            return self.model(noisy, k, cache.slow_tokens, fast_tokens)

        x0 = diffusion.ddim_sample(
            model_fn,
            cache.initial_noise[:n].unsqueeze(0),
            self.sampler,
            self.schedule,
            parameterization=self.parameterization,
            clip_sample=self.clip_sample,
        )[0]
        chunk = self.stats.denormalize_target(x0.double().numpy())
        if collect_attention:
            return chunk, self._group_masses(attention["maps"], n)
        return chunk

    def _group_masses(self, maps: list[torch.Tensor], n: int) -> dict[str, float]:
        """Layer-1 attention mass per token group, averaged over heads and the
        n valid query rows (from the final sampler step's forward pass)."""
        groups = self.model.attention_groups()
        first = maps[0][0, :, :n, :]  # (heads, n, keys)
        return {
            name: float(first[:, :, sl].sum(dim=-1).mean().item())
            for name, sl in groups.items()
        }


class ScriptedExpertPolicy:
    """Step policy wrapping the privileged scripted expert."""

    chunked = False

    def __init__(self, expert: ScriptedExpert):
        self.expert = expert

    def act(self, sim: PlanarContactSim) -> np.ndarray:
        return self.expert.act(sim)


class RandomPolicy:
    """Sanity-floor baseline: small random pose deltas."""

    chunked = False

    def __init__(self, seed: int = 0, scale: float = 0.01):
        self.rng = np.random.default_rng(seed)
        self.scale = scale

    def act(self, sim: PlanarContactSim) -> np.ndarray:
        d = self.rng.uniform(-self.scale, self.scale, size=3)
        d[2] = 0.0
        return d
