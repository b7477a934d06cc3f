"""Slow-fast denoising network.

Slow context (state or rendered-grid frames plus proprioception) is encoded
once per chunk; the force stream is encoded by a gated recurrent cell so each
fast token depends only on its prefix; action tokens attend through a single
joint softmax over [slow | fast | action] keys with causal masks on the fast
and action groups.

The forward pass always computes at the full chunk width internally and
masks/slices shorter prefixes, so denoising a prefix is bitwise identical to
the corresponding rows of a longer run — the property the incremental
re-denoising loop in the runtime relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import HorizonConfig, ModelConfig


@dataclass(frozen=True)
class CausalMaskSpec:
    """Boolean visibility masks; entry (s, j) is True when action row s may
    attend to key j."""

    act_to_force: torch.Tensor
    act_self: torch.Tensor
    act_to_slow: torch.Tensor


def build_masks(horizons: HorizonConfig, n_slow_tokens: int | None = None) -> CausalMaskSpec:
    n = horizons.chunk_steps
    n_slow = horizons.obs_steps if n_slow_tokens is None else n_slow_tokens
    tri = torch.tril(torch.ones(n, n, dtype=torch.bool))
    return CausalMaskSpec(
        act_to_force=tri.clone(),
        act_self=tri.clone(),
        act_to_slow=torch.ones(n, n_slow, dtype=torch.bool),
    )


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freq = torch.exp(
            torch.arange(half, dtype=torch.float32, device=x.device)
            * (-math.log(10000.0) / (half - 1))
        )
        ang = x.float()[:, None] * freq[None, :]
        return torch.cat([ang.sin(), ang.cos()], dim=-1)


class StateFrameEncoder(nn.Module):
    """Two-layer perceptron applied per slow frame (scene features + proprio)."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, x):
        return self.net(x)


class GridFrameEncoder(nn.Module):
    """Three-layer conv stack over a rendered top-down grid, one grid per frame."""

    def __init__(self, grid_size: int, proprio_dim: int, embed_dim: int):
        super().__init__()
        self.grid_size = grid_size
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        feat = 32 * (grid_size // 8) ** 2
        self.head = nn.Linear(feat, embed_dim)
        self.proprio_proj = nn.Linear(proprio_dim, embed_dim)

    def forward(self, grids, proprio):
        b, t = grids.shape[:2]
        h = self.conv(grids.reshape(b * t, 1, self.grid_size, self.grid_size))
        h = self.head(h.reshape(b * t, -1)).reshape(b, t, -1)
        return h + self.proprio_proj(proprio)


def render_grid(
    frames: torch.Tensor,
    proprio: torch.Tensor,
    grid_size: int = 32,
    x_range: tuple[float, float] = (0.0, 0.4),
    y_range: tuple[float, float] = (0.0, 0.3),
) -> torch.Tensor:
    """Rasterize state frames into top-down grids: surface fill, target column,
    and a tool blob at the proprioceptive position. Row 0 is the top (max y)."""
    b, t = frames.shape[:2]
    g = torch.zeros(b, t, grid_size, grid_size, dtype=torch.float32)

    def to_col(x):
        return int(np.clip((x - x_range[0]) / (x_range[1] - x_range[0]) * (grid_size - 1), 0, grid_size - 1))

    def to_row(y):
        return int(np.clip((1.0 - (y - y_range[0]) / (y_range[1] - y_range[0])) * (grid_size - 1), 0, grid_size - 1))

    for i in range(b):
        for j in range(t):
            surf_y, target_x = float(frames[i, j, 0]), float(frames[i, j, 1])
            g[i, j, to_row(surf_y):, :] = 0.4
            g[i, j, :, to_col(target_x)] = torch.maximum(
                g[i, j, :, to_col(target_x)], torch.tensor(0.7)
            )
            r, c = to_row(float(proprio[i, j, 1])), to_col(float(proprio[i, j, 0]))
            g[i, j, max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 1.0
    return g


class ForceEncoder(nn.Module):
    """Strictly causal recurrent force encoder; token s is a function of
    forces 1..s only."""

    def __init__(self, force_dim: int, embed_dim: int):
        super().__init__()
        self.gru = nn.GRU(force_dim, embed_dim, batch_first=True)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, forces: torch.Tensor) -> torch.Tensor:
        if forces.dim() != 3 or forces.shape[1] < 1:
            raise ValueError("forces must be (batch, steps >= 1, force_dim)")
        out, _ = self.gru(forces)
        return self.norm(out)


class JointAttention(nn.Module):
    """Multi-head attention with one softmax over concatenated
    [slow | fast | action] keys, so per-query attention mass over the three
    groups sums to one."""

    def __init__(self, embed_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, queries, keys, allowed: torch.Tensor):
        b, nq, _ = queries.shape
        nk = keys.shape[1]
        q = self.q_proj(queries).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keys).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keys).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~allowed[None, None, :, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        return self.out_proj(out), attn


class DecoderBlock(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int, ffn_mult: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(embed_dim)
        self.attn = JointAttention(embed_dim, num_heads)
        self.ln_ffn = nn.LayerNorm(embed_dim)
        self.ffn = nn.Sequential(
            nn.Linear(embed_dim, ffn_mult * embed_dim),
            nn.SiLU(),
            nn.Linear(ffn_mult * embed_dim, embed_dim),
        )

    def forward(self, x, memory, allowed):
        h = self.ln_attn(x)
        attn_out, attn = self.attn(h, torch.cat([memory, h], dim=1), allowed)
        x = x + attn_out
        x = x + self.ffn(self.ln_ffn(x))
        return x, attn


class SlowFastDenoiser(nn.Module):
    """Denoiser over augmented-action chunks conditioned on slow tokens and a
    causal force-token stream."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        horizons: HorizonConfig,
        slow_feature_dim: int,
        proprio_dim: int,
        force_dim: int,
        target_dim: int,
    ):
        super().__init__()
        self.cfg = model_cfg
        self.horizons = horizons
        self.slow_feature_dim = slow_feature_dim
        self.proprio_dim = proprio_dim
        self.force_dim = force_dim
        self.target_dim = target_dim
        e = model_cfg.embed_dim
        n = horizons.chunk_steps

        if model_cfg.obs_mode == "grid":
            self.slow_encoder = GridFrameEncoder(model_cfg.grid_size, proprio_dim, e)
        else:
            self.slow_encoder = StateFrameEncoder(slow_feature_dim + proprio_dim, e)
        self.slow_norm = nn.LayerNorm(e)
        self.fast_encoder = ForceEncoder(force_dim, e)

        self.action_in = nn.Linear(target_dim, e)
        self.step_embed = nn.Sequential(SinusoidalEmbedding(e), nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.pos_action = nn.Parameter(torch.randn(1, n, e) * 0.02)
        self.pos_fast = nn.Parameter(torch.randn(1, n, e) * 0.02)
        self.pos_slow = nn.Parameter(torch.randn(1, horizons.obs_steps, e) * 0.02)

        self.blocks = nn.ModuleList(
            [DecoderBlock(e, model_cfg.num_heads, model_cfg.ffn_mult) for _ in range(model_cfg.num_layers)]
        )
        self.ln_out = nn.LayerNorm(e)
        self.head = nn.Linear(e, target_dim)

        masks = build_masks(horizons)
        # joint visibility over [slow | fast | action] keys for all chunk rows
        joint = torch.cat([masks.act_to_slow, masks.act_to_force, masks.act_self], dim=1)
        self.register_buffer("joint_mask", joint, persistent=False)
        self.n_slow_tokens = horizons.obs_steps

    def attention_groups(self) -> dict[str, slice]:
        n, n_slow = self.horizons.chunk_steps, self.n_slow_tokens
        return {
            "slow": slice(0, n_slow),
            "fast": slice(n_slow, n_slow + n),
            "self": slice(n_slow + n, n_slow + 2 * n),
        }

    def encode_slow(self, frames: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 3 or frames.shape[1] != self.horizons.obs_steps:
            raise ValueError(
                f"expected {self.horizons.obs_steps} slow frames, got shape {tuple(frames.shape)}"
            )
        if self.cfg.obs_mode == "grid":
            grids = render_grid(frames, proprio, self.cfg.grid_size)
            tokens = self.slow_encoder(grids, proprio)
        else:
            tokens = self.slow_encoder(torch.cat([frames, proprio], dim=-1))
        return self.slow_norm(tokens + self.pos_slow)

    def encode_fast(self, forces: torch.Tensor) -> torch.Tensor:
        return self.fast_encoder(forces)

    def forward(
        self,
        noisy_prefix: torch.Tensor,
        k,
        slow_tokens: torch.Tensor,
        fast_tokens: torch.Tensor,
        return_attention: bool = False,
    ):
        """Predict the denoising target for each prefix row.

        ``noisy_prefix`` and ``fast_tokens`` share a length n <= chunk_steps;
        row s of the output depends only on slow tokens, fast tokens 1..s and
        noisy rows 1..s.
        """
        b, n, d = noisy_prefix.shape
        n_full = self.horizons.chunk_steps
        if fast_tokens.shape[1] != n:
            raise ValueError(
                f"prefix length mismatch: chunk has {n} rows, {fast_tokens.shape[1]} fast tokens"
            )
        if n > n_full:
            raise ValueError(f"prefix length {n} exceeds chunk horizon {n_full}")
        if d != self.target_dim:
            raise ValueError(f"expected target dim {self.target_dim}, got {d}")

        pad = n_full - n
        if pad:
            noisy_prefix = torch.cat(
                [noisy_prefix, noisy_prefix.new_zeros(b, pad, d)], dim=1
            )
            fast_tokens = torch.cat(
                [fast_tokens, fast_tokens.new_zeros(b, pad, fast_tokens.shape[-1])], dim=1
            )

        k_t = torch.as_tensor(k, dtype=torch.long)
        if k_t.dim() == 0:
            k_t = k_t.expand(b)
        step = self.step_embed(k_t).unsqueeze(1)

        x = self.action_in(noisy_prefix) + self.pos_action + step
        memory = torch.cat([slow_tokens, fast_tokens + self.pos_fast], dim=1)

        attn_maps = []
        for block in self.blocks:
            x, attn = block(x, memory, self.joint_mask)
            if return_attention:
                attn_maps.append(attn[:, :, :n, :])
        out = self.head(self.ln_out(x))[:, :n, :]
        if return_attention:
            return out, attn_maps
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
