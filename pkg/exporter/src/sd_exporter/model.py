"""A small latent text-to-image denoiser with genuine attention layers.

No pretrained checkpoints are reachable from this environment, so the model
identifier seeds the weight initialization instead of naming a download.
Everything else is the real mechanism: a UNet-style latent denoiser whose
16x16 stage runs multi-head self- and cross-attention, a deterministic
tokenizer with start/end tokens, sinusoidal time embeddings and a DDIM-style
one-step update. Attention probabilities pass through dedicated
``AttentionProbs`` modules so plain forward hooks can capture them.
"""

from __future__ import annotations

import math
import zlib

import torch
from torch import nn
from torch.nn import functional as F

LATENT_CHANNELS = 4
LATENT_SIZE = 32  # downsampled once -> 16x16 attention resolution
ATTN_RESOLUTION = 16
TEXT_DIM = 64
VOCAB_SIZE = 4096
SOT_ID = 0
EOT_ID = 1

TRAIN_TIMESTEPS = 1000
BETA_START = 1e-4
BETA_END = 2e-2


class SimpleTokenizer:
    """Deterministic wordpiece-free tokenizer: [sot] + crc32 word ids + [eot]."""

    def tokenize(self, prompt: str) -> tuple[list[int], list[str]]:
        words = [w for w in "".join(c if c.isalnum() else " " for c in prompt.lower()).split() if w]
        if not words:
            raise ValueError("prompt produced no tokens")
        ids = [SOT_ID]
        labels = ["[sot]"]
        for word in words:
            ids.append(2 + zlib.crc32(word.encode("utf-8")) % (VOCAB_SIZE - 2))
            labels.append(word)
        ids.append(EOT_ID)
        labels.append("[eot]")
        return ids, labels


class AttentionProbs(nn.Module):
    """Computes softmax(q k^T / sqrt(d)); its output IS the attention tensor.

    Keeping this as a separate module lets callers capture real attention
    probabilities with ordinary forward hooks, without touching the layers.
    """

    def forward(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        scale = q.shape[-1] ** -0.5
        return torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)


class MultiHeadAttention(nn.Module):
    """Self-attention when no context is given, cross-attention otherwise."""

    def __init__(self, dim: int, context_dim: int | None, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        context_dim = dim if context_dim is None else context_dim
        self.heads = heads
        self.is_cross = context_dim != dim
        self.to_q = nn.Linear(dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, dim)
        self.probs = AttentionProbs()

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, -1).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        attn = self.probs(q, k)
        out = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, head_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, None, heads, head_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, context_dim, heads, head_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), context)
        return x + self.mlp(self.norm3(x))


def _sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class LatentDenoiser(nn.Module):
    """Latent 4x32x32 -> epsilon prediction, attention at the 16x16 stage."""

    def __init__(self, channels: int = 32, heads: int = 4, head_dim: int = 16, blocks: int = 2):
        super().__init__()
        mid = channels * 2
        self.token_embed = nn.Embedding(VOCAB_SIZE, TEXT_DIM)
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, channels, 3, padding=1)
        self.down = nn.Conv2d(channels, mid, 3, stride=2, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(mid, mid), nn.SiLU(), nn.Linear(mid, mid))
        self.blocks = nn.ModuleList(
            TransformerBlock(mid, TEXT_DIM, heads, head_dim) for _ in range(blocks)
        )
        self.up = nn.ConvTranspose2d(mid, channels, 4, stride=2, padding=1)
        self.conv_out = nn.Conv2d(channels, LATENT_CHANNELS, 3, padding=1)

    def encode_prompt(self, token_ids: list[int]) -> torch.Tensor:
        ids = torch.tensor(token_ids, dtype=torch.long)
        positions = _sinusoidal(torch.arange(len(token_ids)), TEXT_DIM)
        return (self.token_embed(ids) + positions)[None, :, :]

    def forward(self, latent: torch.Tensor, timestep: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(latent)
        h = self.down(F.silu(h))
        b, c, gh, gw = h.shape
        t_emb = self.time_mlp(_sinusoidal(timestep, c))
        h = h + t_emb[:, :, None, None]
        tokens = h.flatten(2).transpose(1, 2)  # (b, gh*gw, c)
        for block in self.blocks:
            tokens = block(tokens, context)
        h = tokens.transpose(1, 2).view(b, c, gh, gw)
        h = self.up(h)
        return self.conv_out(h)


def build_model(model_id: str) -> LatentDenoiser:
    """Deterministic model for an identifier: the id seeds the weights."""
    seed = zlib.crc32(model_id.encode("utf-8"))
    torch.manual_seed(seed)
    model = LatentDenoiser()
    model.eval()
    return model


def ddim_alphas() -> torch.Tensor:
    betas = torch.linspace(BETA_START, BETA_END, TRAIN_TIMESTEPS)
    return torch.cumprod(1.0 - betas, dim=0)


def sampling_timesteps(steps: int) -> torch.Tensor:
    """Descending train-timestep indices for a sampling run of the given length."""
    if steps < 1 or steps > TRAIN_TIMESTEPS:
        raise ValueError(f"steps must be in [1, {TRAIN_TIMESTEPS}], got {steps}")
    grid = torch.linspace(0, TRAIN_TIMESTEPS - 1, steps).round().long()
    return grid.flip(0)
