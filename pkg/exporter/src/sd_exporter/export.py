"""One-step-denoise attention export.

Registers forward hooks on every attention-probability module whose query
length matches the 16x16 stage, runs one guided denoising step from the
seeded initial latent, averages the captured tensors over layers and heads,
and writes the ATNZ records the evaluation pipeline consumes: ``cross``
(16, 16, n) with the start token excluded and each map max-normalized, and
``self`` (256, 256).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from sd_exporter.atnz_writer import encode_labels, write_atnz
from sd_exporter.model import (
    ATTN_RESOLUTION,
    LATENT_CHANNELS,
    LATENT_SIZE,
    AttentionProbs,
    SimpleTokenizer,
    build_model,
    ddim_alphas,
    sampling_timesteps,
)

__all__ = ["ExportConfig", "AttentionCapture", "export_attention"]


@dataclass(frozen=True)
class ExportConfig:
    model_id: str
    prompt: str
    subject_token_indices: tuple[int, ...]
    timestep_index: int = 0
    guidance_scale: float = 7.5
    steps: int = 50
    seed: int = 0
    output_path: str = "attention.atnz"

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError("prompt is empty")
        if not self.subject_token_indices:
            raise ValueError("need at least one subject token index")
        if self.guidance_scale <= 0:
            raise ValueError(f"guidance scale must be positive, got {self.guidance_scale}")
        if not 0 <= self.timestep_index < self.steps:
            raise ValueError(
                f"timestep index {self.timestep_index} out of range for {self.steps} steps"
            )
        object.__setattr__(
            self, "subject_token_indices", tuple(int(i) for i in self.subject_token_indices)
        )


class AttentionCapture:
    """Forward hooks over the model's attention-probability modules.

    Self-attention tensors are those whose key length equals the query
    length; everything else at the hooked resolution is cross-attention.
    Captures are grouped per category and averaged over layers and heads.
    """

    def __init__(self, model: torch.nn.Module, resolution: int = ATTN_RESOLUTION):
        self.cells = resolution * resolution
        self.cross: list[torch.Tensor] = []
        self.self_attn: list[torch.Tensor] = []
        self._handles = []
        hooked = 0
        for module in model.modules():
            if isinstance(module, AttentionProbs):
                self._handles.append(module.register_forward_hook(self._record))
                hooked += 1
        if hooked == 0:
            raise RuntimeError("model exposes no attention-probability modules to hook")
        self.hooked_layers = hooked

    def _record(self, module, inputs, output):
        # output: (batch, heads, query_len, key_len)
        if output.shape[-2] != self.cells:
            return
        if output.shape[-1] == self.cells:
            self.self_attn.append(output.detach())
        else:
            self.cross.append(output.detach())

    def clear(self):
        self.cross.clear()
        self.self_attn.clear()

    def remove(self):
        for handle in self._handles:
            handle.remove()
        self._handles.clear()

    def averaged(self) -> tuple[np.ndarray, np.ndarray]:
        """(cells, tokens) cross map and (cells, cells) self map, layer/head means."""
        if not self.cross or not self.self_attn:
            raise RuntimeError("no resolution-matched attention was captured")
        cross = torch.cat(self.cross, dim=1).mean(dim=(0, 1))
        self_map = torch.cat(self.self_attn, dim=1).mean(dim=(0, 1))
        return cross.numpy().astype(np.float64), self_map.numpy().astype(np.float64)


def _one_denoise_step(model, capture, latent, context, uncond_context, cfg):
    """Classifier-free-guided epsilon prediction plus a DDIM latent update.

    Attention is captured from the conditional pass only.
    """
    schedule = sampling_timesteps(cfg.steps)
    t = schedule[cfg.timestep_index]
    alphas = ddim_alphas()
    alpha_t = alphas[t]
    prev_index = t - (schedule[0] - schedule[1]) if len(schedule) > 1 else torch.tensor(0)
    alpha_prev = alphas[prev_index.clamp(min=0)]

    timestep = t[None].float()
    with torch.no_grad():
        capture.clear()
        eps_uncond = model(latent, timestep, uncond_context)
        capture.clear()  # keep only the conditional pass
        eps_text = model(latent, timestep, context)
    eps = eps_uncond + cfg.guidance_scale * (eps_text - eps_uncond)

    x0 = (latent - torch.sqrt(1.0 - alpha_t) * eps) / torch.sqrt(alpha_t)
    return torch.sqrt(alpha_prev) * x0 + torch.sqrt(1.0 - alpha_prev) * eps


def export_attention(cfg: ExportConfig) -> dict:
    """Run the export; returns a small manifest describing what was written."""
    tokenizer = SimpleTokenizer()
    token_ids, token_labels = tokenizer.tokenize(cfg.prompt)
    n_tokens = len(token_ids)
    for idx in cfg.subject_token_indices:
        if idx == 0:
            raise ValueError("index 0 is the start token and cannot be a subject")
        if not 0 < idx < n_tokens:
            raise ValueError(f"token index {idx} out of range for {n_tokens} tokens")

    model = build_model(cfg.model_id)
    with torch.no_grad():
        context = model.encode_prompt(token_ids)
        uncond_context = model.encode_prompt([token_ids[0], token_ids[-1]])

    generator = torch.Generator().manual_seed(cfg.seed)
    latent = torch.randn(
        (1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE), generator=generator
    )

    capture = AttentionCapture(model)
    try:
        denoised = _one_denoise_step(model, capture, latent, context, uncond_context, cfg)
        cross_full, self_map = capture.averaged()
    finally:
        capture.remove()

    selected = cross_full[:, list(cfg.subject_token_indices)]
    peaks = selected.max(axis=0)
    selected = selected / np.where(peaks > 0.0, peaks, 1.0)
    cross = selected.reshape(ATTN_RESOLUTION, ATTN_RESOLUTION, len(cfg.subject_token_indices))

    labels = [token_labels[i] for i in cfg.subject_token_indices]
    records = {
        "cross": cross.astype(np.float32),
        "self": self_map.astype(np.float32),
        "token_labels": encode_labels(labels),
        "denoised_latent": denoised.numpy().astype(np.float32),
    }
    write_atnz(records, cfg.output_path)
    return {
        "output_path": cfg.output_path,
        "hooked_layers": capture.hooked_layers,
        "tokens": token_labels,
        "subject_labels": labels,
        "cross_shape": tuple(cross.shape),
        "self_shape": tuple(self_map.shape),
    }
