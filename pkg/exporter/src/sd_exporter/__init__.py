"""Attention exporter: one denoising step of a latent text-to-image model,
resolution-16 attention capture, ATNZ output."""

from sd_exporter.export import ExportConfig, export_attention
from sd_exporter.model import LatentDenoiser, SimpleTokenizer, build_model

__version__ = "0.1.0"
