"""Latent diffusion (v1.x) adapter built on diffusers components.

Self-attention layers (``attn1``) are enumerated in network depth order
(down blocks, mid block, up blocks) and replaced by :class:`TapProcessor`,
which records or overrides their keys/values per call.
"""
from __future__ import annotations

import logging
import os
import re
from pathlib import Path

import torch

from ..attention import attend
from .base import AttentionTap, Backend, BackendUnavailableError

logger = logging.getLogger(__name__)

MODEL_PATH_ENV = "SELFRECT_MODEL_PATH"
DEFAULT_SITES = tuple(range(10, 16))

_GROUP_ORDER = {"down_blocks": 0, "mid_block": 1, "up_blocks": 2}
_NAME_RE = re.compile(r"^(down_blocks|mid_block|up_blocks)\.?(\d*)\.attentions\.(\d+)\.transformer_blocks\.(\d+)\.attn1$")


def self_attention_layer_names(unet) -> list[str]:
    """Names of all ``attn1`` modules, in depth order."""
    names = []
    for name, _ in unet.named_modules():
        m = _NAME_RE.match(name)
        if m:
            group, block, attn, tb = m.groups()
            names.append(((_GROUP_ORDER[group], int(block or 0), int(attn), int(tb)), name))
    return [name for _, name in sorted(names)]


class TapProcessor:
    """Self-attention processor that routes K/V through an :class:`AttentionTap`."""

    def __init__(self, site: int, tap: AttentionTap):
        self.site = site
        self.tap = tap

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, *args, **kwargs):
        if encoder_hidden_states is not None or attention_mask is not None:
            raise ValueError("TapProcessor only handles unmasked self-attention")
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        batch = hidden_states.shape[0]
        q = attn.to_q(hidden_states)
        k = attn.to_k(hidden_states)
        v = attn.to_v(hidden_states)
        head_dim = k.shape[-1] // attn.heads
        q, k, v = (x.view(batch, -1, attn.heads, head_dim).transpose(1, 2) for x in (q, k, v))
        if attn.norm_q is not None:
            q = attn.norm_q(q)
        if attn.norm_k is not None:
            k = attn.norm_k(k)

        k, v = self.tap(self.site, q, k, v)
        out = attend(q, k, v).transpose(1, 2).reshape(batch, -1, attn.heads * head_dim).to(q.dtype)
        out = attn.to_out[1](attn.to_out[0](out))

        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


def _place(model, device, dtype):
    model = model.to(device)
    if model.dtype != dtype:
        model = model.to(dtype)
    return model.eval()


class StableDiffusionBackend(Backend):
    name = "sd"
    native_resolution = 512

    def __init__(self, unet, vae, uncond_embedding: torch.Tensor, alphas_cumprod: torch.Tensor,
                 device="cpu", dtype=torch.float32, sites=DEFAULT_SITES):
        super().__init__(device, dtype)
        self.unet = _place(unet, self.device, dtype)
        self.vae = _place(vae, self.device, dtype)
        self.uncond = uncond_embedding.to(self.device, dtype)
        self.alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float32).cpu()
        self.scaling_factor = float(getattr(vae.config, "scaling_factor", 0.18215))
        self.downsample = 2 ** (len(vae.config.block_out_channels) - 1)
        self.layer_names = self_attention_layer_names(unet)
        self.num_sites = len(self.layer_names)
        self.site_widths = {}
        for site, name in enumerate(self.layer_names):
            module = unet.get_submodule(name)
            module.set_processor(TapProcessor(site, self.tap))
            self.site_widths[site] = module.inner_dim // module.heads
        self.default_sites = tuple(s for s in sites if s < self.num_sites)
        self.model_path: str | None = None

    def describe(self) -> dict:
        return {**super().describe(), "model_path": self.model_path, "num_sites": self.num_sites}

    @classmethod
    def from_pretrained(cls, path: str | None = None, device=None, dtype=torch.float32) -> "StableDiffusionBackend":
        path = path or os.environ.get(MODEL_PATH_ENV)
        if not path:
            raise BackendUnavailableError(
                f"no model weights configured: pass a checkpoint path or set {MODEL_PATH_ENV}"
            )
        if device is None:
            device = "cuda" if torch.cuda.is_available() else "cpu"
        try:
            from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendUnavailableError(f"diffusers/transformers not importable: {exc}") from exc
        local = Path(path).is_dir()
        kw = {"local_files_only": True} if local else {}
        try:
            unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet", **kw)
            vae = AutoencoderKL.from_pretrained(path, subfolder="vae", **kw)
            tokenizer = CLIPTokenizer.from_pretrained(path, subfolder="tokenizer", **kw)
            text_encoder = CLIPTextModel.from_pretrained(path, subfolder="text_encoder", **kw)
            scheduler = DDIMScheduler.from_pretrained(path, subfolder="scheduler", **kw)
        except (OSError, ValueError) as exc:
            raise BackendUnavailableError(f"cannot load checkpoint from {path!r}: {exc}") from exc

        with torch.no_grad():
            ids = tokenizer([""], padding="max_length", max_length=tokenizer.model_max_length,
                            return_tensors="pt").input_ids
            uncond = text_encoder(ids)[0]
        del text_encoder
        logger.info("loaded latent diffusion checkpoint from %s", path)
        backend = cls(unet, vae, uncond, scheduler.alphas_cumprod, device=device, dtype=dtype)
        backend.model_path = str(path)
        return backend

    def _encode(self, x):
        return self.vae.encode(x * 2 - 1).latent_dist.mode() * self.scaling_factor

    def _decode(self, z):
        return (self.vae.decode(z / self.scaling_factor).sample + 1) / 2

    def _forward(self, z, timestep):
        cond = self.uncond.expand(z.shape[0], -1, -1)
        return self.unet(z, timestep, encoder_hidden_states=cond).sample
