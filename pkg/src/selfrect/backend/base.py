from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from ..attention import KVRecord

RECORD, INJECT, PASSTHROUGH = "record", "inject", "passthrough"


class BackendUnavailableError(RuntimeError):
    """Raised when model weights (or the libraries to load them) are missing."""


@dataclass(frozen=True)
class TapDirective:
    site: int
    action: str = PASSTHROUGH
    injected_kv: KVRecord | None = None

    def __post_init__(self):
        if self.action not in (RECORD, INJECT, PASSTHROUGH):
            raise ValueError(f"unknown tap action {self.action!r}")
        if (self.action == INJECT) != (self.injected_kv is not None):
            raise ValueError("injected_kv must be given exactly when action is 'inject'")

    @classmethod
    def record(cls, site: int) -> "TapDirective":
        return cls(site, RECORD)

    @classmethod
    def inject(cls, site: int, kv: KVRecord) -> "TapDirective":
        return cls(site, INJECT, kv)


def record_all(sites: Iterable[int]) -> list[TapDirective]:
    return [TapDirective.record(s) for s in sites]


@dataclass(frozen=True)
class NoisePrediction:
    epsilon: torch.Tensor
    captured: dict[int, KVRecord]


def as_pixel_image(img, factor: int = 8) -> np.ndarray:
    """Validate/convert to an ``H x W x 3`` float32 array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} is not divisible by {factor}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


class AttentionTap:
    """Per-forward routing table consulted by every tapped self-attention site."""

    def __init__(self):
        self._directives: dict[int, TapDirective] = {}
        self.captured: dict[int, KVRecord] = {}

    def begin(self, directives: dict[int, TapDirective]) -> None:
        self._directives = directives
        self.captured = {}

    def end(self) -> dict[int, KVRecord]:
        captured, self.captured, self._directives = self.captured, {}, {}
        return captured

    def __call__(self, site: int, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
        d = self._directives.get(site)
        if d is None or d.action == PASSTHROUGH:
            return k, v
        if d.action == RECORD:
            self.captured[site] = KVRecord(k.detach(), v.detach())
            return k, v
        kv = d.injected_kv
        if kv.width != k.shape[-1] or kv.keys.shape[:-2] != k.shape[:-2]:
            raise ValueError(
                f"site {site}: injected KV {tuple(kv.keys.shape)} incompatible with native {tuple(k.shape)}"
            )
        return kv.keys.to(device=k.device, dtype=k.dtype), kv.values.to(device=v.device, dtype=v.dtype)


class Backend(abc.ABC):
    """Image/latent codec plus a tappable noise predictor.

    Subclasses set ``num_sites``, ``site_widths`` (head width per site),
    ``default_sites``, ``native_resolution`` and ``alphas_cumprod``, and
    route their self-attention layers through ``self.tap``.
    """

    downsample = 8
    latent_channels = 4
    num_sites: int
    site_widths: dict[int, int]
    default_sites: tuple[int, ...]
    native_resolution: int
    alphas_cumprod: torch.Tensor
    name = "backend"

    def __init__(self, device="cpu", dtype=torch.float32):
        self.device = torch.device(device)
        self.dtype = dtype
        self.tap = AttentionTap()
        self.calls = 0

    @abc.abstractmethod
    def _encode(self, x: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _decode(self, z: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _forward(self, z: torch.Tensor, timestep: int) -> torch.Tensor: ...

    def describe(self) -> dict:
        return {"name": self.name, "device": str(self.device), "dtype": str(self.dtype).removeprefix("torch.")}

    @torch.no_grad()
    def encode_image(self, img) -> torch.Tensor:
        arr = as_pixel_image(img, self.downsample)
        x = torch.from_numpy(arr).permute(2, 0, 1)[None].to(self.device, self.dtype)
        return self._encode(x)

    @torch.no_grad()
    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        if not torch.isfinite(z).all():
            raise ValueError("latent contains non-finite values")
        x = self._decode(z.to(self.device, self.dtype)).clamp(0, 1)
        return x[0].permute(1, 2, 0).float().cpu().numpy()

    def check_sites(self, sites: Iterable[int]) -> tuple[int, ...]:
        sites = tuple(sorted(set(int(s) for s in sites)))
        bad = [s for s in sites if not 0 <= s < self.num_sites]
        if bad:
            raise ValueError(f"attention sites {bad} outside [0, {self.num_sites}) for backend {self.name!r}")
        return sites

    def _validate(self, directives: Sequence[TapDirective]) -> dict[int, TapDirective]:
        table: dict[int, TapDirective] = {}
        for d in directives:
            if d.site in table:
                raise ValueError(f"duplicate directives for site {d.site}")
            if not 0 <= d.site < self.num_sites:
                raise ValueError(f"site {d.site} outside [0, {self.num_sites})")
            if d.action == INJECT and d.injected_kv.width != self.site_widths[d.site]:
                raise ValueError(
                    f"site {d.site}: injected KV width {d.injected_kv.width} != native width {self.site_widths[d.site]}"
                )
            table[d.site] = d
        return table

    @torch.no_grad()
    def predict_noise(self, z: torch.Tensor, t: int, directives: Sequence[TapDirective] = ()) -> NoisePrediction:
        """Unconditional noise estimate at native timestep ``t``, with taps applied."""
        table = self._validate(directives)
        self.tap.begin(table)
        try:
            eps = self._forward(z.to(self.device, self.dtype), int(t))
        finally:
            captured = self.tap.end()
        self.calls += 1
        expected = {s for s, d in table.items() if d.action == RECORD}
        if set(captured) != expected:
            raise RuntimeError(f"sites {sorted(expected - set(captured))} were never reached during the forward pass")
        return NoisePrediction(eps, captured)
