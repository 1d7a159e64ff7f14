from __future__ import annotations

from .base import (
    INJECT,
    PASSTHROUGH,
    RECORD,
    AttentionTap,
    Backend,
    BackendUnavailableError,
    NoisePrediction,
    TapDirective,
    as_pixel_image,
    record_all,
)
from .stub import StubBackend

BACKENDS = ("sd", "stub")


def load_backend(name: str = "sd", model_path: str | None = None, device=None, **kwargs) -> Backend:
    if name == "stub":
        return StubBackend(device=device or "cpu", **kwargs)
    if name == "sd":
        from .sd import StableDiffusionBackend

        return StableDiffusionBackend.from_pretrained(model_path, device=device, **kwargs)
    raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")


__all__ = [
    "AttentionTap", "Backend", "BackendUnavailableError", "NoisePrediction", "TapDirective",
    "StubBackend", "as_pixel_image", "load_backend", "record_all", "RECORD", "INJECT", "PASSTHROUGH",
]
