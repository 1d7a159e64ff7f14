"""Rectify crudely edited textures with DDIM inversion and self-attention KV injection."""
from .attention import CacheMissError, IndexMap, InjectionPolicy, KVCache, KVRecord, attend, concat_kv, resolve_injection
from .backend import Backend, StubBackend, TapDirective, load_backend
from .rectify import (
    ConfigError,
    RectifyConfig,
    RectifyResult,
    Trajectory,
    fine_texture_sample,
    invert_and_record,
    run_pipeline,
    self_rectify,
    structure_preserving_invert,
)
from .scheduler import NoiseSchedule, build_schedule, invert_step, predict_x0, sample_step

__version__ = "0.1.0"
