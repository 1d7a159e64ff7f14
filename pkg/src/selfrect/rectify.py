"""Structure-preserving inversion, fine-texture sampling and the two-round pipeline."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import (
    CacheMissError,
    IndexMap,
    InjectionPolicy,
    KVCache,
    injection_directives,
    missing_entries,
)
from .backend.base import Backend, NoisePrediction, TapDirective, record_all
from .scheduler import NoiseSchedule, build_schedule, invert_step, sample_step
from .target_prep import AUGMENTATIONS, build_augmentations

logger = logging.getLogger(__name__)

IR_EVAL_MODES = ("literal", "native-cache")

# observer(phase, t, z): called with every latent of every trajectory
Observer = Callable[[str, int, torch.Tensor], None]

_OOM = getattr(torch, "OutOfMemoryError", torch.cuda.OutOfMemoryError)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class RectifyConfig:
    steps: int = 50
    p1: int = 20
    p2: int = 5
    s1: int = 20
    s2: int = 5
    # None selects the backend's default sites
    sites: tuple[int, ...] | None = None
    ir_eval: str = "literal"
    # None keeps the reverse index map (t -> T - t); an int k uses t -> t + k
    offset: int | None = None
    augmentations: tuple[str, ...] = ()
    seed: int = 0
    offload_kv: bool = False

    def validate(self) -> "RectifyConfig":
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError("steps", f"must be a positive integer, got {self.steps!r}")
        for name in ("p1", "p2", "s1", "s2"):
            value = getattr(self, name)
            if not isinstance(value, int) or not 0 <= value <= self.steps:
                raise ConfigError(name, f"must be an integer in [0, {self.steps}], got {value!r}")
        if self.ir_eval not in IR_EVAL_MODES:
            raise ConfigError("ir_eval", f"must be one of {IR_EVAL_MODES}, got {self.ir_eval!r}")
        if self.sites is not None and (not self.sites or any(s < 0 for s in self.sites)):
            raise ConfigError("sites", f"must be a non-empty list of non-negative indices, got {self.sites!r}")
        for aug in self.augmentations:
            if aug not in AUGMENTATIONS:
                raise ConfigError("augmentations", f"unknown transform {aug!r}; choose from {sorted(AUGMENTATIONS)}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", f"must be an integer, got {self.seed!r}")
        return self

    @property
    def index_map(self) -> IndexMap:
        return IndexMap("reverse") if self.offset is None else IndexMap("offset", self.offset)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = None if self.sites is None else list(self.sites)
        d["augmentations"] = list(self.augmentations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RectifyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        d = dict(d)
        if d.get("sites") is not None:
            d["sites"] = tuple(d["sites"])
        if "augmentations" in d:
            d["augmentations"] = tuple(d["augmentations"])
        return cls(**d)


@dataclass
class Trajectory:
    latents: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.latents)

    def __getitem__(self, t: int) -> torch.Tensor:
        return self.latents[t]

    @property
    def num_steps(self) -> int:
        return len(self.latents) - 1


Inversion = tuple[Trajectory, KVCache]


def _latent(backend: Backend, image_or_latent) -> torch.Tensor:
    if isinstance(image_or_latent, torch.Tensor):
        return image_or_latent.to(backend.device, backend.dtype)
    return backend.encode_image(image_or_latent)


def _predict(backend: Backend, z, timestep, directives, caches: Sequence[KVCache] = ()) -> NoisePrediction:
    try:
        return backend.predict_noise(z, timestep, directives)
    except _OOM:
        if not caches or all(c.offload for c in caches):
            raise
        logger.warning("out of device memory at timestep %d; moving KV caches to host memory", timestep)
        for c in caches:
            c.offload_all()
        return backend.predict_noise(z, timestep, directives)


def invert_and_record(
    backend: Backend,
    image,
    sched: NoiseSchedule,
    sites: Sequence[int],
    label: str = "IR-inversion",
    record_final: bool = False,
    offload: bool = False,
    observer: Observer | None = None,
) -> Inversion:
    """Standard DDIM inversion, recording self-attention KV at every step.

    Entry ``(site, t)`` holds the KV computed on ``z_t`` during the step
    ``z_t -> z_{t+1}``.  ``record_final`` adds entries at ``t = T`` from one
    extra evaluation on ``z_T``.
    """
    z = _latent(backend, image)
    T = sched.num_steps
    cache = KVCache(label, offload=offload)
    latents = [z]
    directives = record_all(sites)
    if observer:
        observer(label, 0, z)
    for t in range(T):
        pred = _predict(backend, z, sched.inversion_timestep(t), directives, [cache])
        for site, kv in pred.captured.items():
            cache.put(site, t, kv)
        z = invert_step(z, pred.epsilon, t, sched)
        latents.append(z)
        if observer:
            observer(label, t + 1, z)
    if record_final:
        pred = _predict(backend, z, sched.sampling_timestep(T), directives, [cache])
        for site, kv in pred.captured.items():
            cache.put(site, T, kv)
    return Trajectory(latents), cache.freeze()


def record_literal_ir(
    backend: Backend,
    ir_traj: Trajectory,
    sched: NoiseSchedule,
    num_injected: int,
    sites: Sequence[int],
    index_map: IndexMap = IndexMap("reverse"),
    offload: bool = False,
) -> KVCache:
    """IR features for the first ``num_injected`` inversion steps, evaluated literally.

    Step ``t`` re-runs the noise predictor on ``z^IR_{map(t)}`` at the
    conditioning of inversion step ``t``.  Entries are keyed by ``t``.
    """
    cache = KVCache("IR-literal", offload=offload)
    directives = record_all(sites)
    for t in range(num_injected):
        src = index_map(t, sched.num_steps)
        pred = _predict(backend, ir_traj[src], sched.inversion_timestep(t), directives, [cache])
        for site, kv in pred.captured.items():
            cache.put(site, t, kv)
    return cache.freeze()


def _check_policy(policy: InjectionPolicy) -> None:
    missing = missing_entries(policy)
    if missing:
        raise CacheMissError(*missing[0])


def structure_preserving_invert(
    backend: Backend,
    target,
    ir: Inversion,
    P: int,
    sites: Sequence[int],
    sched: NoiseSchedule,
    ir_eval: str = "literal",
    index_map: IndexMap = IndexMap("reverse"),
    literal_cache: KVCache | None = None,
    observer: Observer | None = None,
    phase: str = "inversion",
) -> torch.Tensor:
    """Invert ``target`` with IR keys/values injected during the first ``P`` steps."""
    T = sched.num_steps
    if not 0 <= P <= T:
        raise ValueError(f"P={P} outside [0, {T}]")
    if ir_eval not in IR_EVAL_MODES:
        raise ValueError(f"unknown IR evaluation mode {ir_eval!r}")
    ir_traj, ir_cache = ir
    if len(ir_traj) != T + 1:
        raise ValueError(f"IR trajectory has {len(ir_traj)} latents, expected {T + 1}")

    policy = None
    if P > 0 and sites:
        if ir_eval == "literal":
            if literal_cache is None:
                literal_cache = record_literal_ir(backend, ir_traj, sched, P, sites, index_map)
            policy = InjectionPolicy("inversion", P, T, frozenset(sites), IndexMap("same"), (literal_cache,))
        else:
            policy = InjectionPolicy("inversion", P, T, frozenset(sites), index_map, (ir_cache,))
        _check_policy(policy)

    z = _latent(backend, target)
    if observer:
        observer(phase, 0, z)
    caches = list(policy.sources) if policy else []
    for t in range(T):
        directives = injection_directives(policy, t) if policy else []
        eps = _predict(backend, z, sched.inversion_timestep(t), directives, caches).epsilon
        z = invert_step(z, eps, t, sched)
        if observer:
            observer(phase, t + 1, z)
    return z


def fine_texture_sample(
    backend: Backend,
    start: torch.Tensor,
    refs: Sequence[Inversion],
    S: int,
    sites: Sequence[int],
    sched: NoiseSchedule,
    observer: Observer | None = None,
    phase: str = "sampling",
) -> torch.Tensor:
    """Sample from ``start``: ``S`` plain steps, then reference KV injection down to t = 1."""
    T = sched.num_steps
    if not 0 <= S <= T:
        raise ValueError(f"S={S} outside [0, {T}]")
    policy = None
    if S < T and sites:
        policy = InjectionPolicy("sampling", S, T, frozenset(sites), IndexMap("same"), tuple(c for _, c in refs))
        _check_policy(policy)
    z = start.to(backend.device, backend.dtype)
    if observer:
        observer(phase, T, z)
    caches = list(policy.sources) if policy else []
    for t in range(T, 0, -1):
        directives = injection_directives(policy, t) if policy else []
        eps = _predict(backend, z, sched.sampling_timestep(t), directives, caches).epsilon
        z = sample_step(z, eps, t, sched)
        if observer:
            observer(phase, t - 1, z)
    return z


def reconstruct(backend: Backend, image, sched: NoiseSchedule) -> np.ndarray:
    """Plain DDIM inversion followed by plain DDIM sampling."""
    traj, _ = invert_and_record(backend, image, sched, (), label="reconstruction")
    z0 = fine_texture_sample(backend, traj[-1], [], sched.num_steps, (), sched)
    return backend.decode_latent(z0)


def invert_references(backend: Backend, reference, augmentations: Sequence[str], sched: NoiseSchedule,
                      sites: Sequence[int], record_final: bool = True, offload: bool = False) -> list[Inversion]:
    """Recording inversions of the reference followed by its augmented copies."""
    images = [reference, *build_augmentations(reference, augmentations)]
    return [
        invert_and_record(backend, img, sched, sites, f"ref-inversion-{i}", record_final=record_final, offload=offload)
        for i, img in enumerate(images)
    ]


def self_rectify(
    backend: Backend,
    target,
    ir,
    reference,
    P: int,
    S: int,
    cfg: RectifyConfig | None = None,
) -> np.ndarray:
    """One round: structure-preserving inversion of ``target`` then fine-texture sampling."""
    cfg = (cfg or RectifyConfig()).validate()
    sites = backend.check_sites(cfg.sites or backend.default_sites)
    sched = build_schedule(cfg.steps, backend.alphas_cumprod)
    ir_inv = invert_and_record(backend, ir, sched, sites, record_final=cfg.ir_eval == "native-cache",
                               offload=cfg.offload_kv)
    refs = invert_references(backend, reference, cfg.augmentations, sched, sites, S == 0, cfg.offload_kv)
    z_T = structure_preserving_invert(backend, target, ir_inv, P, sites, sched, cfg.ir_eval, cfg.index_map)
    return backend.decode_latent(fine_texture_sample(backend, z_T, refs, S, sites, sched))


@dataclass
class RectifyResult:
    image: np.ndarray
    coarse: np.ndarray
    start_codes: list[torch.Tensor]
    timings: dict[str, float] = field(default_factory=dict)


def run_pipeline(
    backend: Backend,
    reference,
    target,
    cfg: RectifyConfig,
    observer: Observer | None = None,
    start_transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> RectifyResult:
    """Coarse-to-fine self-rectification: round 1 with (P1, S1), round 2 with (P2, S2).

    Both rounds use the initial target as inversion reference; round 2's
    target is the decoded round-1 output.  IR and reference inversions are
    computed once and shared by both rounds.  ``start_transform`` is applied
    to the round-1 start code (latent-space shuffle).
    """
    cfg.validate()
    sites = backend.check_sites(cfg.sites or backend.default_sites)
    sched = build_schedule(cfg.steps, backend.alphas_cumprod)
    torch.manual_seed(cfg.seed)
    timings = {}
    tic = time.perf_counter()

    ir_inv = invert_and_record(backend, target, sched, sites, "IR-inversion",
                               record_final=cfg.ir_eval == "native-cache", offload=cfg.offload_kv)
    literal = None
    if cfg.ir_eval == "literal" and max(cfg.p1, cfg.p2) > 0:
        literal = record_literal_ir(backend, ir_inv[0], sched, max(cfg.p1, cfg.p2), sites, cfg.index_map,
                                    offload=cfg.offload_kv)
    refs = invert_references(backend, reference, cfg.augmentations, sched, sites,
                             record_final=min(cfg.s1, cfg.s2) == 0, offload=cfg.offload_kv)
    timings["record"] = time.perf_counter() - tic

    current = target
    start_codes, outputs = [], []
    for rnd, (P, S) in enumerate(((cfg.p1, cfg.s1), (cfg.p2, cfg.s2)), start=1):
        tic = time.perf_counter()
        z_T = structure_preserving_invert(backend, current, ir_inv, P, sites, sched, cfg.ir_eval, cfg.index_map,
                                          literal_cache=literal, observer=observer, phase=f"round{rnd}/inversion")
        if rnd == 1 and start_transform is not None:
            z_T = start_transform(z_T)
        start_codes.append(z_T)
        z_0 = fine_texture_sample(backend, z_T, refs, S, sites, sched, observer=observer,
                                  phase=f"round{rnd}/sampling")
        current = backend.decode_latent(z_0)
        outputs.append(current)
        timings[f"round{rnd}"] = time.perf_counter() - tic
        logger.info("round %d done (P=%d, S=%d) in %.1fs", rnd, P, S, timings[f"round{rnd}"])
    return RectifyResult(outputs[1], outputs[0], start_codes, timings)
