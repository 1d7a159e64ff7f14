"""Self-attention KV recording, caching and injection routing.

Features are kept per head: a ``KVRecord`` holds tensors shaped
``(..., L, d)`` where ``L`` is the token (row) count and ``d`` the head width.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

SPILL_FORMAT_VERSION = 1

class CacheMissError(KeyError):
    def __init__(self, pass_label: str, site: int, t: int):
        self.pass_label, self.site, self.t = pass_label, site, t
        super().__init__(f"no cached KV for pass={pass_label!r} site={site} t={t}")

    def __str__(self) -> str:
        return self.args[0]


class CacheFrozenError(RuntimeError):
    pass


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise ``softmax(q k^T / sqrt(d))``."""
    _check_qkv(q, k, k)
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two dimensions."""
    _check_qkv(q, k, v)
    return F.scaled_dot_product_attention(q, k, v)


def _check_qkv(q, k, v):
    if k.shape[-2] < 1:
        raise ValueError("attention needs at least one key row")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"keys {tuple(k.shape)} and values {tuple(v.shape)} differ in row count")


@dataclass(frozen=True)
class KVRecord:
    keys: torch.Tensor
    values: torch.Tensor

    def __post_init__(self):
        if self.keys.shape[:-1] != self.values.shape[:-1] or self.keys.shape[-1] != self.values.shape[-1]:
            raise ValueError(f"keys {tuple(self.keys.shape)} and values {tuple(self.values.shape)} must match")

    @property
    def rows(self) -> int:
        return self.keys.shape[-2]

    @property
    def width(self) -> int:
        return self.keys.shape[-1]

    def to(self, device) -> "KVRecord":
        return KVRecord(self.keys.to(device), self.values.to(device))


def concat_kv(records: Sequence[KVRecord]) -> KVRecord:
    """Stack the rows of several records, in list order."""
    if not records:
        raise ValueError("concat_kv needs at least one record")
    if len(records) == 1:
        return records[0]
    widths = {r.width for r in records}
    if len(widths) != 1:
        raise ValueError(f"cannot concatenate records of widths {sorted(widths)}")
    device = records[0].keys.device
    return KVRecord(
        torch.cat([r.keys.to(device) for r in records], dim=-2),
        torch.cat([r.values.to(device) for r in records], dim=-2),
    )


class KVCache:
    """Write-once store of ``(site, t) -> KVRecord`` for one recording pass.

    ``offload=True`` keeps entries in host memory instead of on the device
    that produced them.
    """

    def __init__(self, pass_label: str, offload: bool = False):
        self.pass_label = pass_label
        self.offload = offload
        self._entries: dict[tuple[int, int], KVRecord] = {}
        self._widths: dict[int, int] = {}
        self._frozen = False

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __repr__(self) -> str:
        return f"KVCache({self.pass_label!r}, entries={len(self)}, frozen={self._frozen})"

    @property
    def frozen(self) -> bool:
        return self._frozen

    def keys(self):
        return self._entries.keys()

    def steps(self) -> list[int]:
        return sorted({t for _, t in self._entries})

    def sites(self) -> list[int]:
        return sorted({s for s, _ in self._entries})

    def put(self, site: int, t: int, record: KVRecord) -> None:
        if self._frozen:
            raise CacheFrozenError(f"cache {self.pass_label!r} is frozen; refusing write at site={site} t={t}")
        if (site, t) in self._entries:
            raise CacheFrozenError(f"cache {self.pass_label!r} already holds site={site} t={t}")
        width = self._widths.setdefault(site, record.width)
        if width != record.width:
            raise ValueError(f"site {site} width {record.width} != earlier width {width}")
        self._entries[(site, t)] = self._store(record)

    def _store(self, record: KVRecord) -> KVRecord:
        return record.to("cpu") if self.offload else record

    def offload_all(self) -> None:
        """Move every entry to host memory; later writes go there too."""
        if not self.offload:
            logger.warning("offloading KV cache %r (%d entries) to host memory", self.pass_label, len(self))
        self.offload = True
        self._entries = {k: r.to("cpu") for k, r in self._entries.items()}
        if torch.cuda.is_available():
            torch.cuda.empty_cache()

    def freeze(self) -> "KVCache":
        self._frozen = True
        return self

    def get(self, site: int, t: int) -> KVRecord:
        try:
            return self._entries[(site, t)]
        except KeyError:
            raise CacheMissError(self.pass_label, site, t) from None

    def total_bytes(self) -> int:
        return sum(r.keys.nbytes + r.values.nbytes for r in self._entries.values())

    # spill format: one .npz blob per (pass_label, site, t) plus manifest.json
    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for (site, t), rec in sorted(self._entries.items()):
            name = f"{_safe(self.pass_label)}__site{site:02d}__t{t:04d}.npz"
            np.savez(directory / name, keys=rec.keys.cpu().numpy(), values=rec.values.cpu().numpy())
            entries.append({
                "site": site, "t": t, "file": name,
                "keys_shape": list(rec.keys.shape), "values_shape": list(rec.values.shape),
                "width": rec.width, "dtype": str(rec.keys.dtype).removeprefix("torch."),
            })
        manifest = {"format_version": SPILL_FORMAT_VERSION, "pass_label": self.pass_label,
                    "frozen": self._frozen, "entries": entries}
        path = directory / f"{_safe(self.pass_label)}.manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, manifest_path: str | Path, device=None) -> "KVCache":
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != SPILL_FORMAT_VERSION:
            raise ValueError(f"unsupported KV spill format {manifest.get('format_version')!r}")
        cache = cls(manifest["pass_label"], offload=device in (None, "cpu"))
        for e in manifest["entries"]:
            with np.load(manifest_path.parent / e["file"]) as blob:
                keys, values = torch.from_numpy(blob["keys"]), torch.from_numpy(blob["values"])
            if list(keys.shape) != e["keys_shape"] or list(values.shape) != e["values_shape"]:
                raise ValueError(f"blob {e['file']} does not match its manifest shapes")
            rec = KVRecord(keys, values)
            cache.put(e["site"], e["t"], rec.to(device) if device is not None else rec)
        if manifest.get("frozen", True):
            cache.freeze()
        return cache


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


@dataclass(frozen=True)
class IndexMap:
    """Maps the current step to the cached step to read.

    ``reverse``: t -> T - t, ``same``: t -> t, ``offset``: t -> t + k clamped to [0, T].
    """

    kind: str = "reverse"
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("reverse", "same", "offset"):
            raise ValueError(f"unknown index map {self.kind!r}")

    def __call__(self, t: int, num_steps: int) -> int:
        if self.kind == "reverse":
            return num_steps - t
        if self.kind == "same":
            return t
        return min(max(t + self.k, 0), num_steps)

    @classmethod
    def parse(cls, text: str) -> "IndexMap":
        if text.startswith("offset"):
            return cls("offset", int(text.partition(":")[2] or 0))
        return cls(text)


@dataclass(frozen=True)
class InjectionPolicy:
    """Decides, per step and site, whether KV is injected and from where.

    ``phase="inversion"`` injects for ``t < phase_bound`` (the P parameter);
    ``phase="sampling"`` runs ``phase_bound`` plain steps first (the S
    parameter) and injects for ``t <= T - phase_bound``.
    """

    phase: str
    phase_bound: int
    num_steps: int
    active_sites: frozenset[int]
    index_map: IndexMap = IndexMap("reverse")
    sources: tuple[KVCache, ...] = field(default=())

    def __post_init__(self):
        if self.phase not in ("inversion", "sampling"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if not 0 <= self.phase_bound <= self.num_steps:
            raise ValueError(f"phase bound {self.phase_bound} outside [0, {self.num_steps}]")
        if self.injects_anywhere() and not self.sources:
            raise ValueError("an injecting policy needs at least one KV source")

    def injects_anywhere(self) -> bool:
        if not self.active_sites:
            return False
        if self.phase == "inversion":
            return self.phase_bound > 0
        return self.phase_bound < self.num_steps

    def is_active(self, t: int) -> bool:
        if self.phase == "inversion":
            return 0 <= t < self.phase_bound
        return 1 <= t <= self.num_steps - self.phase_bound

    def source_index(self, t: int) -> int:
        return self.index_map(t, self.num_steps)

    def required_entries(self) -> set[tuple[int, int]]:
        steps = range(self.num_steps) if self.phase == "inversion" else range(1, self.num_steps + 1)
        return {(s, self.source_index(t)) for t in steps if self.is_active(t) for s in self.active_sites}


def resolve_injection(policy: InjectionPolicy, site: int, t: int) -> KVRecord | None:
    """KV to inject at ``(site, t)``, or ``None`` for a plain step."""
    if site not in policy.active_sites or not policy.is_active(t):
        return None
    src = policy.source_index(t)
    return concat_kv([cache.get(site, src) for cache in policy.sources])


def missing_entries(policy: InjectionPolicy) -> list[tuple[str, int, int]]:
    """Every ``(pass_label, site, t)`` the policy would look up but cannot find."""
    need = sorted(policy.required_entries())
    return [(c.pass_label, s, t) for c in policy.sources for s, t in need if (s, t) not in c]


def injection_directives(policy: InjectionPolicy, t: int, sites: Iterable[int] | None = None):
    """Inject directives for every active site at step ``t`` (empty on plain steps)."""
    from .backend.base import TapDirective

    out = []
    for site in sorted(policy.active_sites if sites is None else sites):
        kv = resolve_injection(policy, site, t)
        if kv is not None:
            out.append(TapDirective.inject(site, kv))
    return out
