"""Batch command line front end.

    selfrect --reference ref.png --target edit.png --mask mask.png --out runs/wood
    selfrect --reference ref.png --mode latent-shuffle --out runs/stationary
    selfrect ... --sweep "s1=10,20,30;s2=0,5,10" --p1 0 --p2 0
    selfrect --replay runs/wood/run.json --out runs/wood-again
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from PIL import Image, ImageDraw

from . import __version__
from .backend import BACKENDS, Backend, BackendUnavailableError, load_backend
from .imageio import hstack, load_image, load_mask, save_image, to_uint8
from .rectify import IR_EVAL_MODES, ConfigError, RectifyConfig, RectifyResult, run_pipeline
from .target_prep import ShuffleSpec, fill_background, latent_shuffle, patch_shuffle, prepare_guided_layout

logger = logging.getLogger("selfrect")

MODES = ("nonstationary", "patch-shuffle", "latent-shuffle", "guided", "image-edit")
INTERMEDIATE_EVERY = 10
RECORD_NAME = "run.json"

BackendFactory = Callable[[], Backend]


@dataclass
class RunManifest:
    mode: str
    reference: str
    out: str
    config: RectifyConfig = field(default_factory=RectifyConfig)
    target: str | None = None
    mask: str | None = None
    layout: str | None = None
    save_intermediates: bool = False
    backend: str = "sd"
    model: str | None = None
    device: str | None = None
    size: int | None = None
    noise_amplitude: float = 0.1
    shuffle_block: int = 64
    latent_block: int = 8

    def validate(self) -> "RunManifest":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ConfigError("backend", f"must be one of {BACKENDS}, got {self.backend!r}")
        required = {"reference": self.reference}
        if self.mode in ("nonstationary", "image-edit"):
            required |= {"target": self.target, "mask": self.mask}
        if self.mode == "guided":
            required["layout"] = self.layout
        for name, path in required.items():
            if not path:
                raise ConfigError(name, f"required for mode {self.mode!r}")
            if not Path(path).is_file():
                raise ConfigError(name, f"no such file: {path}")
        if self.noise_amplitude < 0:
            raise ConfigError("noise_amplitude", "must be non-negative")
        if self.shuffle_block < 1 or self.latent_block < 1:
            raise ConfigError("shuffle_block", "block sizes must be positive")
        self.config.validate()
        return self

    def input_paths(self) -> dict[str, str]:
        return {k: v for k in ("reference", "target", "mask", "layout") if (v := getattr(self, k))}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def prepare_inputs(m: RunManifest, size: int, backend: Backend):
    """Reference image, prepared target, and the optional round-1 start-code transform."""
    reference = load_image(m.reference, size)
    seed = m.config.seed
    start_transform = None
    if m.mode in ("nonstationary", "image-edit"):
        target = fill_background(load_image(m.target, size), load_mask(m.mask, size), reference, seed)
    elif m.mode == "patch-shuffle":
        target = patch_shuffle(reference, ShuffleSpec(m.shuffle_block, seed))
    elif m.mode == "latent-shuffle":
        target = reference
        spec = ShuffleSpec(m.latent_block, seed)
        start_transform = lambda z: latent_shuffle(z, spec)  # noqa: E731
    else:
        target = prepare_guided_layout(load_image(m.layout, size), m.noise_amplitude, seed)
    return reference, target, start_transform


class IntermediateRecorder:
    """Keeps every ``INTERMEDIATE_EVERY``-th latent of each inversion/sampling phase."""

    def __init__(self):
        self.frames: dict[str, list[tuple[int, object]]] = {}

    def __call__(self, phase, t, z):
        if phase.startswith("round") and t % INTERMEDIATE_EVERY == 0:
            self.frames.setdefault(phase, []).append((t, z.detach().clone()))

    def write(self, backend: Backend, directory: Path) -> list[Path]:
        paths = []
        for phase, frames in self.frames.items():
            strip = hstack([backend.decode_latent(z) for _, z in frames])
            paths.append(save_image(strip, directory / f"{phase.replace('/', '_')}.png"))
        return paths


def run(m: RunManifest, backend_factory: BackendFactory | None = None, backend: Backend | None = None) -> int:
    """Execute one manifest; returns a process exit status."""
    try:
        m.validate()
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return 2
    try:
        if backend is None:
            backend = (backend_factory or _default_factory(m))()
        _run(m, backend)
    except (BackendUnavailableError, ConfigError, ValueError, OSError) as exc:
        logger.error("run failed: %s", exc)
        return 1
    return 0


def _default_factory(m: RunManifest) -> BackendFactory:
    return lambda: load_backend(m.backend, m.model, m.device)


def _run(m: RunManifest, backend: Backend) -> RectifyResult:
    out = Path(m.out)
    out.mkdir(parents=True, exist_ok=True)
    size = m.size or backend.native_resolution
    tic = time.perf_counter()
    reference, target, start_transform = prepare_inputs(m, size, backend)
    recorder = IntermediateRecorder() if m.save_intermediates else None
    result = run_pipeline(backend, reference, target, m.config, observer=recorder, start_transform=start_transform)
    elapsed = time.perf_counter() - tic

    outputs = {
        "output": save_image(result.image, out / "output.png"),
        "coarse": save_image(result.coarse, out / "coarse.png"),
        "target": save_image(target, out / "target.png"),
    }
    if recorder is not None:
        for p in recorder.write(backend, out / "intermediates"):
            outputs[p.stem] = p
    record = {
        "selfrect_version": __version__,
        "mode": m.mode,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": _sha256(v)} for k, v in m.input_paths().items()},
        "config": m.config.to_dict(),
        "seed": m.config.seed,
        "backend": {"name": m.backend, "model": m.model, "device": m.device, **backend.describe()},
        "size": size,
        "noise_amplitude": m.noise_amplitude,
        "shuffle_block": m.shuffle_block,
        "latent_block": m.latent_block,
        "save_intermediates": m.save_intermediates,
        "timings": {**result.timings, "total": elapsed},
        "outputs": {k: {"path": p.name if p.parent == out else str(p.relative_to(out)), "sha256": _sha256(p)}
                    for k, p in outputs.items()},
    }
    (out / RECORD_NAME).write_text(json.dumps(record, indent=2))
    logger.info("wrote %s (%.1fs)", outputs["output"], elapsed)
    return result


def manifest_from_record(path, out: str | None = None) -> RunManifest:
    rec = json.loads(Path(path).read_text())
    inputs = rec["inputs"]
    for name, info in inputs.items():
        if Path(info["path"]).is_file() and _sha256(info["path"]) != info["sha256"]:
            logger.warning("input %s changed since the recorded run (%s)", name, info["path"])
    return RunManifest(
        mode=rec["mode"],
        reference=inputs["reference"]["path"],
        target=inputs.get("target", {}).get("path"),
        mask=inputs.get("mask", {}).get("path"),
        layout=inputs.get("layout", {}).get("path"),
        out=out or str(Path(path).parent),
        config=RectifyConfig.from_dict(rec["config"]),
        save_intermediates=rec.get("save_intermediates", False),
        backend=rec["backend"]["name"],
        model=rec["backend"].get("model"),
        device=rec["backend"].get("device"),
        size=rec["size"],
        noise_amplitude=rec["noise_amplitude"],
        shuffle_block=rec["shuffle_block"],
        latent_block=rec["latent_block"],
    )


# ---------------------------------------------------------------- sweeps

SWEEP_PAIRS = (("p1", "p2"), ("s1", "s2"))
SWEEP_PRESETS = {
    # S-grid with no inversion injection; P-grid with the default sampling split
    "s-grid": ("s1=10,20,30;s2=0,5,10", {"p1": 0, "p2": 0}),
    "p-grid": ("p1=10,20,30;p2=5,10,15", {"s1": 20, "s2": 5}),
}


@dataclass(frozen=True)
class SweepGrid:
    row_param: str
    row_values: tuple[int, ...]
    col_param: str
    col_values: tuple[int, ...]
    fixed: tuple[tuple[str, int], ...] = ()

    @classmethod
    def parse(cls, spec: str) -> "SweepGrid":
        fixed = {}
        if spec in SWEEP_PRESETS:
            spec, fixed = SWEEP_PRESETS[spec]
        try:
            axes = []
            for part in spec.split(";"):
                name, _, values = part.partition("=")
                axes.append((name.strip().lower(), tuple(int(v) for v in values.split(","))))
            (rp, rv), (cp, cv) = axes
        except ValueError:
            raise ConfigError("sweep", f"expected 'p1=..;p2=..' or 's1=..;s2=..', got {spec!r}") from None
        if (rp, cp) not in SWEEP_PAIRS:
            raise ConfigError("sweep", f"sweep axes must be one of {SWEEP_PAIRS}, got {(rp, cp)}")
        return cls(rp, rv, cp, cv, tuple(sorted(fixed.items())))

    def cells(self):
        for i, r in enumerate(self.row_values):
            for j, c in enumerate(self.col_values):
                yield i, j, {self.row_param: r, self.col_param: c}


def _cell_manifest(m: RunManifest, grid: SweepGrid, params: dict) -> RunManifest:
    cfg = dataclasses.replace(m.config, **dict(grid.fixed), **params)
    name = "_".join(f"{k}-{v}" for k, v in params.items())
    return dataclasses.replace(m, config=cfg, out=str(Path(m.out) / "cells" / name), save_intermediates=False)


def sweep(m: RunManifest, grid: SweepGrid, backend_factory: BackendFactory | None = None, jobs: int = 1,
          order: list[int] | None = None) -> Path:
    """Run every grid cell and assemble a labelled contact sheet (``sweep.png``).

    Failed cells are logged and drawn as marked tiles.  ``order`` permutes
    execution order (cells are independent).
    """
    cells = list(grid.cells())
    manifests = [_cell_manifest(m, grid, params) for _, _, params in cells]
    for cm in manifests:
        cm.validate()
    factory = backend_factory or _default_factory(m)
    local = threading.local()

    def work(k):
        if not hasattr(local, "backend"):
            local.backend = factory()
        try:
            result = _run(manifests[k], local.backend)
            return k, result.image, result.coarse, None
        except Exception as exc:  # a failed cell must not sink the sheet
            logger.error("sweep cell %s failed: %s", manifests[k].out, exc)
            return k, None, None, str(exc)

    order = list(range(len(cells))) if order is None else order
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, order))
    else:
        results = [work(k) for k in order]
    by_cell = {k: (img, coarse, err) for k, img, coarse, err in results}

    sheet = contact_sheet(grid, cells, by_cell)
    path = Path(m.out) / "sweep.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path)
    summary = {
        "grid": dataclasses.asdict(grid),
        "cells": [{"params": params, "out": manifests[k].out, "error": by_cell[k][2]}
                  for k, (_, _, params) in enumerate(cells)],
    }
    (Path(m.out) / "sweep.json").write_text(json.dumps(summary, indent=2))
    return path


def contact_sheet(grid: SweepGrid, cells, by_cell, label_px: int = 18) -> Image.Image:
    """Rows: ``grid.row_param``; columns: the row's coarse result, then ``grid.col_param``."""
    tiles = [img for img, _, _ in by_cell.values() if img is not None]
    tile = tiles[0].shape[0] if tiles else 64
    nr, nc = len(grid.row_values), len(grid.col_values) + 1
    sheet = Image.new("RGB", (label_px * 3 + nc * tile, label_px + nr * tile), "white")
    draw = ImageDraw.Draw(sheet)
    draw.text((label_px * 3 + 2, 2), "coarse", fill="black")
    for j, c in enumerate(grid.col_values):
        draw.text((label_px * 3 + (j + 1) * tile + 2, 2), f"{grid.col_param}={c}", fill="black")
    for i, r in enumerate(grid.row_values):
        draw.text((2, label_px + i * tile + 2), f"{grid.row_param}={r}", fill="black")
    for k, (i, j, _) in enumerate(cells):
        img, coarse, err = by_cell[k]
        x, y = label_px * 3 + (j + 1) * tile, label_px + i * tile
        if img is None:
            draw.rectangle([x, y, x + tile - 1, y + tile - 1], fill=(200, 40, 40))
            draw.line([x, y, x + tile - 1, y + tile - 1], fill="white", width=2)
            draw.line([x, y + tile - 1, x + tile - 1, y], fill="white", width=2)
            continue
        sheet.paste(Image.fromarray(to_uint8(img)).resize((tile, tile)), (x, y))
        if j == 0:
            sheet.paste(Image.fromarray(to_uint8(coarse)).resize((tile, tile)), (label_px * 3, y))
    return sheet


# ---------------------------------------------------------------- argument parsing

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment; keys use flag names."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("config", f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfrect", description=__doc__.splitlines()[0] if __doc__ else None,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--replay", metavar="RUN_JSON", help="re-run from a run record")
    p.add_argument("--reference")
    p.add_argument("--target")
    p.add_argument("--mask", help="1-channel PNG, 255 = user-placed")
    p.add_argument("--layout", help="colour layout for guided mode")
    p.add_argument("--mode", choices=MODES, default="nonstationary")
    p.add_argument("--out", default="out")
    d = RectifyConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--p1", type=int, default=d.p1)
    p.add_argument("--p2", type=int, default=d.p2)
    p.add_argument("--s1", type=int, default=d.s1)
    p.add_argument("--s2", type=int, default=d.s2)
    p.add_argument("--sites", type=_int_list, default=None, help="comma-separated self-attention indices")
    p.add_argument("--aug", type=_str_list, default=(), help="e.g. rot45,rot-45,rot90,hflip,vflip")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--ir-eval", choices=IR_EVAL_MODES, default=d.ir_eval)
    p.add_argument("--offset", type=int, default=None, help="index-map t -> t+offset instead of T-t")
    p.add_argument("--offload-kv", action="store_true", default=False)
    p.add_argument("--save-intermediates", action="store_true", default=False)
    p.add_argument("--noise-amplitude", type=float, default=0.1)
    p.add_argument("--shuffle-block", type=int, default=64, help="image-space block, pixels")
    p.add_argument("--latent-block", type=int, default=8, help="latent-space block, cells")
    p.add_argument("--sweep", help="'p1=..;p2=..', 's1=..;s2=..', 's-grid' or 'p-grid'")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p.add_argument("--backend", choices=BACKENDS, default="sd")
    p.add_argument("--model", help="checkpoint directory (default: $SELFRECT_MODEL_PATH)")
    p.add_argument("--device")
    p.add_argument("--size", type=int, default=None, help="working resolution (default: backend native)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_CONVERTERS = {"sites": _int_list, "aug": _str_list, "offload_kv": _flag, "save_intermediates": _flag,
               "verbose": _flag}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        known = {a.dest: a for a in parser._actions}
        defaults = {}
        for key, value in read_config_file(pre.config).items():
            if key not in known or key in ("config", "help"):
                raise ConfigError(key, f"unknown key in {pre.config}")
            action = known[key]
            conv = _CONVERTERS.get(key) or action.type or str
            defaults[key] = conv(value)
        parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    if args.replay:
        return manifest_from_record(args.replay, out=args.out if args.out != "out" else None)
    cfg = RectifyConfig(
        steps=args.steps, p1=args.p1, p2=args.p2, s1=args.s1, s2=args.s2,
        sites=tuple(args.sites) if args.sites else None, ir_eval=args.ir_eval, offset=args.offset,
        augmentations=tuple(args.aug), seed=args.seed, offload_kv=args.offload_kv,
    )
    return RunManifest(
        mode=args.mode, reference=args.reference, target=args.target, mask=args.mask, layout=args.layout,
        out=args.out, config=cfg, save_intermediates=args.save_intermediates, backend=args.backend,
        model=args.model, device=args.device, size=args.size, noise_amplitude=args.noise_amplitude,
        shuffle_block=args.shuffle_block, latent_block=args.latent_block,
    )


def main(argv=None, backend_factory: BackendFactory | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        manifest = manifest_from_args(args).validate()
        if args.sweep:
            grid = SweepGrid.parse(args.sweep)
            for _, _, params in grid.cells():
                dataclasses.replace(manifest.config, **dict(grid.fixed), **params).validate()
            path = sweep(manifest, grid, backend_factory, jobs=args.jobs)
            print(path)
            return 0
    except ConfigError as exc:
        print(f"selfrect: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"selfrect: {exc}", file=sys.stderr)
        return 2
    status = run(manifest, backend_factory)
    if status == 0:
        print(Path(manifest.out) / "output.png")
    return status


if __name__ == "__main__":
    sys.exit(main())
