"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 3-6 need the pretrained latent-diffusion backbone
(``SELFRECT_MODEL_PATH``); 4 and 5 also need the wood example images in
``SELFRECT_DATA_DIR`` (``wood_reference.png``, ``wood_target.png``,
``wood_mask.png``).  Without them those criteria fail with the reason.
"""
import dataclasses
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from selfrect import cli
from selfrect.attention import CacheMissError, IndexMap, attend, attention_weights, concat_kv, KVRecord
from selfrect.backend import BackendUnavailableError, StubBackend, TapDirective, load_backend, record_all
from selfrect.backend.base import INJECT
from selfrect.imageio import load_image, load_mask, save_image
from selfrect.metrics import layout_correlation, patch_feature_distance, psnr
from selfrect.rectify import RectifyConfig, reconstruct, run_pipeline
from selfrect.scheduler import build_schedule, invert_step, predict_x0, sample_step
from selfrect.target_prep import DEFAULT_ROTATIONS, fill_background

from conftest import ACCEPTANCE_LINES, random_image, textured_pair

DATA_ENV = "SELFRECT_DATA_DIR"
PSNR_FLOOR_DB = 25.0
GPU_BUDGET_S = 3 * 3 * 60


def verdict(n: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def require(n: int, title: str, what):
    """Return the resource or record a failure naming what is missing."""
    try:
        return what()
    except (BackendUnavailableError, FileNotFoundError) as exc:
        verdict(n, title, False, f"not runnable here: {exc}")


@pytest.fixture(scope="module")
def backbone():
    def load():
        return load_backend("sd")
    return load


def wood(size=512):
    root = os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"${DATA_ENV} is not set (needs wood_reference.png, wood_target.png, wood_mask.png)")
    d = Path(root)
    ref = load_image(d / "wood_reference.png", size)
    tgt = fill_background(load_image(d / "wood_target.png", size), load_mask(d / "wood_mask.png", size), ref)
    return ref, tgt


# ---------------------------------------------------------------- 1


def test_criterion_1_scheduler_algebra():
    title = "scheduler algebra (exact inverse, x0 linearity, monotone alpha_bar) <= 1e-5 rel, < 1 s"
    tic = time.perf_counter()
    sched = build_schedule(50)
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for t in range(50):
        z = torch.randn(1, 4, 16, 16, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, 4, 16, 16, generator=gen, dtype=torch.float64)
        back = sample_step(invert_step(z, eps, t, sched), eps, t + 1, sched)
        worst = max(worst, float((back - z).norm() / z.norm()))
        a, b = torch.randn_like(z), torch.randn_like(z)
        lin = predict_x0(2 * a + 3 * b, 2 * eps + 3 * eps, t + 1, sched)
        ref = 2 * predict_x0(a, eps, t + 1, sched) + 3 * predict_x0(b, eps, t + 1, sched)
        worst = max(worst, float((lin - ref).norm() / ref.norm()))
    monotone = bool(np.all(np.diff(np.asarray(sched.alpha_bar)) < 0)) and sched.alpha_bar[0] == 1.0
    elapsed = time.perf_counter() - tic
    verdict(1, title, worst <= 1e-5 and monotone and elapsed < 1.0,
            f"max rel err {worst:.2e}, monotone={monotone}, {elapsed:.3f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_stub_mechanics():
    title = "stub mechanics (T=10, 2 sites, 8x8), exhaustive (P,S) in [0,10]^2, zero misses, < 1 min"
    tic = time.perf_counter()
    stub = StubBackend(seed=0)
    rng = np.random.default_rng(0)
    z = torch.randn(1, 4, 8, 8)

    plain = stub.predict_noise(z, 500).epsilon
    cap = stub.predict_noise(z, 500, record_all((0, 1))).captured
    inj = stub.predict_noise(z, 500, [TapDirective.inject(s, kv) for s, kv in cap.items()]).epsilon
    self_inj = float((inj - plain).norm() / plain.norm())

    q, k, v = (torch.randn(1, 2, 64, 8) for _ in range(3))
    rows = float((attention_weights(q, k).sum(-1) - 1).abs().max())
    perm = torch.randperm(64)
    perm_err = float((attend(q, k[..., perm, :], v[..., perm, :]) - attend(q, k, v)).abs().max())
    a, b = KVRecord(k, v), KVRecord(k.flip(-2), v.flip(-2))
    ab, ba = concat_kv([a, b]), concat_kv([b, a])
    concat_err = float((attend(q, ab.keys, ab.values) - attend(q, ba.keys, ba.values)).abs().max())

    ref, tgt = random_image(rng), random_image(rng)
    misses, runs = 0, 0
    for mode, (P, S) in itertools.product(("literal", "native-cache"), itertools.product(range(11), repeat=2)):
        cfg = RectifyConfig(steps=10, p1=P, p2=P, s1=S, s2=S, ir_eval=mode)
        try:
            run_pipeline(stub, ref, tgt, cfg)
        except CacheMissError:
            misses += 1
        runs += 1
    elapsed = time.perf_counter() - tic
    ok = self_inj <= 1e-4 and rows <= 1e-5 and perm_err <= 1e-5 and concat_err <= 1e-5 and misses == 0 and elapsed < 60
    verdict(2, title, ok, f"self-inj rel {self_inj:.1e}, row-sum err {rows:.1e}, perm err {perm_err:.1e}, "
                          f"concat err {concat_err:.1e}, {misses}/{runs} runs missed, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_degenerate_reconstruction(backbone):
    title = f"degenerate pipeline (P=0, S=T) vs plain DDIM reconstruction >= {PSNR_FLOOR_DB} dB"
    sd = require(3, title, backbone)
    _, tgt = textured_pair(sd.native_resolution)
    cfg = RectifyConfig(p1=0, p2=0, s1=50, s2=50)
    out = run_pipeline(sd, tgt, tgt, cfg).image
    rec = reconstruct(sd, tgt, build_schedule(cfg.steps, sd.alphas_cumprod))
    score = psnr(out, rec)
    verdict(3, title, score >= PSNR_FLOOR_DB, f"{score:.2f} dB")


# ---------------------------------------------------------------- 4


def test_criterion_4_structure_preservation(backbone):
    title = "wood example: layout correlation of round-1 start code, P1=20 > P1=0"
    sd = require(4, title, backbone)
    ref, tgt = require(4, title, lambda: wood(sd.native_resolution))
    tgt_latent = sd.encode_image(tgt)
    corr = {}
    for p1 in (0, 20):
        res = run_pipeline(sd, ref, tgt, RectifyConfig(p1=p1))
        corr[p1] = layout_correlation(res.start_codes[0], tgt_latent)
    verdict(4, title, corr[20] > corr[0], f"corr(P1=20)={corr[20]:.4f}, corr(P1=0)={corr[0]:.4f}")


# ---------------------------------------------------------------- 5


def test_criterion_5_texture_transfer_trend(backbone):
    title = "patch distance to reference strictly decreasing as S1 goes 50, 20, 10, 0 (P1=P2=0, S2=5)"
    sd = require(5, title, backbone)
    ref, tgt = require(5, title, lambda: wood(sd.native_resolution))
    dist = [patch_feature_distance(run_pipeline(sd, ref, tgt, RectifyConfig(p1=0, p2=0, s1=s1, s2=5)).image, ref)
            for s1 in (50, 20, 10, 0)]
    ok = all(a > b for a, b in zip(dist, dist[1:]))
    verdict(5, title, ok, "distances " + ", ".join(f"{d:.4f}" for d in dist))


# ---------------------------------------------------------------- 6


def test_criterion_6_default_run(backbone, tmp_path):
    title = f"default 512x512 run within {GPU_BUDGET_S // 60} min on GPU, replay bit-identical"
    sd = require(6, title, backbone)
    if not torch.cuda.is_available():
        verdict(6, title, False, "not runnable here: no CUDA device")
    ref, tgt = textured_pair(512)
    save_image(ref, tmp_path / "ref.png")
    save_image(tgt, tmp_path / "tgt.png")
    m = cli.RunManifest("patch-shuffle", str(tmp_path / "ref.png"), str(tmp_path / "first"), size=512)
    tic = time.perf_counter()
    assert cli.run(m, backend=sd) == 0
    elapsed = time.perf_counter() - tic
    again = dataclasses.replace(cli.manifest_from_record(tmp_path / "first" / "run.json"), out=str(tmp_path / "again"))
    assert cli.run(again, backend=sd) == 0
    same = (tmp_path / "first" / "output.png").read_bytes() == (tmp_path / "again" / "output.png").read_bytes()
    verdict(6, title, elapsed < GPU_BUDGET_S and same, f"{elapsed:.0f}s, replay identical={same}")


# ---------------------------------------------------------------- 7


def test_criterion_7_augmentation_rows():
    title = "3 rotations quadruple injected K/V rows at every injected sampling step, run completes"
    stub = StubBackend(seed=0)
    rng = np.random.default_rng(0)
    ref, tgt = random_image(rng), random_image(rng)
    rows = []
    inner = stub.predict_noise

    def spy(z, t, directives=()):
        directives = list(directives)
        inj = {d.site: d.injected_kv.rows for d in directives if d.action == INJECT}
        if inj:
            rows.append(inj)
        return inner(z, t, directives)

    stub.predict_noise = spy
    cfg = RectifyConfig(steps=10, p1=0, p2=0, s1=4, s2=2, offload_kv=True)
    run_pipeline(stub, ref, tgt, cfg)
    base = list(rows)
    rows.clear()
    res = run_pipeline(stub, ref, tgt, dataclasses.replace(cfg, augmentations=DEFAULT_ROTATIONS))
    expected_steps = (10 - 4) + (10 - 2)
    ok = (len(rows) == len(base) == expected_steps
          and all(r == {s: 4 * n for s, n in b.items()} for r, b in zip(rows, base))
          and np.isfinite(res.image).all())
    verdict(7, title, ok, f"{len(rows)} injected steps, rows {base[0] if base else {}} -> {rows[0] if rows else {}}")
