import numpy as np
import pytest
import torch

from selfrect.backend import StubBackend


@pytest.fixture(scope="session")
def stub():
    return StubBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=64):
    return rng.random((size, size, 3)).astype(np.float32)


@pytest.fixture
def images(rng):
    return random_image(rng), random_image(rng)


def tiny_sd_components(seed=0):
    """Randomly initialised diffusers modules with the v1.x block topology (16 self-attention layers)."""
    from diffusers import AutoencoderKL, UNet2DConditionModel

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        unet = UNet2DConditionModel(
            sample_size=16, in_channels=4, out_channels=4, layers_per_block=2,
            block_out_channels=(32, 32, 32, 32), norm_num_groups=8, cross_attention_dim=32, attention_head_dim=4,
            down_block_types=("CrossAttnDownBlock2D",) * 3 + ("DownBlock2D",),
            up_block_types=("UpBlock2D",) + ("CrossAttnUpBlock2D",) * 3,
        )
        vae = AutoencoderKL(
            in_channels=3, out_channels=3, block_out_channels=(8, 8, 8, 8),
            down_block_types=("DownEncoderBlock2D",) * 4, up_block_types=("UpDecoderBlock2D",) * 4,
            latent_channels=4, norm_num_groups=4, layers_per_block=1,
        )
        uncond = torch.randn(1, 7, 32)
    return unet, vae, uncond


@pytest.fixture(scope="session")
def tiny_sd():
    from selfrect.backend.sd import StableDiffusionBackend
    from selfrect.scheduler import scaled_linear_alphas_cumprod

    unet, vae, uncond = tiny_sd_components()
    return StableDiffusionBackend(unet, vae, uncond, scaled_linear_alphas_cumprod())


def textured_pair(size=512, seed=0):
    """Synthetic (reference, target): a striped texture and a two-region collage with a coarse layout."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[:size, :size] / size
    stripes = 0.5 + 0.35 * np.sin(2 * np.pi * (24 * x + 3 * y))[..., None] * np.array([0.9, 0.6, 0.3])
    ref = np.clip(stripes + 0.05 * rng.standard_normal((size, size, 3)), 0, 1).astype(np.float32)
    other = np.clip(0.4 + 0.3 * np.sin(2 * np.pi * 30 * y)[..., None] * np.array([0.3, 0.5, 0.9]), 0, 1)
    disc = ((x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.09)[..., None]
    tgt = np.where(disc, other, ref).astype(np.float32)
    return ref, tgt


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
