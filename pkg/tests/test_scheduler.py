import pytest
import torch
from hypothesis import given, settings, strategies as st

from selfrect.scheduler import (
    NoiseSchedule,
    build_schedule,
    invert_step,
    predict_x0,
    sample_step,
    scaled_linear_alphas_cumprod,
)

# high-precision (mpmath) evaluations of the DDIM formulas
X0_ORACLE = 1.13397459621556135323627682925
SAMPLE_ORACLE = 1.2071796769724490825890214634
INVERT_ORACLE = 0.870512701892219323381861585377


def toy_schedule(*alphas):
    """Schedule with explicit alpha_bar values for levels 0..T."""
    T = len(alphas) - 1
    return NoiseSchedule(T, torch.arange(T) * 10, torch.tensor(alphas, dtype=torch.float32))


def scalar(x):
    return torch.full((1, 4, 2, 2), float(x))


def test_predict_x0_scalar_oracle():
    sched = toy_schedule(1.0, 0.25)
    out = predict_x0(scalar(1.0), scalar(0.5), 1, sched)
    assert torch.allclose(out, scalar(X0_ORACLE), rtol=1e-6)


def test_predict_x0_degenerate_cases():
    sched = toy_schedule(1.0, 0.25)
    z = torch.randn(1, 4, 3, 3)
    assert torch.equal(predict_x0(z, torch.randn_like(z), 0, sched), z)
    assert torch.allclose(predict_x0(z, torch.zeros_like(z), 1, sched), z / 0.5)


def test_predict_x0_rejects_zero_alpha_and_shape_mismatch():
    with pytest.raises(ValueError):
        predict_x0(scalar(1), scalar(1), 1, toy_schedule(1.0, 0.0))
    with pytest.raises(ValueError):
        predict_x0(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 3, 3), 0, toy_schedule(1.0, 0.5))


def test_sample_step_scalar_oracle():
    sched = toy_schedule(1.0, 0.64, 0.25)
    out = sample_step(scalar(1.0), scalar(0.5), 2, sched)
    assert torch.allclose(out, scalar(SAMPLE_ORACLE), rtol=1e-6)


def test_invert_step_scalar_oracle():
    sched = toy_schedule(1.0, 0.64, 0.25)
    out = invert_step(scalar(1.0), scalar(0.5), 1, sched)
    assert torch.allclose(out, scalar(INVERT_ORACLE), rtol=1e-6)


def test_zero_noise_is_pure_rescaling():
    sched = toy_schedule(1.0, 0.64, 0.25)
    z = torch.randn(1, 4, 3, 3)
    zero = torch.zeros_like(z)
    assert torch.allclose(sample_step(z, zero, 2, sched), z * (0.64 / 0.25) ** 0.5)
    assert torch.allclose(invert_step(z, zero, 1, sched), z * (0.25 / 0.64) ** 0.5)


def test_equal_alphas_make_sampling_identity():
    sched = toy_schedule(1.0, 0.5, 0.5)
    z, eps = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
    assert torch.allclose(sample_step(z, eps, 2, sched), z, atol=1e-6)


def test_endpoints_are_rejected():
    sched = toy_schedule(1.0, 0.5)
    z = torch.zeros(1, 4, 2, 2)
    with pytest.raises(ValueError):
        sample_step(z, z, 0, sched)
    with pytest.raises(ValueError):
        invert_step(z, z, 1, sched)


def test_build_schedule_fifty_steps():
    sched = build_schedule(50)
    assert sched.num_steps == 50
    assert len(sched.native_timesteps) == 50
    assert sched.stride == 20
    assert sched.native_timesteps[0] == 0 and sched.native_timesteps[-1] == 980
    assert len(sched.alpha_bar) == 51
    assert sched.alpha_bar[0] == 1.0


def test_build_schedule_identity_grid():
    native = scaled_linear_alphas_cumprod()
    sched = build_schedule(1000, native)
    assert torch.equal(sched.native_timesteps, torch.arange(1000))
    assert torch.allclose(sched.alpha_bar[1:], native)


@pytest.mark.parametrize("steps", [0, -1, 1001, 30])
def test_build_schedule_rejects(steps):
    with pytest.raises(ValueError):
        build_schedule(steps)


def test_native_table_matches_the_v1_checkpoint_scheduler():
    from diffusers import DDIMScheduler

    reference = DDIMScheduler(beta_start=0.00085, beta_end=0.012, beta_schedule="scaled_linear").alphas_cumprod
    assert torch.allclose(scaled_linear_alphas_cumprod(), reference, rtol=1e-5)


def test_v1_schedule_strictly_decreasing():
    a = build_schedule(50).alpha_bar
    assert (a[1:] < a[:-1]).all()


def test_conditioning_timesteps_are_shared_across_directions():
    sched = build_schedule(50)
    for t in range(50):
        assert sched.inversion_timestep(t) == sched.sampling_timestep(t + 1) == 20 * t


DIVISORS = [d for d in range(1, 1001) if 1000 % d == 0]


@settings(max_examples=60, deadline=None)
@given(steps=st.sampled_from(DIVISORS), data=st.data())
def test_exact_inverse_pair(steps, data):
    sched = build_schedule(steps)
    t = data.draw(st.integers(0, steps - 1))
    seed = data.draw(st.integers(0, 2**16))
    g = torch.Generator().manual_seed(seed)
    z, eps = torch.randn(1, 4, 4, 4, generator=g), torch.randn(1, 4, 4, 4, generator=g)
    back = sample_step(invert_step(z, eps, t, sched), eps, t + 1, sched)
    assert (torch.linalg.norm(back - z) / torch.linalg.norm(z)).item() <= 1e-5


@settings(max_examples=60, deadline=None)
@given(t=st.integers(0, 50), a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_predict_x0_linearity(t, a, b, seed):
    sched = build_schedule(50)
    g = torch.Generator().manual_seed(seed)
    z, w, e1, e2 = (torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64) for _ in range(4))
    sched64 = NoiseSchedule(sched.num_steps, sched.native_timesteps, sched.alpha_bar.double())
    lhs = predict_x0(a * z + b * w, a * e1 + b * e2, t, sched64)
    rhs = a * predict_x0(z, e1, t, sched64) + b * predict_x0(w, e2, t, sched64)
    assert torch.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(steps=st.sampled_from(DIVISORS))
def test_schedule_monotone_for_any_grid(steps):
    a = build_schedule(steps).alpha_bar
    assert (a[1:] < a[:-1]).all()
    assert a[0] == 1.0
