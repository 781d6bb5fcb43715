"""Schedule construction, forward noising, and x0 reconstruction."""

import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cuefeed.core import (
    IdentityDecoder,
    NoiseSchedule,
    add_noise,
    build_schedule,
    decode,
    reconstruct_x0_latent,
    straight_through_clamp,
)
from cuefeed.errors import NumericError


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


def test_default_schedule_first_step(schedule):
    # alpha_bar[0] = 1 - beta_0 with beta_0 = 0.00085
    assert schedule.alpha_bar_at(0) == pytest.approx(0.99915, abs=1e-12)


def test_default_schedule_shape_and_range(schedule):
    ab = schedule.alpha_bar
    assert schedule.num_steps == 1000
    assert ab.dtype == torch.float64
    assert (ab > 0).all() and (ab <= 1).all()
    assert (ab[1:] < ab[:-1]).all()


def test_schedule_matches_direct_product(schedule):
    # independent cumulative product in python floats
    betas = [
        (math.sqrt(0.00085) + i * (math.sqrt(0.012) - math.sqrt(0.00085)) / 999) ** 2
        for i in range(1000)
    ]
    prod = 1.0
    for t in (0, 1, 17, 500, 999):
        prod = 1.0
        for s in range(t + 1):
            prod *= 1.0 - betas[s]
        assert schedule.alpha_bar_at(t) == pytest.approx(prod, rel=1e-10)


def test_schedule_validation_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_schedule(num_steps=1)
    with pytest.raises(ValueError):
        build_schedule(beta_start=0.0)
    with pytest.raises(ValueError):
        build_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        NoiseSchedule(torch.tensor([0.5, 0.7]))  # increasing
    with pytest.raises(ValueError):
        NoiseSchedule(torch.tensor([1.2, 0.5]))  # > 1
    with pytest.raises(ValueError):
        NoiseSchedule(torch.tensor([0.5]))  # too short


def test_add_noise_worked_example():
    # alpha_bar = 0.25: z_t = 0.5 * 1 + sqrt(0.75) * 1
    sched = NoiseSchedule(torch.tensor([0.5, 0.25], dtype=torch.float64))
    z0 = torch.ones(1)
    eps = torch.ones(1)
    zt = add_noise(z0, eps, 1, sched)
    assert zt.item() == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-6)


def test_reconstruct_worked_example():
    # alpha_bar = 0.25: (1 - sqrt(0.75) * 0.5) / 0.5
    sched = NoiseSchedule(torch.tensor([0.5, 0.25], dtype=torch.float64))
    zt = torch.ones(1)
    eps_pred = torch.full((1,), 0.5)
    z0 = reconstruct_x0_latent(zt, eps_pred, 1, sched)
    expected = (1.0 - math.sqrt(0.75) * 0.5) / 0.5
    assert z0.item() == pytest.approx(expected, abs=1e-6)


@given(
    t=st.integers(min_value=0, max_value=999),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_round_trip_recovers_z0(t, seed):
    sched = build_schedule()
    gen = torch.Generator().manual_seed(seed)
    z0 = torch.rand((3, 6, 6), generator=gen) * 2.0 - 1.0
    eps = torch.randn((3, 6, 6), generator=gen)
    back = reconstruct_x0_latent(add_noise(z0, eps, t, sched), eps, t, sched)
    assert (back - z0).abs().max().item() <= 1e-4


@given(
    t=st.integers(min_value=0, max_value=999),
    a=st.floats(min_value=-4.0, max_value=4.0, allow_nan=False).filter(
        lambda v: abs(v) > 1e-3
    ),
)
def test_reconstruct_linear_in_inputs(t, a):
    sched = build_schedule()
    gen = torch.Generator().manual_seed(t)
    zt = torch.randn((3, 4, 4), generator=gen)
    eps = torch.randn((3, 4, 4), generator=gen)
    lhs = reconstruct_x0_latent(a * zt, a * eps, t, sched)
    rhs = a * reconstruct_x0_latent(zt, eps, t, sched)
    assert torch.allclose(lhs, rhs, atol=1e-4, rtol=1e-4)


def test_add_noise_validates(schedule):
    with pytest.raises(ValueError):
        add_noise(torch.ones(2), torch.ones(3), 0, schedule)
    with pytest.raises(IndexError):
        add_noise(torch.ones(2), torch.ones(2), 1000, schedule)
    with pytest.raises(IndexError):
        reconstruct_x0_latent(torch.ones(2), torch.ones(2), -1, schedule)


def test_straight_through_clamp_forward_and_backward():
    x = torch.tensor([-0.5, 0.3, 1.7], requires_grad=True)
    y = straight_through_clamp(x)
    assert torch.equal(y.detach(), torch.tensor([0.0, 0.3, 1.0]))
    y.sum().backward()
    # gradient passes through untouched, even where the clamp saturated
    assert torch.equal(x.grad, torch.ones(3))


def test_decode_identity_clamps():
    z = torch.tensor([[[-1.0, 0.5], [2.0, 0.0]]]).expand(3, 2, 2)
    img = decode(z)
    assert img.min().item() >= 0.0 and img.max().item() <= 1.0
    assert img[0, 0, 1].item() == pytest.approx(0.5)


def test_decode_validates_input():
    with pytest.raises(ValueError):
        decode(torch.zeros(2, 2))
    with pytest.raises(NumericError):
        decode(torch.full((3, 2, 2), float("nan")))


def test_decoder_gradient_survives_saturation():
    z = torch.full((3, 4, 4), 3.0, requires_grad=True)
    out = IdentityDecoder().decode(z)
    out.sum().backward()
    assert torch.equal(z.grad, torch.ones_like(z))
