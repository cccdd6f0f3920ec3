import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from obrg import synthdata as sd
from obrg.errors import DimensionError, ScheduleError
from obrg.generation import (
    BERNOULLI, CATEGORIES, NoiseSchedule, OracleDenoiser, ReplacementSchedule, eval_generation, gen_loss,
    mix_condition, mixing_beta, noise_latent, replacement_ratio, sample_latent, score_generation,
)
from obrg.model import build_model
from obrg.numerics import Rng
from obrg.verify import tiny_config


def tiny():
    return build_model(tiny_config(), Rng(5).child("gen-model"))


def latents(scenes):
    return torch.from_numpy(np.stack([sd.render_latent(s) for s in scenes]))


def one_object_scenes(n, seed):
    rng = Rng(seed)
    return [sd.Scene.of((sd.SHAPES[rng.integers(0, 3)], sd.COLORS[rng.integers(0, 3)], rng.integers(0, 9)))
            for _ in range(n)]


class PlusOne:
    def __init__(self, inner):
        self.inner, self.objective = inner, inner.objective

    def __call__(self, z_t, t, cond):
        return self.inner(z_t, t, cond) + 1


# replacement schedule ----------------------------------------------------------

def test_schedule_endpoints_and_midpoint():
    s = ReplacementSchedule(1000)
    assert replacement_ratio(0, s) == 0.15 and mixing_beta(0, s) == 0.85
    assert replacement_ratio(1000, s) == 1.0 and mixing_beta(1000, s) == 0.0
    a, b = s.boundaries
    assert replacement_ratio(int((a + b) / 2), s) == pytest.approx(0.45, abs=1e-12)


@given(st.integers(1, 5000), st.data())
def test_schedule_is_monotone_and_piecewise(total, data):
    s = ReplacementSchedule(total)
    a, b = s.boundaries
    i = data.draw(st.integers(0, total - 1))
    r0, r1 = replacement_ratio(i, s), replacement_ratio(i + 1, s)
    assert r0 <= r1
    if i < a:
        assert r0 == 0.15
    elif i >= b:
        assert r0 == 1.0
    else:
        assert 0.15 <= r0 <= 0.75


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        ReplacementSchedule(0)
    with pytest.raises(ScheduleError):
        ReplacementSchedule(10, initial_frac=0.5, progressive_frac=0.6)
    with pytest.raises(ScheduleError):
        ReplacementSchedule(10, mode="sometimes")
    with pytest.raises(ScheduleError):
        replacement_ratio(11, ReplacementSchedule(10))


# mixing ------------------------------------------------------------------------

def test_mix_examples():
    zt, zq = torch.tensor([[4.0, 0.0]]), torch.tensor([[0.0, 4.0]])
    assert mix_condition(zt, zq, 0.25).tolist() == [[1.0, 3.0]]
    assert mix_condition(zt, zq, 1.0) is zt and mix_condition(zt, zq, 0.0) is zq
    with pytest.raises(DimensionError):
        mix_condition(zt, torch.zeros(1, 3), 0.5)
    with pytest.raises(ValueError):
        mix_condition(zt, zq, 1.5)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_mix_is_affine_in_beta(b1, b2, seed):
    rng = Rng(seed)
    zt, zq = rng.normal((2, 3, 4)).double(), rng.normal((2, 3, 4)).double()
    lam = 0.3
    lhs = mix_condition(zt, zq, lam * b1 + (1 - lam) * b2)
    rhs = lam * mix_condition(zt, zq, b1) + (1 - lam) * mix_condition(zt, zq, b2)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_bernoulli_mix_picks_whole_samples():
    zt, zq = torch.zeros(400, 2, 3), torch.ones(400, 2, 3)
    out = mix_condition(zt, zq, 0.25, BERNOULLI, Rng(0))
    per = out.mean(dim=(1, 2))
    assert set(per.unique().tolist()) <= {0.0, 1.0}
    assert abs(per.mean().item() - 0.75) < 5 * math.sqrt(0.75 * 0.25 / 400)
    with pytest.raises(ValueError):
        mix_condition(zt, zq, 0.5, BERNOULLI)


# forward process ---------------------------------------------------------------

def test_noise_endpoints():
    z0 = torch.rand(3, 63, dtype=torch.float64)
    eps = torch.randn(3, 63, dtype=torch.float64)
    clean = NoiseSchedule([1e-14])
    assert torch.allclose(noise_latent(z0, 1, eps, clean), z0, atol=1e-6)
    noisy = NoiseSchedule.linear(50, 0.5, 0.99)
    assert torch.allclose(noise_latent(z0, 50, eps, noisy), eps, atol=1e-6)
    with pytest.raises(ScheduleError):
        noise_latent(z0, 0, eps, noisy)


def test_noise_moments_match_closed_form():
    sched = NoiseSchedule.linear(100)
    t, n = 40, 10_000
    z0 = torch.from_numpy(sd.render_latent(sd.Scene.of(("circle", "red", 4)))).double()
    eps = Rng(9).normal((n, 63)).double()
    z = noise_latent(z0.expand(n, -1), t, eps, sched)
    ab = sched.alpha_bar[t]
    sigma = math.sqrt((1 - ab) / n)
    assert ((z.mean(0) - math.sqrt(ab) * z0).abs() < 5 * sigma).all()
    assert torch.allclose(z.var(0), torch.full((63,), 1 - ab, dtype=torch.float64), rtol=0.1)


# loss --------------------------------------------------------------------------

def loss_with(denoiser_factory):
    model = tiny()
    z0 = latents(one_object_scenes(6, 1)).double()
    sched = NoiseSchedule.linear(10)
    hidden = Rng(2).normal((6, 5, 8))
    loss, info = gen_loss(model, z0, hidden, None, 3, ReplacementSchedule(10), sched, Rng(3),
                          denoiser=denoiser_factory(z0, sched))
    return loss.item(), info


def test_exact_noise_prediction_gives_zero_loss():
    loss, info = loss_with(lambda z0, s: OracleDenoiser(z0, s))
    assert loss < 1e-12
    assert info["beta"] + info["r"] == 1.0


def test_offset_noise_prediction_gives_unit_loss():
    loss, _ = loss_with(lambda z0, s: PlusOne(OracleDenoiser(z0, s)))
    assert loss == pytest.approx(1.0, abs=1e-6)


# sampling and grading ----------------------------------------------------------

def test_sampling_is_deterministic_and_t1_is_exact():
    model = tiny()
    cond = Rng(1).normal((4, 2, 8))
    sched = NoiseSchedule.linear(10)
    a = sample_latent(model.denoiser, cond, sched, Rng(7))
    b = sample_latent(model.denoiser, cond, sched, Rng(7))
    assert torch.equal(a, b)
    z0 = latents(one_object_scenes(4, 2))
    one = NoiseSchedule.linear(1, 0.5, 0.5)
    assert torch.allclose(sample_latent(OracleDenoiser(z0, one), cond, one, Rng(0)), z0, atol=1e-6)


def test_untrained_denoiser_is_near_chance():
    model = tiny()
    scenes = one_object_scenes(300, 4)
    hidden = Rng(5).normal((300, 5, 8))
    rep = eval_generation(model, scenes, hidden, None, "text", NoiseSchedule.linear(10), seed=0)
    assert rep["colors"] <= 0.45


@pytest.mark.parametrize("objective", ["eps", "x0"])
@pytest.mark.parametrize("mode", ["text", "query_only"])
def test_oracle_denoiser_scores_perfectly(objective, mode):
    model = tiny()
    rng = Rng(6)
    scenes = [sd.make_scene(rng) for _ in range(40)]
    sched = NoiseSchedule.linear(10)
    oracle = OracleDenoiser(latents(scenes), sched, objective)
    rep = eval_generation(model, scenes, Rng(7).normal((40, 5, 8)), None, mode, sched, 0, denoiser=oracle)
    assert {k: rep[k] for k in (*CATEGORIES, "overall")} == dict.fromkeys((*CATEGORIES, "overall"), 1.0)


def test_score_schema_and_partial_credit():
    s = sd.Scene.of(("circle", "red", 0), ("square", "blue", 4))
    wrong_color = sd.Scene.of(("circle", "green", 0), ("square", "blue", 4))
    rep = score_generation([s], [sd.render_latent(wrong_color)])
    assert set(rep) == {"colors", "shapes", "counting", "position", "overall"}
    assert rep == {"colors": 0.5, "shapes": 1.0, "counting": 1.0, "position": 1.0, "overall": 0.875}
    empty = score_generation([s], [np.zeros(63)])
    assert empty["overall"] == 0.0
