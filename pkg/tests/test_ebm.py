import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from boltznce.diffnet import MlpModel
from boltznce.ebm import (
    EbmConfig,
    EnergyModel,
    NegativeTimeSampler,
    ebm_batch_loss,
    info_nce_loss,
    log_density,
    score_matching_loss,
    train_ebm,
)
from boltznce.interpolant import make_schedule
from boltznce.training import TrainConfig


class _Quadratic(torch.nn.Module):
    scalar_head = True

    def forward(self, t, x):
        return -0.5 * (x**2).sum(1)


class _Table(torch.nn.Module):
    """Energy that depends on t only through a lookup: E = a if t == t_pos else b."""

    def __init__(self, t_pos, a, b):
        super().__init__()
        self.t_pos, self.a, self.b = t_pos, a, b

    def forward(self, t, x):
        t = torch.as_tensor(t, dtype=x.dtype).expand(len(x))
        return torch.where(t == self.t_pos, self.a, self.b) + 0 * x.sum(1)


def _net(seed=0, zero_last=False):
    return MlpModel(2, None, hidden=(16, 16), n_freqs=2, zero_last=zero_last, seed=seed)


def test_info_nce_equal_energies_give_log_two():
    x = torch.zeros(5, 2)
    t = torch.full((5,), 0.5)
    loss = info_nce_loss(_Table(0.5, 0.0, 0.0), t, x, torch.full((5, 1), 0.6))
    assert loss.item() == pytest.approx(math.log(2))


def test_info_nce_worked_example():
    # logits (1, 0): -log(e / (e + 1)) = log(1 + 1/e)
    x = torch.zeros(3, 2)
    loss = info_nce_loss(_Table(0.5, 1.0, 0.0), torch.full((3,), 0.5), x, torch.full((3, 1), 0.7))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-1)))
    assert loss.item() == pytest.approx(0.3133, abs=1e-4)


def test_info_nce_k_negatives_uniform_is_log_k_plus_one():
    x = torch.zeros(4, 2)
    loss = info_nce_loss(_Table(0.5, 0.0, 0.0), torch.full((4,), 0.5), x, torch.rand(4, 3))
    assert loss.item() == pytest.approx(math.log(4))


def test_info_nce_needs_negatives():
    with pytest.raises(ValueError):
        info_nce_loss(_net(), torch.zeros(2), torch.zeros(2, 2), torch.zeros(2, 0))


@given(st.integers(0, 1000))
def test_info_nce_ignores_functions_of_x_alone(seed):
    g = torch.Generator().manual_seed(seed)
    net = _net(seed % 7)
    x = torch.randn(16, 2, generator=g)
    t = torch.rand(16, generator=g)
    neg = torch.rand(16, 2, generator=g)

    def shifted(tt, xx):
        return net(tt, xx) + torch.sin(3 * xx[:, 0]) * xx[:, 1] ** 2

    a = info_nce_loss(net, t, x, neg)
    b = info_nce_loss(shifted, t, x, neg)
    assert torch.allclose(a, b, atol=1e-10)


def test_score_matching_of_zero_model_is_prior_norm(rng):
    x0 = torch.as_tensor(rng.normal(size=(500, 2)))
    x1 = torch.as_tensor(rng.normal(size=(500, 2)))
    t = torch.as_tensor(rng.uniform(0.01, 0.99, size=500))
    loss = score_matching_loss(_net(zero_last=True), make_schedule("trig"), t, x0, x1)
    assert loss.item() == pytest.approx((x1**2).sum(1).mean().item())
    # its expectation is the dimension
    assert loss.item() == pytest.approx(2.0, abs=0.2)


def test_score_matching_floor_for_the_exact_gaussian_energy(rng):
    # N(0, I) data on the trig schedule keeps x_t ~ N(0, I), so the exact energy is -|x|^2 / 2
    # at every t; the residual -sigma alpha x0 + alpha^2 x1 has expected norm d alpha^2
    x0 = torch.as_tensor(rng.normal(size=(20000, 2)))
    x1 = torch.as_tensor(rng.normal(size=(20000, 2)))
    t = torch.full((20000,), 0.5)
    loss = score_matching_loss(_Quadratic(), make_schedule("trig"), t, x0, x1)
    assert loss.item() == pytest.approx(2 * math.cos(math.pi / 4) ** 2, rel=0.03)


def test_joint_loss_parameter_gradient_matches_finite_differences():
    net = _net(seed=3)
    cfg = EbmConfig(train=TrainConfig(t_eps=0.05))
    sched = make_schedule("trig")
    x0 = np.random.default_rng(0).normal(size=(32, 2))

    def loss():
        return ebm_batch_loss(net, sched, cfg, x0, np.random.default_rng(11))

    grads = torch.autograd.grad(loss(), list(net.parameters()))
    checked = 0
    for p, g in zip(net.parameters(), grads):
        for idx in [(0,) * p.ndim, tuple(s - 1 for s in p.shape)]:
            h = 1e-6
            with torch.no_grad():
                p[idx] += h
                up = loss().item()
                p[idx] -= 2 * h
                down = loss().item()
                p[idx] += h
            fd = (up - down) / (2 * h)
            assert fd == pytest.approx(g[idx].item(), rel=1e-4, abs=1e-7)
            checked += 1
    assert checked == 2 * len(grads)


def test_negative_times_stay_near_the_positive():
    t = np.random.default_rng(0).uniform(size=20000)
    neg = NegativeTimeSampler(count=3, std=0.025).sample(t, np.random.default_rng(1))
    assert neg.shape == (20000, 3)
    assert neg.min() >= 0.0 and neg.max() <= 1.0
    assert np.mean(np.abs(neg - t[:, None]) <= 3 * 0.025) > 0.99


def test_config_validation():
    with pytest.raises(ValueError):
        EbmConfig(negatives_count=0)
    with pytest.raises(ValueError):
        EbmConfig(sm_weight=0.0, nce_weight=0.0)
    assert EbmConfig.variant("sm_only").nce_weight == 0.0
    assert EbmConfig.variant("nce_only").sm_weight == 0.0


def test_gaussian_data_recovers_the_quadratic_energy():
    # the tail error is dominated by finite-sample noise, hence the large draw
    data = np.random.default_rng(0).standard_normal((200_000, 2))
    cfg = EbmConfig(train=TrainConfig(epochs=20, batch_size=512, hidden=(32, 32), lr=6e-3,
                                      lr_schedule="cosine", early_stop=0, ema_every=1,
                                      ema_decay=0.999))
    model, _ = train_ebm(data, config=cfg)
    g = np.linspace(-2.0, 2.0, 41)
    x = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    diff = log_density(model, x) + 0.5 * (x**2).sum(1)
    assert np.std(diff) < 0.05


def test_log_density_input_checks_and_checkpoint(tmp_path):
    model = EnergyModel(_net(seed=1))
    assert log_density(model, np.zeros((0, 2))).shape == (0,)
    with pytest.raises(ValueError):
        log_density(model, np.array([[np.nan, 0.0]]))
    model.save(tmp_path / "e.ckpt")
    back = EnergyModel.load(tmp_path / "e.ckpt")
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(log_density(back, x), log_density(model, x))
    with pytest.raises(ValueError):
        EnergyModel(MlpModel(2, 2))
