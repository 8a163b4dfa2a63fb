import math

import numpy as np
import pytest
import torch

from boltznce.diffnet import MlpModel
from boltznce.emulator import (
    EmulatorSampleSet,
    FlowModel,
    exact_log_likelihood,
    nll,
    sample,
    standard_normal_logpdf,
    train_emulator,
    vector_field_loss,
)
from boltznce.interpolant import ENDPOINT_T_MIN, make_schedule
from boltznce.training import TrainConfig


def _net(out=2, zero_last=True, seed=0):
    return MlpModel(2, out, hidden=(16, 16), n_freqs=2, zero_last=zero_last, seed=seed)


def test_standard_normal_logpdf_at_origin():
    assert standard_normal_logpdf(np.zeros((1, 2)))[0] == pytest.approx(-math.log(2 * math.pi))


def test_zero_velocity_is_identity_map():
    model = FlowModel(_net())
    s = sample(model, 50, seed=3, with_loglik=True)
    x1 = np.random.default_rng(3).standard_normal((50, 2))
    np.testing.assert_allclose(s.samples, x1, atol=1e-12)
    np.testing.assert_allclose(s.loglik, standard_normal_logpdf(x1), atol=1e-10)
    np.testing.assert_allclose(exact_log_likelihood(model, x1), standard_normal_logpdf(x1), atol=1e-10)


def test_zero_endpoint_model_contracts_to_the_origin():
    # x0_hat = 0 gives v = x / t on the linear schedule, so x(t) = t x1 and
    # log p(x) = log q(x1) - d log t_min
    model = FlowModel(_net(), parameterization="endpoint")
    assert model.t_min == ENDPOINT_T_MIN
    assert model.likelihood_is_approximate
    s = sample(model, 20, seed=0, with_loglik=True, atol=1e-9, rtol=1e-9)
    x1 = np.random.default_rng(0).standard_normal((20, 2))
    np.testing.assert_allclose(s.samples, ENDPOINT_T_MIN * x1, rtol=1e-5)
    expected = standard_normal_logpdf(x1) - 2 * math.log(ENDPOINT_T_MIN)
    np.testing.assert_allclose(s.loglik, expected, rtol=1e-5)
    np.testing.assert_allclose(exact_log_likelihood(model, s.samples, 1e-9, 1e-9), expected, rtol=1e-5)


def test_sampling_and_likelihood_agree_for_a_random_flow():
    model = FlowModel(_net(zero_last=False, seed=5))
    s = sample(model, 40, seed=1, with_loglik=True, atol=1e-9, rtol=1e-9)
    back = exact_log_likelihood(model, s.samples, 1e-9, 1e-9)
    np.testing.assert_allclose(back, s.loglik, atol=1e-5)


def test_finite_difference_divergence_matches_autodiff():
    model = FlowModel(_net(zero_last=False, seed=2))
    x = np.random.default_rng(0).standard_normal((10, 2))
    a = exact_log_likelihood(model, x, 1e-8, 1e-8, "exact_autodiff")
    b = exact_log_likelihood(model, x, 1e-8, 1e-8, "exact_finite_difference")
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_sampling_is_seeded_and_chunking_stays_within_tolerance():
    model = FlowModel(_net(zero_last=False, seed=4))
    # step sizes adapt per chunk, so chunking only moves results within tolerance
    a = sample(model, 30, seed=9, atol=1e-9, rtol=1e-9).samples
    b = sample(model, 30, seed=9, atol=1e-9, rtol=1e-9, chunk_size=7).samples
    c = sample(model, 30, seed=10).samples
    np.testing.assert_array_equal(a, sample(model, 30, seed=9, atol=1e-9, rtol=1e-9).samples)
    np.testing.assert_allclose(a, b, atol=1e-7)
    assert not np.allclose(a, c)


def test_empty_requests():
    model = FlowModel(_net())
    assert sample(model, 0, seed=0, with_loglik=True).samples.shape == (0, 2)
    assert exact_log_likelihood(model, np.zeros((0, 2))).shape == (0,)
    with pytest.raises(ValueError):
        nll(model, np.zeros((0, 2)))


def test_vector_field_loss_of_zero_net_is_target_norm(rng):
    sched = make_schedule("linear")
    x0, x1 = torch.as_tensor(rng.normal(size=(64, 2))), torch.as_tensor(rng.normal(size=(64, 2)))
    t = torch.as_tensor(rng.uniform(size=64))
    loss = vector_field_loss(_net(), sched, t, x0, x1)
    assert loss.item() == pytest.approx(float(((x1 - x0) ** 2).sum(1).mean()))


def test_nll_of_identity_flow(rng):
    x = rng.standard_normal((250, 2))
    res = nll(FlowModel(_net()), x, batch_size=100)
    assert res.mean == pytest.approx(-standard_normal_logpdf(x).mean(), abs=1e-9)
    assert res.n == 250 and res.n_batches == 3 and not res.approximate


def test_sample_set_csv_round_trip(tmp_path):
    s = EmulatorSampleSet(np.arange(6.0).reshape(3, 2) / 7, np.array([-1.0, -2.5, 0.125]), {"seed": 1})
    s.to_csv(tmp_path / "s.csv")
    back = EmulatorSampleSet.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.samples, s.samples)
    np.testing.assert_array_equal(back.loglik, s.loglik)
    assert back.meta == {"seed": 1}


def test_checkpoint_round_trip(tmp_path):
    model = FlowModel(_net(zero_last=False, seed=1), "endpoint", "trig", "endpoint")
    model.save(tmp_path / "m.ckpt")
    back = FlowModel.load(tmp_path / "m.ckpt")
    assert back.model_hash() == model.model_hash()
    assert back.parameterization == "endpoint" and back.schedule.kind == "trig"


@pytest.mark.parametrize("objective", ["vector_field", "endpoint", "cfm"])
def test_training_moves_samples_towards_the_data(objective):
    data = np.random.default_rng(0).normal([2.0, -1.0], 0.3, size=(1000, 2))
    cfg = TrainConfig(epochs=40, batch_size=100, hidden=(32, 32), lr=3e-3, early_stop=0,
                      ema_every=1, ema_decay=0.9)
    model, result = train_emulator(data, objective, config=cfg)
    assert result.summary()["epochs_run"] == 40
    x = sample(model, 500, seed=1, atol=1e-6, rtol=1e-6).samples
    np.testing.assert_allclose(x.mean(0), [2.0, -1.0], atol=0.2)


def test_unknown_objective():
    with pytest.raises(ValueError):
        train_emulator(np.zeros((10, 2)), "diffusion")
