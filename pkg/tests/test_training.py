import numpy as np
import pytest

from claimcast import autodiff as ad
from claimcast import network as N
from claimcast import training as T
from claimcast.data import MASK_VALUE
from claimcast.distributions import MixtureParams, inverse_softplus, mixture_logprob

from conftest import model_inputs


@pytest.fixture(scope="module")
def book(small_book):
    inputs, stats, _, _ = small_book
    return inputs, stats


def fresh(stats, seed=0, n_steps=11):
    return N.init_model(stats.vocab_sizes(), seed, n_steps=n_steps)


class TestMaskedNll:
    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(3, 5, 4))
        y = np.where(rng.random((3, 5)) < 0.3, 0.0, rng.uniform(0, 9, (3, 5)))
        y[0, 3:] = MASK_VALUE
        p = MixtureParams(raw)
        ref = -sum(mixture_logprob(y[i, t], MixtureParams(raw[i, t]))
                   for i in range(3) for t in range(5) if y[i, t] != MASK_VALUE)
        assert T.masked_nll(y, p) == pytest.approx(float(ref), rel=1e-12)
        graph = T.masked_nll_graph(y, ad.constant(raw))
        assert float(graph.value) == pytest.approx(float(ref), rel=1e-12)

    def test_masked_values_do_not_matter(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(2, 4, 4))
        y = np.array([[1.0, 0.0, MASK_VALUE, MASK_VALUE], [3.0, MASK_VALUE, MASK_VALUE, MASK_VALUE]])
        base = T.masked_nll(y, MixtureParams(raw))
        raw[:, 2:] += 100.0
        raw[1, 1] -= 50.0
        assert T.masked_nll(y, MixtureParams(raw)) == base

    def test_all_masked_row_rejected(self):
        y = np.array([[1.0, 2.0], [MASK_VALUE, MASK_VALUE]])
        with pytest.raises(ValueError):
            T.masked_nll(y, MixtureParams(np.zeros((2, 2, 4))))
        with pytest.raises(ValueError):
            T.masked_nll_graph(y, ad.constant(np.zeros((2, 2, 4))))


class TestBatchLoss:
    def test_extra_masked_steps_leave_loss_unchanged(self, book):
        inputs, stats = book
        batch = inputs.take(np.arange(10))
        short = T.batch_loss(fresh(stats), batch, len(inputs), np.random.default_rng(3)).value
        long_ = T.batch_loss(fresh(stats, n_steps=15), batch.padded_targets(15), len(inputs),
                             np.random.default_rng(3)).value
        assert abs(short - long_) < 1e-12

    def test_prior_posterior_gives_pure_nll(self, book):
        inputs, stats = book
        m = fresh(stats)
        for head in m.heads.values():
            for mean, raw in ((head.w_mean, head.w_raw_scale), (head.b_mean, head.b_raw_scale)):
                mean.value[...] = 0.0
                raw.value[...] = inverse_softplus(1.0)
        loss = T.batch_loss(m, inputs.take(np.arange(6)), len(inputs), np.random.default_rng(0))
        assert float(loss.kl.value) == pytest.approx(0.0, abs=1e-12)
        assert loss.value == pytest.approx(float(loss.nll.value), abs=1e-10)

    def test_kl_weight_scales_with_dataset_size(self, book):
        inputs, stats = book
        m = fresh(stats)
        batch = inputs.take(np.arange(8))
        a = T.batch_loss(m, batch, 100, np.random.default_rng(0))
        b = T.batch_loss(m, batch, 200, np.random.default_rng(0))
        kl_a = a.value - float(a.nll.value)
        kl_b = b.value - float(b.nll.value)
        assert kl_b == pytest.approx(kl_a / 2, rel=1e-9)
        assert a.kl_scale == 8 / 100

    def test_gradients_against_differences(self, book):
        inputs, stats = book
        m = fresh(stats, seed=2)
        rng = np.random.default_rng(2)
        for p in m.parameters():
            p.value = p.value + rng.normal(0, 0.3, p.shape)
        batch = inputs.take(rng.choice(len(inputs), 4, replace=False))
        report = ad.grad_check(lambda: T.batch_loss(m, batch, len(inputs), np.random.default_rng(9)).total,
                               m.parameters(), step=1e-3, stencil=4)
        assert report["max_error"] < 1e-3

    def test_bad_arguments(self, book):
        inputs, stats = book
        with pytest.raises(ValueError):
            T.batch_loss(fresh(stats), inputs.take(np.arange(5)), 3, None)


class TestPlateauSchedule:
    def test_halves_after_patience(self):
        s = T.PlateauSchedule(0.01, patience=5, stop_patience=10)
        s.step(1.0)
        lrs = []
        for _ in range(10):
            lrs.append(s.lr)
            s.step(1.0)
        assert lrs[:5] == [0.01] * 5
        assert lrs[5] == 0.005
        assert s.lr == 0.0025
        assert s.should_stop

    def test_improvement_resets(self):
        s = T.PlateauSchedule(0.01, patience=2, stop_patience=3)
        for v in (1.0, 1.0, 0.5, 0.5, 0.4):
            s.step(v)
        assert s.lr == 0.01 and not s.should_stop

    def test_min_delta(self):
        s = T.PlateauSchedule(0.01, min_delta=1e-3)
        s.step(1.0)
        assert not s.step(1.0 - 1e-4)
        assert s.step(0.99)


class TestConfig:
    def test_text_round_trip(self):
        cfg = T.TrainConfig(lr0=0.02, minibatch=64, seed=4)
        assert T.TrainConfig.from_text(cfg.to_text()) == cfg

    def test_overrides_and_unknown_keys(self):
        assert T.TrainConfig.from_text("max_epochs = 3\n", max_epochs=7, seed=None).max_epochs == 7
        with pytest.raises(ValueError):
            T.TrainConfig.from_text("learning_rate = 0.1\n")
        with pytest.raises(ValueError):
            T.TrainConfig(val_fraction=0.0)


@pytest.fixture(scope="module")
def tiny():
    inputs, stats, _, _ = model_inputs(60, seed=5)
    return inputs, stats


class TestTrain:
    def test_reduces_validation_loss(self, tiny):
        inputs, stats = tiny
        _, log = T.train(fresh(stats), inputs, T.TrainConfig(max_epochs=6, minibatch=32))
        assert len(log.rows()) == 7 and np.isnan(log.train_loss[0])
        assert min(log.val_loss[1:]) < log.val_loss[0]
        assert log.stop_reason == "max_epochs"

    def test_reproducible(self, tiny):
        inputs, stats = tiny
        cfg = T.TrainConfig(max_epochs=2, minibatch=32, seed=3)
        a, la = T.train(fresh(stats), inputs, cfg)
        b, lb = T.train(fresh(stats), inputs, cfg)
        assert la.val_loss == lb.val_loss
        for k, v in a.state().items():
            np.testing.assert_array_equal(v, b.state()[k])

    def test_restores_best_epoch(self, tiny):
        inputs, stats = tiny
        m, log = T.train(fresh(stats), inputs, T.TrainConfig(max_epochs=4, minibatch=32))
        n_val = round(0.05 * len(inputs))
        assert log.val_loss[log.best_epoch] == min(log.val_loss)
        assert n_val >= 1

    def test_early_stopping(self, tiny):
        inputs, stats = tiny
        cfg = T.TrainConfig(max_epochs=50, minibatch=32, lr0=1e-9, plateau_patience=1,
                            early_stop_patience=2)
        _, log = T.train(fresh(stats), inputs, cfg)
        assert log.stop_reason == "early_stopping"
        assert len(log.rows()) == 3

    def test_log_csv(self, tiny, tmp_path):
        inputs, stats = tiny
        _, log = T.train(fresh(stats), inputs, T.TrainConfig(max_epochs=1, minibatch=64))
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3


class TestEnsemble:
    def test_members_use_consecutive_seeds(self, tiny):
        inputs, stats = tiny
        cfg = T.TrainConfig(max_epochs=1, minibatch=64, seed=10)
        members = T.train_ensemble(inputs, cfg, stats.vocab_sizes(), n_models=2)
        assert [m.meta["seed"] for m, _ in members] == [10, 11]
        single = T.train_ensemble(inputs, T.TrainConfig(max_epochs=1, minibatch=64, seed=11),
                                  stats.vocab_sizes(), n_models=1)
        for k, v in single[0][0].state().items():
            np.testing.assert_array_equal(v, members[1][0].state()[k])

    def test_parallel_matches_serial(self, tiny):
        inputs, stats = tiny
        cfg = T.TrainConfig(max_epochs=1, minibatch=64)
        serial = T.train_ensemble(inputs, cfg, stats.vocab_sizes(), n_models=2)
        par = T.train_ensemble(inputs, cfg, stats.vocab_sizes(), n_models=2, n_jobs=2)
        for (a, _), (b, _) in zip(serial, par):
            for k, v in a.state().items():
                np.testing.assert_array_equal(v, b.state()[k])

    def test_rejects_empty(self, tiny):
        with pytest.raises(ValueError):
            T.train_ensemble(tiny[0], T.TrainConfig(), tiny[1].vocab_sizes(), n_models=0)
