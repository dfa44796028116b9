import numpy as np
import pytest

from claimcast import autodiff as ad
from claimcast import network as N
from claimcast.distributions import inverse_softplus


@pytest.fixture(scope="module")
def book(small_book):
    inputs, stats, _, _ = small_book
    return inputs, stats


def test_init_is_deterministic(book):
    _, stats = book
    a, b = (N.init_model(stats.vocab_sizes(), 3) for _ in range(2))
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])
    c = N.init_model(stats.vocab_sizes(), 4)
    assert any(not np.array_equal(v, c.state()[k]) for k, v in a.state().items())


def test_initial_posterior_scale(book):
    m = N.init_model(book[1].vocab_sizes(), 0)
    w, _ = m.heads["paid"].posteriors()
    np.testing.assert_allclose(w.scale, N.INIT_POSTERIOR_SCALE, rtol=1e-12)


def test_kl_positive_and_consistent(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    out = N.forward(m, inputs.take(np.arange(5)), np.random.default_rng(0))
    kl = m.kl_by_head()
    assert kl["paid"] > 0 and kl["recovery"] > 0
    assert float(out.kl_total.value) == pytest.approx(kl["paid"] + kl["recovery"], rel=1e-12)


def test_output_shape_and_finiteness(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    out = N.forward(m, inputs.take(np.arange(7)), np.random.default_rng(0))
    arr = out.raw_array()
    assert arr.shape == (7, 11, 2, 4)
    assert np.all(np.isfinite(arr))


def test_weight_draw_depends_on_seed(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    batch = inputs.take(np.arange(3))
    a = N.forward(m, batch, np.random.default_rng(1)).raw_array()
    b = N.forward(m, batch, np.random.default_rng(1)).raw_array()
    c = N.forward(m, batch, np.random.default_rng(2)).raw_array()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mean_mode_ignores_rng(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    batch = inputs.take(np.arange(3))
    a = N.forward(m, batch, np.random.default_rng(1), mode="mean").raw_array()
    b = N.forward(m, batch, None, mode="mean").raw_array()
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        N.forward(m, batch, None, mode="median")


def test_padded_history_values_are_ignored(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    idx = np.flatnonzero(~inputs.mask.all(axis=1))[:5]
    batch = inputs.take(idx)
    ref = N.decoder_states(m, batch).value
    batch.history = np.where(batch.mask[..., None], batch.history, 123.0)
    np.testing.assert_array_equal(N.decoder_states(m, batch).value, ref)


def test_masked_step_keeps_state():
    rng = np.random.default_rng(0)
    layer = N.LstmLayer.init(rng, 4)
    h0, c0 = (ad.constant(rng.normal(size=(2, 3))) for _ in range(2))
    x = ad.constant(rng.normal(size=(2, 4)))
    h, c = N.lstm_step(layer, x, h0, c0, mask_t=np.array([False, True]))
    np.testing.assert_array_equal(h.value[0], h0.value[0])
    np.testing.assert_array_equal(c.value[0], c0.value[0])
    assert not np.array_equal(h.value[1], h0.value[1])


def test_lstm_gradients_over_five_steps():
    rng = np.random.default_rng(5)
    layer = N.LstmLayer.init(rng, 2)
    xs = rng.normal(size=(5, 3, 2))
    mask = rng.random((5, 3)) < 0.8

    def f():
        h = c = ad.constant(np.zeros((3, 3)))
        for t in range(5):
            h, c = N.lstm_step(layer, ad.constant(xs[t]), h, c, mask_t=mask[t])
        return ad.sum(h * h) + ad.sum(c)

    report = ad.grad_check(f, list(layer.params().values()))
    assert report["max_error"] < 1e-5


def test_lstm_input_width_checked():
    layer = N.LstmLayer.init(np.random.default_rng(0), 4)
    z = ad.constant(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        N.lstm_step(layer, ad.constant(np.zeros((1, 5))), z, z)


def test_epistemic_spread(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    for head in m.heads.values():
        head.w_raw_scale.value[...] = inverse_softplus(0.3)
    batch = inputs.take(np.arange(1))
    draws = np.stack([N.forward(m, batch, np.random.default_rng(s)).raw_array() for s in range(20)])
    assert np.all(draws.var(axis=0) > 0)


def test_head_outputs_match_graph(book):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 0)
    batch = inputs.take(np.arange(4))
    states = N.decoder_states(m, batch).value
    head = m.heads["paid"]
    w = np.repeat(head.w_mean.value[None], 4, axis=0)
    b = np.repeat(head.b_mean.value[None], 4, axis=0)
    out = N.forward(m, batch, None, mode="mean").raw["paid"].value
    np.testing.assert_allclose(N.head_outputs(states, w, b), out, rtol=1e-12, atol=1e-14)


def test_checkpoint_round_trip(book, tmp_path):
    inputs, stats = book
    m = N.init_model(stats.vocab_sizes(), 7)
    N.save_checkpoint(m, tmp_path / "a.ckpt", {"vocab_hash": stats.vocab_hash()})
    loaded = N.load_checkpoint(tmp_path / "a.ckpt")
    for k, v in m.state().items():
        np.testing.assert_array_equal(loaded.state()[k], v)
    assert loaded.meta["vocab_hash"] == stats.vocab_hash()
    N.save_checkpoint(loaded, tmp_path / "b.ckpt")
    N.save_checkpoint(m, tmp_path / "c.ckpt", {"vocab_hash": stats.vocab_hash()})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()
    assert (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "a.ckpt").read_bytes()


def test_unknown_vocab_rejected():
    with pytest.raises(ValueError):
        N.init_model({"lob": 2, "claim_code": 0, "injured_part": 2}, 0)
