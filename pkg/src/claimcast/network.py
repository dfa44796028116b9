"""Encoder-decoder mixture density network with variational output heads.

Wiring, per sample:

* each static categorical -> 2-d embedding;
* (scaled age, scaled dev year) -> dense(4, tanh);
* history channels (paid, recovery, open, closed) -> encoder LSTM(3), with
  masked (padding) steps passing the state through unchanged;
* [encoder state, embeddings, static dense] repeated ``n_steps`` times ->
  decoder LSTM(3);
* each decoder step -> paid head and recovery head, each a variational
  dense layer 3 -> 4 whose weights are drawn once per forward pass and
  shared across steps.

Only the two heads are Bayesian; everything before them is deterministic.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import CATEGORICALS, SEQ_LEN, ModelInputs
from .distributions import GaussianPosterior, gaussian_kl_graph, inverse_softplus

EMBED_DIM = 2
HIDDEN = 3
STATIC_WIDTH = 4
HEAD_OUT = 4
HISTORY_CHANNELS = 4
HEADS = ("paid", "recovery")
INIT_POSTERIOR_SCALE = 0.01
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Non-finite activations or losses."""


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class LstmLayer:
    """Gate order along the last axis of ``W``/``U``/``b``: input, forget, cell, output."""

    W: ad.Node
    U: ad.Node
    b: ad.Node

    @classmethod
    def init(cls, rng, input_size, hidden=HIDDEN):
        U = np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=1)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return cls(ad.parameter(_glorot(rng, input_size, 4 * hidden)),
                   ad.parameter(U), ad.parameter(b))

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def params(self):
        return {"W": self.W, "U": self.U, "b": self.b}


def lstm_step(layer: LstmLayer, x_t, h_prev, c_prev, mask_t=None, x_proj=None):
    """One LSTM step. ``mask_t`` (B,) False keeps ``(h_prev, c_prev)``.

    ``x_proj`` may carry a precomputed ``x_t @ W`` for repeated inputs.
    """
    H = layer.hidden
    if x_proj is None:
        if x_t.shape[-1] != layer.W.shape[0]:
            raise ValueError(f"lstm_step: input width {x_t.shape[-1]} != {layer.W.shape[0]}")
        x_proj = ad.matmul(x_t, layer.W)
    z = ad.add_rows(x_proj + ad.matmul(h_prev, layer.U), layer.b)
    hc = ad.lstm_cell(z, h_prev, c_prev, keep=mask_t)
    h, c = hc[:, :H], hc[:, H:]
    return h, c


@dataclass
class VariationalDense:
    """Gaussian posterior over a (in_dim x 4) weight matrix and 4 biases."""

    w_mean: ad.Node
    w_raw_scale: ad.Node
    b_mean: ad.Node
    b_raw_scale: ad.Node

    @classmethod
    def init(cls, rng, in_dim, out_dim=HEAD_OUT, scale=INIT_POSTERIOR_SCALE):
        raw = float(inverse_softplus(scale))
        return cls(ad.parameter(rng.normal(0.0, 0.05, (in_dim, out_dim))),
                   ad.parameter(np.full((in_dim, out_dim), raw)),
                   ad.parameter(rng.normal(0.0, 0.05, out_dim)),
                   ad.parameter(np.full(out_dim, raw)))

    def params(self):
        return {"w_mean": self.w_mean, "w_raw_scale": self.w_raw_scale,
                "b_mean": self.b_mean, "b_raw_scale": self.b_raw_scale}

    def posteriors(self) -> tuple[GaussianPosterior, GaussianPosterior]:
        return (GaussianPosterior(self.w_mean.value, self.w_raw_scale.value),
                GaussianPosterior(self.b_mean.value, self.b_raw_scale.value))

    def sample_graph(self, rng: np.random.Generator | None):
        """Reparameterized weight draw; ``rng=None`` returns posterior means."""
        if rng is None:
            return self.w_mean, self.b_mean
        eps_w = rng.standard_normal(self.w_mean.shape)
        eps_b = rng.standard_normal(self.b_mean.shape)
        w = self.w_mean + ad.softplus(self.w_raw_scale) * ad.constant(eps_w)
        b = self.b_mean + ad.softplus(self.b_raw_scale) * ad.constant(eps_b)
        return w, b

    def sample_numpy(self, rng: np.random.Generator, size: int):
        """``size`` independent draws as arrays ``(size, in, 4)``, ``(size, 4)``."""
        wp, bp = self.posteriors()
        w = wp.mean + wp.scale * rng.standard_normal((size,) + wp.mean.shape)
        b = bp.mean + bp.scale * rng.standard_normal((size,) + bp.mean.shape)
        return w, b

    def kl_graph(self) -> ad.Node:
        return (gaussian_kl_graph(self.w_mean, self.w_raw_scale)
                + gaussian_kl_graph(self.b_mean, self.b_raw_scale))


@dataclass
class ForwardResult:
    raw: dict[str, ad.Node]  # head -> (B, T, 4)
    kl: dict[str, ad.Node]

    @property
    def kl_total(self) -> ad.Node:
        return self.kl["paid"] + self.kl["recovery"]

    def raw_array(self) -> np.ndarray:
        """Stacked as (B, T, 2 heads, 4)."""
        return np.stack([self.raw[h].value for h in HEADS], axis=2)


@dataclass
class BmdnModel:
    embeddings: dict[str, ad.Node]
    static_W: ad.Node
    static_b: ad.Node
    encoder: LstmLayer
    decoder: LstmLayer
    heads: dict[str, VariationalDense]
    n_steps: int = SEQ_LEN
    meta: dict = field(default_factory=dict)

    def named_parameters(self) -> dict[str, ad.Node]:
        out = {f"emb.{k}": v for k, v in self.embeddings.items()}
        out["static.W"] = self.static_W
        out["static.b"] = self.static_b
        for name, layer in (("enc", self.encoder), ("dec", self.decoder)):
            out.update({f"{name}.{k}": v for k, v in layer.params().items()})
        for h in HEADS:
            out.update({f"head.{h}.{k}": v for k, v in self.heads[h].params().items()})
        return out

    def parameters(self) -> list[ad.Node]:
        return list(self.named_parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.value = np.array(state[k], dtype=np.float64)
            p.grad = np.zeros_like(p.value)

    def kl_by_head(self) -> dict[str, float]:
        from .distributions import gaussian_kl_std_normal
        return {h: sum(gaussian_kl_std_normal(p) for p in self.heads[h].posteriors())
                for h in HEADS}


def init_model(vocab_sizes: dict[str, int], seed: int, n_steps: int = SEQ_LEN) -> BmdnModel:
    for name in CATEGORICALS:
        if vocab_sizes.get(name, 0) < 1:
            raise ValueError(f"vocab size for {name} must be >= 1")
    rng = np.random.default_rng(seed)
    emb = {name: ad.parameter(rng.normal(0.0, 0.05, (vocab_sizes[name], EMBED_DIM)))
           for name in CATEGORICALS}
    static_W = ad.parameter(_glorot(rng, 2, STATIC_WIDTH))
    static_b = ad.parameter(np.zeros(STATIC_WIDTH))
    encoder = LstmLayer.init(rng, HISTORY_CHANNELS)
    dec_in = HIDDEN + EMBED_DIM * len(CATEGORICALS) + STATIC_WIDTH
    decoder = LstmLayer.init(rng, dec_in)
    heads = {h: VariationalDense.init(rng, HIDDEN) for h in HEADS}
    return BmdnModel(emb, static_W, static_b, encoder, decoder, heads, n_steps,
                     meta={"seed": seed, "vocab_sizes": dict(vocab_sizes)})


def _embed(table: ad.Node, idx: np.ndarray) -> ad.Node:
    # One-hot matmul keeps embedding lookup on the existing matmul rule.
    onehot = np.zeros((idx.size, table.shape[0]))
    onehot[np.arange(idx.size), idx] = 1.0
    return ad.matmul(ad.constant(onehot), table)


def decoder_states(model: BmdnModel, batch: ModelInputs) -> ad.Node:
    """Deterministic part of the network: decoder hidden states (B, T, 3)."""
    n = len(batch)
    x = batch.history
    h = ad.constant(np.zeros((n, HIDDEN)))
    c = ad.constant(np.zeros((n, HIDDEN)))
    for t in range(x.shape[1]):
        h, c = lstm_step(model.encoder, ad.constant(x[:, t, :]), h, c, mask_t=batch.mask[:, t])
    cats = np.clip(batch.categories, 0, None)
    embs = []
    for j, name in enumerate(CATEGORICALS):
        table = model.embeddings[name]
        idx = np.where(cats[:, j] < table.shape[0], cats[:, j], 0)
        embs.append(_embed(table, idx))
    static = ad.tanh(ad.add_rows(ad.matmul(ad.constant(batch.numeric), model.static_W),
                                 model.static_b))
    enc = ad.concat([h, *embs, static], axis=1)
    enc_proj = ad.matmul(enc, model.decoder.W)
    hd = ad.constant(np.zeros((n, HIDDEN)))
    cd = ad.constant(np.zeros((n, HIDDEN)))
    outs = []
    for _ in range(model.n_steps):
        hd, cd = lstm_step(model.decoder, None, hd, cd, x_proj=enc_proj)
        outs.append(hd)
    return ad.stack(outs, axis=1)


def forward(model: BmdnModel, batch: ModelInputs, rng: np.random.Generator | None,
            mode: str = "sample") -> ForwardResult:
    """Run the network on ``batch``.

    ``mode="sample"`` draws one weight realization per head from ``rng``;
    ``mode="mean"`` uses posterior means (diagnostics only).
    """
    if mode not in ("sample", "mean"):
        raise ValueError(f"unknown mode {mode!r}")
    states = decoder_states(model, batch)
    n, T = len(batch), model.n_steps
    flat = ad.reshape(states, (n * T, HIDDEN))
    raw, kl = {}, {}
    for head in HEADS:
        w, b = model.heads[head].sample_graph(rng if mode == "sample" else None)
        out = ad.add_rows(ad.matmul(flat, w), b)
        raw[head] = ad.reshape(out, (n, T, HEAD_OUT))
        kl[head] = model.heads[head].kl_graph()
        if not np.all(np.isfinite(raw[head].value)):
            raise NumericError(f"non-finite {head} head output")
    return ForwardResult(raw, kl)


def head_outputs(states: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Apply drawn head weights to decoder states (numpy, no tape).

    ``states`` (B, T, 3); ``w`` (B, 3, 4) and ``b`` (B, 4) hold one draw per sample.
    """
    return np.einsum("btk,bko->bto", states, w) + b[:, None, :]


# -- checkpoints ----------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(model: BmdnModel, path, extra: dict | None = None) -> None:
    """Write a zip of ``.npy`` tensors plus ``meta.json``.

    Tensor order is ``meta["field_order"]``; timestamps are fixed so equal
    models give byte-identical files.
    """
    params = model.named_parameters()
    meta = {"format_version": CHECKPOINT_VERSION, "n_steps": model.n_steps,
            "field_order": list(params), **model.meta, **(extra or {})}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE),
                    json.dumps(meta, sort_keys=True, indent=1))
        for name, node in params.items():
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(node.value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_DATE), arr.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> BmdnModel:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        state = {name: np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")))
                 for name in meta["field_order"]}
    model = init_model(meta["vocab_sizes"], seed=0, n_steps=meta["n_steps"])
    model.meta = {k: v for k, v in meta.items() if k not in ("format_version", "n_steps", "field_order")}
    model.load_state(state)
    return model
