"""Variational objective and the SGD training protocol."""
from __future__ import annotations

import csv
import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import MASK_VALUE, ModelInputs, parse_key_values
from .distributions import MixtureParams, mixture_logprob, mixture_logprob_graph
from .network import HEADS, BmdnModel, NumericError, forward, init_model


class TrainingDiverged(NumericError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    minibatch: int = 256
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 100
    val_fraction: float = 0.05
    lr_halving_factor: float = 0.5
    min_delta: float = 1e-4
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.minibatch < 1 or self.max_epochs < 0 or self.lr0 <= 0:
            raise ValueError("minibatch, max_epochs and lr0 must be positive")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key = value`` text; ``overrides`` (non-None) take precedence."""
        kv = parse_key_values(text)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = {k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in kv.items()}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    def record(self, epoch, train_loss, val_loss, lr, wall):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.wall_time.append(wall)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss, self.lr))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e, tl, vl, lr in self.rows():
                w.writerow([e, repr(tl), repr(vl), repr(lr)])


# -- objective ------------------------------------------------------------

def _check_targets(targets: np.ndarray) -> np.ndarray:
    observed = targets != MASK_VALUE
    if not np.all(observed.any(axis=-1)):
        raise ValueError("target sequence with every element masked")
    return observed


def masked_nll(targets, params: MixtureParams) -> float:
    """Negative log-likelihood of the unmasked targets (numpy reference)."""
    targets = np.asarray(targets, dtype=np.float64)
    observed = _check_targets(targets)
    lp = mixture_logprob(np.where(observed, targets, 0.0), params)
    return float(-np.sum(np.where(observed, lp, 0.0)))


def masked_nll_graph(targets: np.ndarray, raw: ad.Node) -> ad.Node:
    """Tape version of :func:`masked_nll`; ``raw`` is (B, T, 4)."""
    observed = _check_targets(targets)
    lp = mixture_logprob_graph(np.where(observed, targets, 0.0), raw)
    return ad.neg(ad.sum(lp * ad.constant(observed.astype(np.float64))))


@dataclass
class BatchLoss:
    total: ad.Node
    nll: ad.Node
    kl: ad.Node
    kl_scale: float

    @property
    def value(self) -> float:
        return float(self.total.value)


def batch_loss(model: BmdnModel, batch: ModelInputs, dataset_size: int,
               rng: np.random.Generator | None, mode: str = "sample") -> BatchLoss:
    """Masked NLL over both heads plus ``|batch| / |dataset|`` times the heads' KL."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if dataset_size < n:
        raise ValueError("dataset_size smaller than the batch")
    out = forward(model, batch, rng, mode=mode)
    T = model.n_steps
    nll = (masked_nll_graph(batch.target_paid[:, :T], out.raw["paid"])
           + masked_nll_graph(batch.target_recovery[:, :T], out.raw["recovery"]))
    kl_scale = n / dataset_size
    kl = out.kl_total
    return BatchLoss(nll + ad.scale(kl, kl_scale), nll, kl, kl_scale)


# -- protocol -------------------------------------------------------------

class PlateauSchedule:
    """Halve the learning rate on a validation plateau; stop on a longer one.

    No improvement means ``loss >= best - min_delta``. The plateau counter
    resets after each halving; the early-stop counter does not.
    """

    def __init__(self, lr0, patience=5, stop_patience=10, factor=0.5, min_delta=1e-4):
        self.lr = lr0
        self.patience = patience
        self.stop_patience = stop_patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0
        self.stall = 0

    def step(self, val_loss: float) -> bool:
        """Register one epoch; returns True if it improved on the best."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = self.stall = 0
            return True
        self.wait += 1
        self.stall += 1
        if self.wait >= self.patience:
            self.lr *= self.factor
            self.wait = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.stall >= self.stop_patience


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient")
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def evaluate(model, batch: ModelInputs, dataset_size: int, seed: int, chunk: int = 4096) -> float:
    """Mean per-sample loss under one seeded weight draw."""
    total = 0.0
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        loss = batch_loss(model, part, max(dataset_size, len(part)),
                          np.random.default_rng(seed))
        total += float(loss.nll.value) + len(part) / dataset_size * float(loss.kl.value)
    return total / len(batch)


def train(model: BmdnModel, inputs: ModelInputs, config: TrainConfig = TrainConfig(),
          verbose: bool = False):
    """Fit ``model`` in place with minibatch SGD; returns ``(model, log)``.

    The model is left holding the parameters of its best validation epoch.
    Each step descends ``batch_loss / |batch|``, i.e. the per-sample
    objective with KL weight ``1 / |dataset|``.
    """
    n = len(inputs)
    if n < 2:
        raise ValueError("need at least two samples to hold out validation data")
    ss = np.random.SeedSequence(config.seed)
    split_ss, shuffle_ss, draw_ss = ss.spawn(3)
    val_seed = int(ss.generate_state(1)[0])
    perm = np.random.default_rng(split_ss).permutation(n)
    n_val = min(n - 1, max(1, int(round(config.val_fraction * n))))
    val, tr = inputs.take(np.sort(perm[:n_val])), inputs.take(np.sort(perm[n_val:]))
    d = len(tr)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    draw_rng = np.random.default_rng(draw_ss)
    params = model.parameters()
    sched = PlateauSchedule(config.lr0, config.plateau_patience, config.early_stop_patience,
                            config.lr_halving_factor, config.min_delta)
    log = TrainLog()
    t0 = time.perf_counter()

    v0 = evaluate(model, val, d, val_seed)
    if not np.isfinite(v0):
        raise TrainingDiverged("initial validation loss is not finite", log)
    log.record(0, float("nan"), v0, sched.lr, time.perf_counter() - t0)
    sched.step(v0)
    best_state = model.state()

    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        order = shuffle_rng.permutation(d)
        running = 0.0
        for start in range(0, d, config.minibatch):
            batch = tr.take(order[start:start + config.minibatch])
            loss = batch_loss(model, batch, d, draw_rng)
            per_sample = ad.scale(loss.total, 1.0 / len(batch))
            ad.zero_grad(params)
            ad.backward(per_sample)
            grads = _clip([p.grad for p in params], config.grad_clip)
            for p, g in zip(params, grads):
                p.value = p.value - lr * g
            running += loss.value
        train_loss = running / d
        val_loss = evaluate(model, val, d, val_seed)
        log.record(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        if verbose:
            print(f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  lr {lr:g}")
        if not np.isfinite(val_loss):
            log.stop_reason = "diverged"
            raise TrainingDiverged(f"validation loss not finite at epoch {epoch}", log)
        if sched.step(val_loss):
            best_state = model.state()
            log.best_epoch = epoch
        if sched.should_stop:
            log.stop_reason = "early_stopping"
            break
    else:
        log.stop_reason = "max_epochs"
    model.load_state(best_state)
    return model, log


def _train_member(args):
    vocab_sizes, inputs, config, n_steps = args
    model = init_model(vocab_sizes, config.seed, n_steps=n_steps)
    return train(model, inputs, config)


def train_ensemble(inputs: ModelInputs, config: TrainConfig, vocab_sizes: dict[str, int],
                   n_models: int = 10, n_jobs: int = 1, n_steps: int | None = None):
    """Train ``n_models`` members with seeds ``config.seed + m``.

    Returns a list of ``(model, log)`` pairs in member order, independent of
    ``n_jobs``.
    """
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    from .data import SEQ_LEN
    jobs = [(vocab_sizes, inputs, dataclasses.replace(config, seed=config.seed + m),
             n_steps or SEQ_LEN) for m in range(n_models)]
    if n_jobs > 1 and n_models > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_train_member, jobs))
    return [_train_member(j) for j in jobs]


__all__ = ["TrainConfig", "TrainLog", "TrainingDiverged", "masked_nll", "masked_nll_graph",
           "batch_loss", "BatchLoss", "PlateauSchedule", "evaluate", "train", "train_ensemble",
           "HEADS"]
