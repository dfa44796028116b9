"""Claims histories: simulation, CSV I/O, cutoff split and sample preparation.

A claim is observed over development years 0..11 (years since accident).
Each development year carries one signed incremental cash flow and an
open/closed status flag at year end.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_DEV = 12
SEQ_LEN = N_DEV - 1
MASK_VALUE = 99999.0
CATEGORICALS = ("lob", "claim_code", "injured_part")
CSV_COLUMNS = (
    "claim_id", "lob", "claim_code", "accident_year", "accident_quarter", "age",
    "injured_part", "report_year", "dev_year", "cash_flow", "open_status",
)


class ClaimsFormatError(ValueError):
    """Raised for claims data that violates the schema or its invariants."""


@dataclass(eq=False)
class ClaimRecord:
    claim_id: str
    lob: str
    claim_code: str
    accident_year: int
    accident_quarter: int
    age: int
    injured_part: str
    report_year: int
    cash_flows: np.ndarray
    statuses: np.ndarray
    n_observed: int = N_DEV  # development years visible; later cells are NaN

    def __post_init__(self):
        self.cash_flows = np.asarray(self.cash_flows, dtype=np.float64)
        self.statuses = np.asarray(self.statuses, dtype=bool)
        if self.cash_flows.shape != (N_DEV,) or self.statuses.shape != (N_DEV,):
            raise ClaimsFormatError(f"claim {self.claim_id}: sequences must have {N_DEV} entries")
        if self.report_year < self.accident_year:
            raise ClaimsFormatError(f"claim {self.claim_id}: report_year before accident_year")

    @property
    def report_lag(self) -> int:
        return self.report_year - self.accident_year

    def __eq__(self, other):
        if not isinstance(other, ClaimRecord):
            return NotImplemented
        scalars = ("claim_id", "lob", "claim_code", "accident_year", "accident_quarter",
                   "age", "injured_part", "report_year", "n_observed")
        return (all(getattr(self, k) == getattr(other, k) for k in scalars)
                and np.array_equal(self.cash_flows, other.cash_flows, equal_nan=True)
                and np.array_equal(self.statuses, other.statuses))


# -- simulation -----------------------------------------------------------

@dataclass(frozen=True)
class SimulatorConfig:
    """Knobs for the synthetic claims generator.

    Severity is log-normal per claim with effects for line of business and
    injured part; payments occur while the claim is open. Claims may close
    without payment, receive recoveries (negative flows) and re-open.
    """

    first_accident_year: int = 1994
    last_accident_year: int = 2005
    n_lob: int = 4
    n_claim_codes: int = 12
    n_injured_parts: int = 10
    report_lag_probs: tuple[float, ...] = (0.72, 0.2, 0.05, 0.02, 0.01)
    base_log_severity: float = 7.0
    lob_effect_sd: float = 0.3
    part_effect_sd: float = 0.2
    age_effect: float = 0.01
    severity_sd: float = 0.4
    payment_noise_sd: float = 0.3
    zero_closure_prob: float = 0.12
    settle_prob: float = 0.4
    pay_prob: float = 0.85
    recovery_prob: float = 0.05
    reopen_prob: float = 0.03
    effects_seed: int = 20180101

    def validate(self):
        if self.last_accident_year < self.first_accident_year:
            raise ValueError("last_accident_year before first_accident_year")
        probs = np.asarray(self.report_lag_probs)
        if probs.size == 0 or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("report_lag_probs must be a probability vector")
        for name in ("zero_closure_prob", "settle_prob", "pay_prob", "recovery_prob", "reopen_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.settle_prob == 0.0:
            raise ValueError("settle_prob must be positive")
        for name in ("n_lob", "n_claim_codes", "n_injured_parts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if min(self.severity_sd, self.payment_noise_sd, self.lob_effect_sd, self.part_effect_sd) < 0:
            raise ValueError("standard deviations must be non-negative")


def _one_claim(rng: np.random.Generator, cfg: SimulatorConfig, lob: int, part: int,
               age: int, lag: int, lob_fx, part_fx):
    flows = np.zeros(N_DEV)
    status = np.zeros(N_DEV, dtype=bool)
    if lag >= N_DEV:
        return flows, status
    log_sev = (cfg.base_log_severity + lob_fx[lob] + part_fx[part]
               + cfg.age_effect * (age - 40) + cfg.severity_sd * rng.standard_normal())
    severity = math.exp(log_sev)

    def payment(weight=1.0):
        return weight * severity * math.exp(cfg.payment_noise_sd * rng.standard_normal())

    if rng.random() < cfg.zero_closure_prob:
        close_year = lag
        paid_years = []
    else:
        duration = int(rng.geometric(cfg.settle_prob))
        close_year = min(lag + duration - 1, N_DEV - 1)
        paid_years = [d for d in range(lag, close_year + 1)
                      if d == close_year or rng.random() < cfg.pay_prob]
    status[lag:close_year] = True
    for d in paid_years:
        flows[d] = payment()
    if paid_years:
        first = paid_years[0]
        for d in range(first + 1, min(close_year + 2, N_DEV)):
            if rng.random() < cfg.recovery_prob:
                flows[d] = -rng.uniform(0.1, 0.5) * severity
    d = close_year + 1
    while d < N_DEV - 1:
        if rng.random() < cfg.reopen_prob:
            status[d] = True
            flows[d] += payment(0.5)
            d += 2
        else:
            d += 1
    status[N_DEV - 1] = False
    flows = np.round(flows, 2)
    flows[flows == MASK_VALUE] += 0.01
    return flows, status


def simulate_claims(n: int, seed: int, config: SimulatorConfig | None = None) -> list[ClaimRecord]:
    """Generate ``n`` fully developed synthetic claims, deterministic in ``seed``."""
    if n <= 0:
        raise ValueError("n must be positive")
    cfg = config or SimulatorConfig()
    cfg.validate()
    fx_rng = np.random.default_rng(cfg.effects_seed)
    lob_fx = cfg.lob_effect_sd * fx_rng.standard_normal(cfg.n_lob)
    part_fx = cfg.part_effect_sd * fx_rng.standard_normal(cfg.n_injured_parts)
    code_p = fx_rng.dirichlet(np.full(cfg.n_claim_codes, 2.0))
    part_p = fx_rng.dirichlet(np.full(cfg.n_injured_parts, 2.0))
    lag_p = np.asarray(cfg.report_lag_probs) / np.sum(cfg.report_lag_probs)

    rng = np.random.default_rng(seed)
    width = len(str(n))
    claims = []
    for j in range(n):
        ay = int(rng.integers(cfg.first_accident_year, cfg.last_accident_year + 1))
        quarter = int(rng.integers(1, 5))
        age = int(rng.integers(16, 71))
        lob = int(rng.integers(cfg.n_lob))
        code = int(rng.choice(cfg.n_claim_codes, p=code_p))
        part = int(rng.choice(cfg.n_injured_parts, p=part_p))
        lag = int(rng.choice(lag_p.size, p=lag_p))
        flows, status = _one_claim(rng, cfg, lob, part, age, lag, lob_fx, part_fx)
        claims.append(ClaimRecord(
            claim_id=f"C{j:0{width}d}", lob=f"L{lob + 1}", claim_code=f"K{code + 1:02d}",
            accident_year=ay, accident_quarter=quarter, age=age,
            injured_part=f"P{part + 1:02d}", report_year=ay + lag,
            cash_flows=flows, statuses=status,
        ))
    return claims


# -- CSV ------------------------------------------------------------------

def write_claims_csv(claims: Iterable[ClaimRecord], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in claims:
            for d in range(c.n_observed):
                writer.writerow([
                    c.claim_id, c.lob, c.claim_code, c.accident_year, c.accident_quarter,
                    c.age, c.injured_part, c.report_year, d, repr(float(c.cash_flows[d])),
                    int(c.statuses[d]),
                ])


def load_claims_csv(path) -> list[ClaimRecord]:
    """Read claims in the long (one row per claim and development year) layout.

    Development years with no row are treated as zero cash flow, closed.
    """
    path = Path(path)
    statics: dict[str, tuple] = {}
    flows: dict[str, np.ndarray] = {}
    status: dict[str, np.ndarray] = {}
    seen: dict[str, np.ndarray] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ClaimsFormatError(f"{path}: line 1: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ClaimsFormatError(f"{path}: line {lineno}: expected {len(CSV_COLUMNS)} fields")
            try:
                cid, lob, code = row[0], row[1], row[2]
                ay, q, age = int(row[3]), int(row[4]), int(row[5])
                part, ry, dev = row[6], int(row[7]), int(row[8])
                cf, st = float(row[9]), int(row[10])
            except ValueError as exc:
                raise ClaimsFormatError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= dev < N_DEV:
                raise ClaimsFormatError(f"{path}: line {lineno}: dev_year {dev} outside 0..{N_DEV - 1}")
            if st not in (0, 1):
                raise ClaimsFormatError(f"{path}: line {lineno}: open_status must be 0 or 1")
            if not math.isfinite(cf) or cf == MASK_VALUE:
                raise ClaimsFormatError(f"{path}: line {lineno}: invalid cash_flow {row[9]!r}")
            if not 1 <= q <= 4:
                raise ClaimsFormatError(f"{path}: line {lineno}: accident_quarter must be 1..4")
            key = (lob, code, ay, q, age, part, ry)
            if cid in statics:
                if statics[cid] != key:
                    raise ClaimsFormatError(f"{path}: line {lineno}: static fields differ for {cid}")
                if seen[cid][dev]:
                    raise ClaimsFormatError(f"{path}: line {lineno}: duplicate ({cid}, dev_year {dev})")
            else:
                statics[cid] = key
                flows[cid] = np.zeros(N_DEV)
                status[cid] = np.zeros(N_DEV, dtype=bool)
                seen[cid] = np.zeros(N_DEV, dtype=bool)
            seen[cid][dev] = True
            flows[cid][dev] = cf
            status[cid][dev] = bool(st)
    claims = []
    for cid, (lob, code, ay, q, age, part, ry) in statics.items():
        try:
            claims.append(ClaimRecord(cid, lob, code, ay, q, age, part, ry, flows[cid], status[cid]))
        except ClaimsFormatError as exc:
            raise ClaimsFormatError(f"{path}: {exc}") from None
    return claims


# -- cutoff split ---------------------------------------------------------

def observed_years(claim: ClaimRecord, cutoff: int) -> int:
    return max(0, min(N_DEV, cutoff - claim.accident_year + 1))


def split_by_cutoff(claims: Sequence[ClaimRecord], cutoff: int = 2005):
    """Censor claims at the evaluation year.

    Returns ``(train, holdout)``: ``train`` keeps claims reported by
    ``cutoff`` with cells where ``accident_year + dev_year > cutoff`` set to
    NaN (cash flow) / closed (status); ``holdout`` holds the same claims
    uncensored, in the same order.
    """
    if not claims:
        raise ValueError("no claims to split")
    first = min(c.accident_year for c in claims)
    last = max(c.accident_year for c in claims) + N_DEV - 1
    if not first <= cutoff <= last:
        raise ValueError(f"cutoff {cutoff} outside the data's calendar years {first}..{last}")
    train, holdout = [], []
    for c in claims:
        if c.report_year > cutoff:
            continue
        k = observed_years(c, cutoff)
        flows = c.cash_flows.copy()
        status = c.statuses.copy()
        flows[k:] = np.nan
        status[k:] = False
        train.append(replace(c, cash_flows=flows, statuses=status, n_observed=k))
        holdout.append(c)
    return train, holdout


# -- training samples -----------------------------------------------------

@dataclass(eq=False)
class TrainingSample:
    """One (claim, forecast origin) pair before normalization.

    Predictor sequences are pre-padded and targets post-padded to length 11
    with ``MASK_VALUE``. ``dev_year`` is the development year of the last
    predictor step. Scoring points use the same type with targets ``None``.
    """

    claim_id: str
    lob: str
    claim_code: str
    injured_part: str
    age: float
    dev_year: int
    paid_hist: np.ndarray
    recovery_hist: np.ndarray
    status_hist: np.ndarray  # (11, 2) one-hot (open, closed); pad rows (0, 0)
    target_paid: np.ndarray | None = None
    target_recovery: np.ndarray | None = None

    @property
    def history_length(self) -> int:
        return int(np.sum(self.paid_hist != MASK_VALUE))

    @property
    def horizon(self) -> int:
        return SEQ_LEN - self.dev_year


def split_flows(flows):
    """Positive and negative parts: ``(max(C, 0), max(-C, 0))``."""
    flows = np.asarray(flows, dtype=np.float64)
    return np.maximum(flows, 0.0), np.maximum(-flows, 0.0)


def _pre_pad(values, width=SEQ_LEN, fill=MASK_VALUE):
    out = np.full((width,) + np.shape(values)[1:], fill, dtype=np.float64)
    if len(values):
        out[width - len(values):] = values
    return out


def _post_pad(values, width=SEQ_LEN, fill=MASK_VALUE):
    out = np.full(width, fill, dtype=np.float64)
    out[:len(values)] = values
    return out


def _sample(claim: ClaimRecord, origin: int, last: int | None) -> TrainingSample:
    paid, rec = split_flows(claim.cash_flows[:origin + 1])
    st = claim.statuses[:origin + 1]
    onehot = np.stack([st, ~st], axis=1).astype(np.float64)
    status_hist = _pre_pad(onehot, fill=0.0)
    tp = tr = None
    if last is not None:
        fut_paid, fut_rec = split_flows(claim.cash_flows[origin + 1:last + 1])
        tp, tr = _post_pad(fut_paid), _post_pad(fut_rec)
    return TrainingSample(
        claim_id=claim.claim_id, lob=claim.lob, claim_code=claim.claim_code,
        injured_part=claim.injured_part, age=float(claim.age), dev_year=origin,
        paid_hist=_pre_pad(paid), recovery_hist=_pre_pad(rec), status_hist=status_hist,
        target_paid=tp, target_recovery=tr,
    )


def expand_training_samples(train: Iterable[ClaimRecord]) -> list[TrainingSample]:
    """One sample per forecast origin ``i = 0 .. k-1`` where ``k`` is the last visible year."""
    samples = []
    for claim in train:
        k = claim.n_observed - 1
        for i in range(k):
            samples.append(_sample(claim, i, k))
    return samples


def build_scoring_points(train: Iterable[ClaimRecord]) -> list[TrainingSample]:
    """Forecast origin at the cutoff for each claim still short of year 11."""
    return [_sample(c, c.n_observed - 1, None) for c in train
            if 1 <= c.n_observed < N_DEV]


# -- normalization --------------------------------------------------------

@dataclass
class NormalizationStats:
    paid_mean: float
    paid_sd: float
    recovery_mean: float
    recovery_sd: float
    age_mean: float
    age_sd: float
    vocabularies: dict[str, dict[str, int]] = field(default_factory=dict)

    def index(self, variable: str, level: str) -> int:
        return self.vocabularies[variable].get(level, 0)

    def vocab_sizes(self) -> dict[str, int]:
        return {k: len(v) + 1 for k, v in self.vocabularies.items()}

    def vocab_hash(self) -> str:
        blob = json.dumps(self.vocabularies, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)!r}" for k in
                 ("paid_mean", "paid_sd", "recovery_mean", "recovery_sd", "age_mean", "age_sd")]
        for name in sorted(self.vocabularies):
            lines.append(f"vocab.{name} = {json.dumps(self.vocabularies[name], sort_keys=True)}")
        lines.append(f"vocab_hash = {self.vocab_hash()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NormalizationStats":
        kv = parse_key_values(text)
        vocab = {k[len("vocab."):]: {lvl: int(i) for lvl, i in json.loads(v).items()}
                 for k, v in kv.items() if k.startswith("vocab.")}
        stats = cls(**{k: float(kv[k]) for k in
                       ("paid_mean", "paid_sd", "recovery_mean", "recovery_sd", "age_mean", "age_sd")},
                    vocabularies=vocab)
        if "vocab_hash" in kv and kv["vocab_hash"] != stats.vocab_hash():
            raise ClaimsFormatError("normalization stats: vocab_hash does not match vocabularies")
        return stats

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _mean_sd(values: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(values))
    sd = float(np.std(values))  # population sd
    return mean, (sd if sd > 0 else 1.0)


def fit_normalization(samples: Sequence[TrainingSample]) -> NormalizationStats:
    if not samples:
        raise ValueError("cannot fit normalization on an empty sample set")
    paid = np.concatenate([s.paid_hist[s.paid_hist != MASK_VALUE] for s in samples])
    rec = np.concatenate([s.recovery_hist[s.recovery_hist != MASK_VALUE] for s in samples])
    ages = np.array([s.age for s in samples])
    vocab = {}
    for name in CATEGORICALS:
        levels = sorted({getattr(s, name) for s in samples})
        vocab[name] = {lvl: i + 1 for i, lvl in enumerate(levels)}
    pm, ps = _mean_sd(paid)
    rm, rs = _mean_sd(rec)
    am, asd = _mean_sd(ages)
    return NormalizationStats(pm, ps, rm, rs, am, asd, vocab)


@dataclass
class ModelInputs:
    """Columnar, network-ready batch.

    ``history`` channels are (paid, recovery, open, closed), zeroed where
    ``mask`` is False. ``numeric`` is (scaled age, dev_year / 11). Targets
    keep raw magnitudes with ``MASK_VALUE`` sentinels.
    """

    history: np.ndarray          # (B, 11, 4)
    mask: np.ndarray             # (B, 11) bool
    numeric: np.ndarray          # (B, 2)
    categories: np.ndarray       # (B, 3) int
    target_paid: np.ndarray | None = None      # (B, T)
    target_recovery: np.ndarray | None = None  # (B, T)
    claim_ids: list[str] = field(default_factory=list)
    dev_years: np.ndarray | None = None

    def __len__(self):
        return self.history.shape[0]

    def take(self, idx) -> "ModelInputs":
        idx = np.asarray(idx)
        opt = lambda a: None if a is None else a[idx]  # noqa: E731
        return ModelInputs(
            self.history[idx], self.mask[idx], self.numeric[idx], self.categories[idx],
            opt(self.target_paid), opt(self.target_recovery),
            [self.claim_ids[i] for i in idx.reshape(-1)], opt(self.dev_years),
        )

    def padded_targets(self, length: int) -> "ModelInputs":
        """Copy with targets extended by extra masked steps up to ``length``."""
        def pad(a):
            extra = np.full((a.shape[0], length - a.shape[1]), MASK_VALUE)
            return np.concatenate([a, extra], axis=1)
        return replace(self, target_paid=pad(self.target_paid),
                       target_recovery=pad(self.target_recovery))


def transform(samples: Sequence[TrainingSample], stats: NormalizationStats) -> ModelInputs:
    n = len(samples)
    history = np.zeros((n, SEQ_LEN, 4))
    mask = np.zeros((n, SEQ_LEN), dtype=bool)
    numeric = np.zeros((n, 2))
    cats = np.zeros((n, len(CATEGORICALS)), dtype=np.int64)
    has_targets = n > 0 and samples[0].target_paid is not None
    tp = np.full((n, SEQ_LEN), MASK_VALUE) if has_targets else None
    tr = np.full((n, SEQ_LEN), MASK_VALUE) if has_targets else None
    for j, s in enumerate(samples):
        m = s.paid_hist != MASK_VALUE
        mask[j] = m
        history[j, m, 0] = (s.paid_hist[m] - stats.paid_mean) / stats.paid_sd
        history[j, m, 1] = (s.recovery_hist[m] - stats.recovery_mean) / stats.recovery_sd
        history[j, :, 2:] = s.status_hist
        numeric[j] = ((s.age - stats.age_mean) / stats.age_sd, s.dev_year / SEQ_LEN)
        cats[j] = [stats.index(name, getattr(s, name)) for name in CATEGORICALS]
        if has_targets:
            tp[j], tr[j] = s.target_paid, s.target_recovery
    return ModelInputs(history, mask, numeric, cats, tp, tr,
                       [s.claim_id for s in samples],
                       np.array([s.dev_year for s in samples], dtype=np.int64))
