"""Report-year chain ladder benchmark on net (paid minus recovery) flows."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import N_DEV, ClaimRecord


@dataclass
class Triangle:
    """Cumulative net paid by origin (report year) and years since report.

    Unobserved cells are NaN.
    """

    origin: np.ndarray
    cumulative: np.ndarray

    @property
    def dev(self) -> np.ndarray:
        return np.arange(self.cumulative.shape[1])

    def latest(self) -> tuple[np.ndarray, np.ndarray]:
        """Last observed column index and value per origin row."""
        observed = ~np.isnan(self.cumulative)
        idx = np.where(observed.any(axis=1), observed.shape[1] - 1 - np.argmax(observed[:, ::-1], axis=1), -1)
        vals = np.array([self.cumulative[r, i] if i >= 0 else 0.0 for r, i in enumerate(idx)])
        return idx, vals

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["origin", *[f"dev{d}" for d in self.dev]])
            for o, row in zip(self.origin, self.cumulative):
                w.writerow([int(o), *["" if np.isnan(v) else repr(float(v)) for v in row]])


@dataclass
class AtaFactors:
    """Volume-weighted factor from column ``d`` to ``d + 1``; NaN where undefined."""

    factors: np.ndarray

    @property
    def undefined(self) -> list[int]:
        return [int(d) for d in np.flatnonzero(np.isnan(self.factors))]

    def filled(self, value: float = 1.0) -> "AtaFactors":
        if self.undefined:
            warnings.warn(f"age-to-age factors undefined at steps {self.undefined}; using {value}",
                          stacklevel=2)
        return AtaFactors(np.where(np.isnan(self.factors), value, self.factors))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["from_dev", "to_dev", "factor"])
            for d, f in enumerate(self.factors):
                w.writerow([d, d + 1, "" if np.isnan(f) else repr(float(f))])


def triangle_from_cells(cells) -> Triangle:
    """Build a triangle from a nested list with ``None`` for unobserved cells."""
    width = max(len(r) for r in cells)
    arr = np.full((len(cells), width), np.nan)
    for i, row in enumerate(cells):
        for j, v in enumerate(row):
            if v is not None:
                arr[i, j] = v
    return Triangle(np.arange(len(cells)), arr)


def build_triangle(train: Sequence[ClaimRecord], cutoff: int, n_dev: int = N_DEV) -> Triangle:
    """Aggregate a censored claims view by report year.

    Flows booked before the report year (none in simulated data) are
    counted in report-dev 0 so the latest diagonal reconciles to paid to date.
    """
    origins = np.arange(min(c.report_year for c in train), cutoff + 1)
    incr = np.zeros((origins.size, n_dev))
    for c in train:
        r = c.report_year - origins[0]
        lag = c.report_lag
        flows = np.nan_to_num(c.cash_flows[:c.n_observed])
        incr[r, 0] += flows[:lag + 1].sum()
        tail = flows[lag + 1:]
        incr[r, 1:1 + tail.size] += tail[:n_dev - 1]
    cum = np.cumsum(incr, axis=1)
    d = np.arange(n_dev)
    cum[origins[:, None] + d[None, :] > cutoff] = np.nan
    return Triangle(origins, cum)


def ata_factors(tri: Triangle) -> AtaFactors:
    C = tri.cumulative
    if C.shape[1] < 2:
        raise ValueError("triangle needs at least two development columns")
    out = np.full(C.shape[1] - 1, np.nan)
    for d in range(C.shape[1] - 1):
        both = ~np.isnan(C[:, d]) & ~np.isnan(C[:, d + 1])
        den = C[both, d].sum()
        if both.any() and den != 0:
            out[d] = C[both, d + 1].sum() / den
    return AtaFactors(out)


def unpaid_estimate(tri: Triangle, factors: AtaFactors):
    """Total unpaid and per-origin rows ``(origin, latest, ultimate, unpaid)``."""
    idx, latest = tri.latest()
    last_col = tri.cumulative.shape[1] - 1
    rows = []
    for o, i, cur in zip(tri.origin, idx, latest):
        f = factors.factors[max(i, 0):last_col] if i >= 0 else np.array([])
        if np.any(np.isnan(f)):
            raise ValueError(f"origin {o}: undefined factor on a needed step")
        ult = cur * float(np.prod(f)) if f.size else cur
        rows.append((int(o), float(cur), float(ult), float(ult - cur)))
    return float(sum(r[3] for r in rows)), rows


def paid_to_date(train: Sequence[ClaimRecord]) -> float:
    return float(sum(np.nansum(c.cash_flows[:c.n_observed]) for c in train))


def actual_unpaid(holdout: Sequence[ClaimRecord], train: Sequence[ClaimRecord]) -> float:
    """Net flows after the cutoff through development year 11, over ``train``'s claims."""
    full = {c.claim_id: c for c in holdout}
    total = 0.0
    for c in train:
        total += float(full[c.claim_id].cash_flows[c.n_observed:].sum())
    return total
