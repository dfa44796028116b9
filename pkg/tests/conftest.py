import numpy as np
import pytest

from claimcast import data


def model_inputs(n_claims=200, seed=0, cutoff=2005):
    claims = data.simulate_claims(n_claims, seed=seed)
    train, holdout = data.split_by_cutoff(claims, cutoff)
    samples = data.expand_training_samples(train)
    stats = data.fit_normalization(samples)
    return data.transform(samples, stats), stats, train, holdout


@pytest.fixture(scope="session")
def small_book():
    return model_inputs(200, seed=0)


TOY_VOCAB = {"lob": 3, "claim_code": 2, "injured_part": 2}


def toy_inputs(n=2000, seed=0):
    """Two segments by ``lob``: level 1 never pays, level 2 pays about 5 each step."""
    rng = np.random.default_rng(seed)
    T = data.SEQ_LEN
    seg = rng.integers(1, 3, n)
    dev = rng.integers(0, T, n)
    hist = np.zeros((n, T, 4))
    mask = np.zeros((n, T), bool)
    paid = np.full((n, T), data.MASK_VALUE)
    for i in range(n):
        seen, ahead = dev[i] + 1, T - dev[i]
        pays = seg[i] == 2
        mask[i, T - seen:] = True
        hist[i, T - seen:, 0] = pays * np.exp(rng.normal(0, 0.05, seen))
        hist[i, T - seen:, 2] = 1.0
        paid[i, :ahead] = 5.0 * np.exp(rng.normal(0, 0.05, ahead)) if pays else 0.0
    recovery = np.where(paid == data.MASK_VALUE, data.MASK_VALUE, 0.0)
    numeric = np.column_stack([rng.normal(size=n), dev / T])
    cats = np.column_stack([seg, np.ones(n, int), np.ones(n, int)])
    return data.ModelInputs(hist, mask, numeric, cats, paid, recovery,
                            [f"T{i:05d}" for i in range(n)], dev)


_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _ACCEPTANCE.append((name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split("_")[2])):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
