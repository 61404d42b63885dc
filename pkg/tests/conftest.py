import numpy as np
import pytest

from raocd.data import Dataset

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Store a (criterion, passed, detail) line for the end-of-run summary."""

    def record(name, passed, detail):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


def gee_data(rng, n_clusters=40, l=4, p=2, rho=0.4, link="identity", ragged=False):
    """Small AR(1)-correlated clustered dataset with an intercept column."""
    sizes = rng.integers(1, l + 1, n_clusters) if ragged else np.full(n_clusters, l)
    sizes[:2] = l
    cluster = np.repeat(np.arange(n_clusters), sizes)
    N = cluster.size
    X = np.column_stack([np.ones(N), rng.standard_normal((N, p - 1))])
    theta = np.linspace(0.3, -0.4, p)
    eps = np.empty(N)
    for c in range(n_clusters):
        rows = cluster == c
        k = rows.sum()
        R = rho ** np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
        eps[rows] = np.linalg.cholesky(R) @ rng.standard_normal(k)
    eta = X @ theta
    if link == "identity":
        y = eta + eps
    else:
        y = (rng.uniform(size=N) < 1 / (1 + np.exp(-eta))).astype(float)
    return Dataset(X=X, y=y, cluster=cluster)


def cox_data(rng, n=80, p=2, censor=0.3, ties=False):
    X = rng.standard_normal((n, p))
    theta = np.linspace(0.5, -0.5, p)
    t = -np.log(rng.uniform(size=n)) / np.exp(X @ theta)
    if ties:
        t = np.ceil(t * 4) / 4
    status = (rng.uniform(size=n) >= censor).astype(int)
    status[0] = 1
    return Dataset(X=X, time=t, status=status)


def quantile_data(rng, n=300, p=3):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = X @ np.ones(p) + rng.standard_normal(n)
    return Dataset(X=X, y=y)
