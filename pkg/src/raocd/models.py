"""Estimating functions for quantile regression, GEE and Cox regression.

Every family exposes the same four quantities for a shard:

* ``psi_summands`` -- one row per independent unit, whose mean is the shard
  estimating function;
* ``psi_bar`` -- that mean;
* ``sensitivity`` -- ``S_n(theta)``, the positive-definite slope of
  ``psi_bar``: its Jacobian is ``model.jacobian_sign * S``;
* ``variability`` -- ``V_n(theta)``, the mean outer product of the summands.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DegenerateDataError, SchemaError

CORRELATION_KINDS = ("independence", "ar1", "cs")
LINKS = ("identity", "logit")
RHO_CLAMP = 0.99


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str = "independence"
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in CORRELATION_KINDS:
            raise ValueError(f"unknown correlation structure {self.kind!r}")
        if self.kind == "independence" and self.rho != 0.0:
            raise ValueError("independence carries no correlation parameter")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")

    def matrix(self, size: int, rho: Optional[float] = None) -> np.ndarray:
        rho = self.rho if rho is None else rho
        return correlation_matrix(self.kind, size, rho)


def correlation_matrix(kind: str, size: int, rho: float) -> np.ndarray:
    if kind == "independence":
        return np.eye(size)
    if kind == "ar1":
        lag = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
        return rho ** lag
    if kind == "cs":
        R = np.full((size, size), rho, dtype=float)
        np.fill_diagonal(R, 1.0)
        return R
    raise ValueError(f"unknown correlation structure {kind!r}")


@dataclass(frozen=True)
class Quantile:
    tau: float = 0.5
    family = "quantile"
    # psi increases in theta; S holds the (positive) density-weighted slope
    jacobian_sign = 1.0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    def fingerprint(self) -> dict:
        return {"family": "quantile", "tau": self.tau}


@dataclass(frozen=True)
class Gee:
    link: str = "identity"
    corr: WorkingCorrelation = WorkingCorrelation()
    family = "gee"
    jacobian_sign = -1.0

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unsupported link {self.link!r}")

    def fingerprint(self) -> dict:
        return {"family": "gee", "link": self.link, "corr": self.corr.kind}


@dataclass(frozen=True)
class Cox:
    family = "cox"
    jacobian_sign = -1.0

    def fingerprint(self) -> dict:
        return {"family": "cox"}


ModelSpec = Union[Quantile, Gee, Cox]


def model_from_fingerprint(fp: dict) -> ModelSpec:
    family = fp.get("family")
    if family == "quantile":
        return Quantile(float(fp["tau"]))
    if family == "gee":
        return Gee(fp["link"], WorkingCorrelation(fp["corr"]))
    if family == "cox":
        return Cox()
    raise ValueError(f"unknown model family {family!r}")


@dataclass(frozen=True)
class GeeAux:
    """Nuisance estimates held fixed while solving for theta."""

    rho: float = 0.0
    sigma2: float = 1.0


@dataclass(frozen=True, eq=False)
class CoxRiskSets:
    """Descending-time order with, for each sorted position, the last index of
    its tie group (Breslow: tied subjects share one risk set)."""

    order: np.ndarray
    tie_end: np.ndarray


def check_roles(model: ModelSpec, data: Dataset) -> None:
    if not np.all(np.isfinite(data.X)):
        raise SchemaError("design matrix contains non-finite values")
    if isinstance(model, Cox):
        if data.time is None or data.status is None:
            raise SchemaError("Cox model needs time and status columns")
        if np.any(data.time < 0) or not np.all(np.isfinite(data.time)):
            raise SchemaError("survival times must be finite and >= 0")
        if not np.all(np.isin(data.status, (0, 1))):
            raise SchemaError("status must be 0 (censored) or 1 (event)")
        return
    if data.y is None:
        raise SchemaError("model needs a response column")
    if not np.all(np.isfinite(data.y)):
        raise SchemaError("response contains non-finite values")
    if isinstance(model, Gee) and data.cluster is None:
        raise SchemaError("GEE model needs a cluster_id column")


def _check_theta(data: Dataset, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != data.p:
        raise ValueError(f"theta has length {theta.shape[0]}, design has {data.p} columns")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


# --------------------------------------------------------------------------
# quantile regression


def _quantile_summands(model: Quantile, data: Dataset, theta) -> np.ndarray:
    resid = data.y - data.X @ theta
    return data.X * ((resid <= 0).astype(float) - model.tau)[:, None]


def powell_bandwidth(resid: np.ndarray) -> float:
    scale = max(float(np.std(resid, ddof=1)) if resid.size > 1 else 0.0, 1e-6)
    return 1.06 * scale * resid.size ** (-0.2)


def _quantile_sensitivity(data: Dataset, theta) -> np.ndarray:
    # Powell kernel estimate of E[f(0|x) x x'] with a Gaussian kernel
    resid = data.y - data.X @ theta
    h = powell_bandwidth(resid)
    w = np.exp(-0.5 * (resid / h) ** 2) / np.sqrt(2 * np.pi)
    return (data.X * w[:, None]).T @ data.X / (resid.size * h)


# --------------------------------------------------------------------------
# GEE


def _gee_block_terms(model: Gee, data: Dataset, block, theta, aux: GeeAux):
    """Per-cluster pieces for one size block.

    Returns (W, u, Rinv, mu, a) with W = A^{1/2} X of shape (g, l, p) and u the
    Pearson residuals (g, l), so that psi_i = W_i' R^{-1} u_i / sigma2.
    """
    X = data.X[block.rows]
    y = data.y[block.rows]
    eta = X @ theta
    if model.link == "identity":
        mu = eta
        a = np.ones_like(eta)
    else:
        mu = expit(eta)
        a = np.clip(mu * (1.0 - mu), 1e-12, None)
    sqrt_a = np.sqrt(a)
    R = model.corr.matrix(block.size, aux.rho)
    try:
        chol = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise DegenerateDataError(
            f"working correlation ({model.corr.kind}, rho={aux.rho:.4g}) is singular "
            f"for clusters of size {block.size}"
        ) from None
    Rinv = np.linalg.inv(chol).T @ np.linalg.inv(chol)
    u = (y - mu) / sqrt_a
    W = X * sqrt_a[..., None]
    return W, u, Rinv, mu, a


def _gee_summands(model: Gee, data: Dataset, theta, aux: GeeAux) -> np.ndarray:
    out = np.empty((data.n_units, data.p))
    for block in data.cluster_blocks:
        W, u, Rinv, _, _ = _gee_block_terms(model, data, block, theta, aux)
        out[block.clusters] = np.einsum("glp,lm,gm->gp", W, Rinv, u) / aux.sigma2
    return out


def _gee_sensitivity(model: Gee, data: Dataset, theta, aux: GeeAux) -> np.ndarray:
    S = np.zeros((data.p, data.p))
    for block in data.cluster_blocks:
        W, _, Rinv, _, _ = _gee_block_terms(model, data, block, theta, aux)
        S += np.einsum("glp,lm,gmq->pq", W, Rinv, W)
    S /= data.n_units * aux.sigma2
    return 0.5 * (S + S.T)


def pearson_residuals(model: Gee, data: Dataset, theta) -> list[np.ndarray]:
    """Pearson residuals per size block, each of shape (g, l)."""
    theta = _check_theta(data, theta)
    out = []
    for block in data.cluster_blocks:
        _, u, _, _, _ = _gee_block_terms(model, data, block, theta, GeeAux())
        out.append(u)
    return out


def estimate_correlation(residuals: Sequence[np.ndarray], structure: Union[str, WorkingCorrelation],
                         p: int) -> tuple[float, float]:
    """Moment estimates (rho_hat, sigma2_hat) from Pearson residuals.

    ``residuals`` is either a list of per-cluster 1-d arrays or a list of
    (g, l) arrays of equal-size clusters.
    """
    kind = structure.kind if isinstance(structure, WorkingCorrelation) else structure
    blocks = [np.atleast_2d(np.asarray(r, dtype=float)) for r in residuals]
    n_obs = sum(b.size for b in blocks)
    if n_obs - p <= 0:
        raise DegenerateDataError("not enough observations to estimate the dispersion")
    sigma2 = sum(float(np.sum(b * b)) for b in blocks) / (n_obs - p)
    if kind == "independence":
        return 0.0, sigma2
    n_multi = sum(b.shape[0] for b in blocks if b.shape[1] >= 2)
    if n_multi < 2:
        raise DegenerateDataError("need at least two clusters with two or more observations")
    if kind == "ar1":
        cross = sum(float(np.sum(b[:, :-1] * b[:, 1:])) for b in blocks)
        pairs = sum(b.shape[0] * (b.shape[1] - 1) for b in blocks)
    elif kind == "cs":
        # sum_{j<j'} r_j r_j' = ((sum r)^2 - sum r^2) / 2
        cross = sum(float(np.sum((b.sum(axis=1) ** 2 - (b * b).sum(axis=1)) / 2)) for b in blocks)
        pairs = sum(b.shape[0] * b.shape[1] * (b.shape[1] - 1) // 2 for b in blocks)
    else:
        raise ValueError(f"unknown correlation structure {kind!r}")
    if pairs - p <= 0:
        raise DegenerateDataError("insufficient within-cluster pairs to estimate rho")
    if sigma2 == 0.0:
        return 0.0, sigma2
    rho = cross / ((pairs - p) * sigma2)
    return float(np.clip(rho, -RHO_CLAMP, RHO_CLAMP)), sigma2


# --------------------------------------------------------------------------
# Cox proportional hazards


def cox_risk_sets(data: Dataset) -> CoxRiskSets:
    order = np.argsort(-data.time, kind="stable")
    neg = -data.time[order]
    tie_end = np.searchsorted(neg, neg, side="right") - 1
    return CoxRiskSets(order, tie_end)


def _cox_risk_sums(data: Dataset, theta, risk: CoxRiskSets, second: bool):
    X = data.X[risk.order]
    eta = X @ theta
    w = np.exp(eta - eta.max())
    s0 = np.cumsum(w)[risk.tie_end]
    s1 = np.cumsum(w[:, None] * X, axis=0)[risk.tie_end]
    s2 = None
    if second:
        s2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)[risk.tie_end]
    return X, s0, s1, s2


def _cox_summands(data: Dataset, theta, risk: CoxRiskSets) -> np.ndarray:
    X, s0, s1, _ = _cox_risk_sums(data, theta, risk, second=False)
    delta = data.status[risk.order].astype(bool)
    if np.any(~(s0[delta] > 0)) or not np.all(np.isfinite(s0[delta])):
        raise DegenerateDataError("empty or overflowing risk set at an event time")
    sorted_out = np.zeros_like(X)
    sorted_out[delta] = X[delta] - s1[delta] / s0[delta, None]
    out = np.empty_like(sorted_out)
    out[risk.order] = sorted_out
    return out


def _cox_sensitivity(data: Dataset, theta, risk: CoxRiskSets) -> np.ndarray:
    _, s0, s1, s2 = _cox_risk_sums(data, theta, risk, second=True)
    delta = data.status[risk.order].astype(bool)
    if not np.any(delta):
        return np.zeros((data.p, data.p))
    xbar = s1[delta] / s0[delta, None]
    info = s2[delta] / s0[delta, None, None] - xbar[:, :, None] * xbar[:, None, :]
    S = info.sum(axis=0) / data.n_rows
    return 0.5 * (S + S.T)


# --------------------------------------------------------------------------
# dispatch


def default_aux(model: ModelSpec, data: Dataset):
    if isinstance(model, Gee):
        return GeeAux(model.corr.rho, 1.0)
    if isinstance(model, Cox):
        return cox_risk_sets(data)
    return None


def _aux(model, data, aux):
    if isinstance(model, Gee):
        return aux if isinstance(aux, GeeAux) else GeeAux(model.corr.rho, 1.0)
    if isinstance(model, Cox):
        return aux if isinstance(aux, CoxRiskSets) else cox_risk_sets(data)
    return None


def psi_summands(model: ModelSpec, data: Dataset, theta, aux=None) -> np.ndarray:
    """Per-unit estimating-function contributions, shape (n_units, p)."""
    theta = _check_theta(data, theta)
    aux = _aux(model, data, aux)
    if isinstance(model, Quantile):
        return _quantile_summands(model, data, theta)
    if isinstance(model, Gee):
        return _gee_summands(model, data, theta, aux)
    return _cox_summands(data, theta, aux)


def psi_bar(model: ModelSpec, data: Dataset, theta, aux=None) -> np.ndarray:
    return psi_summands(model, data, theta, aux).mean(axis=0)


def sensitivity(model: ModelSpec, data: Dataset, theta, aux=None) -> np.ndarray:
    """Observed sensitivity ``S_n(theta)``.

    GEE uses the closed form n^-1 sum x'D Sigma^-1 D x / sigma2, which is the
    exact negative Jacobian for the identity link.  Cox uses the observed
    partial-likelihood information.  Quantile regression uses Powell's kernel
    estimator since its psi is a step function.
    """
    if data.n_units == 0:
        raise DegenerateDataError("empty shard")
    theta = _check_theta(data, theta)
    aux = _aux(model, data, aux)
    if isinstance(model, Quantile):
        return _quantile_sensitivity(data, theta)
    if isinstance(model, Gee):
        return _gee_sensitivity(model, data, theta, aux)
    return _cox_sensitivity(data, theta, aux)


def variability(model: ModelSpec, data: Dataset, theta, aux=None) -> np.ndarray:
    if data.n_units == 0:
        raise DegenerateDataError("empty shard")
    U = psi_summands(model, data, theta, aux)
    return U.T @ U / U.shape[0]
