"""Map step: solve the shard estimating equation and summarize the shard."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from . import models
from .data import Dataset
from .errors import NonIdentifiableError, NumericalError, RankDeficientError
from .models import Cox, Gee, GeeAux, ModelSpec, Quantile


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-8
    ridge: float = 1e-8
    step_halving_max: int = 30
    quantile_smoothing_eps: float = 1e-4
    rho_init: Optional[float] = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.rho_init is not None and not abs(self.rho_init) < 1:
            raise ValueError("rho_init must lie in (-1, 1)")


@dataclass(frozen=True, eq=False)
class ShardSummary:
    """Everything the reduce step needs from one shard.

    A shard whose solve raised carries ``error`` and no estimates; it is never
    used in a combination.
    """

    shard_id: int
    n_k: int
    theta_hat: Optional[np.ndarray]
    S_hat: Optional[np.ndarray]
    V_hat: Optional[np.ndarray]
    model: ModelSpec
    rho_hat: Optional[float] = None
    sigma2_hat: Optional[float] = None
    converged: bool = False
    iterations: int = 0
    final_psi_norm: float = float("nan")
    error: Optional[str] = None
    names: tuple = field(default=())

    @property
    def p(self) -> int:
        return 0 if self.theta_hat is None else self.theta_hat.shape[0]

    @property
    def aux(self):
        if isinstance(self.model, Gee):
            return GeeAux(self.rho_hat or 0.0, self.sigma2_hat or 1.0)
        return None

    def godambe(self) -> np.ndarray:
        from .linalg import sym_solve

        return self.S_hat.T @ sym_solve(self.V_hat, self.S_hat)


def _ridge_solve(S: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    p = S.shape[0]
    jitter = ridge * abs(np.trace(S)) / p
    A = S + jitter * np.eye(p)
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, rhs, rcond=None)[0]


def check_rank(data: Dataset) -> None:
    """Raise naming the columns that are linear combinations of earlier ones."""
    X = data.X
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    kept, offenders = [], []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) == len(trial):
            kept = trial
        else:
            offenders.append(data.names[j])
    raise RankDeficientError(offenders)


@dataclass
class _NewtonResult:
    theta: np.ndarray
    iterations: int
    converged: bool
    psi_norm: float


def _newton(fun, theta0, cfg: SolverConfig) -> _NewtonResult:
    """Newton iteration on psi_bar(theta) = 0 with step halving.

    ``fun`` returns (psi_bar, S) with S = -d psi_bar / d theta.  Convergence
    needs a small psi, a small Newton step and information that has not
    collapsed relative to the start; the last two keep the drifting iterates
    of a monotone likelihood (psi -> 0 only as theta -> infinity) from
    passing as roots.
    """
    theta = np.array(theta0, dtype=float)
    psi, S = fun(theta)
    norm = float(np.max(np.abs(psi)))
    info_floor = 1e-8 * abs(np.trace(S)) / S.shape[0]
    for it in range(cfg.max_iter + 1):
        if not np.isfinite(norm):
            return _NewtonResult(theta, it, False, norm)
        step = _ridge_solve(S, psi, cfg.ridge)
        step_norm = float(np.max(np.abs(step)))
        if (norm <= cfg.tol
                and step_norm <= np.sqrt(cfg.tol) * max(1.0, float(np.max(np.abs(theta))))
                and np.linalg.eigvalsh(0.5 * (S + S.T))[0] > info_floor):
            return _NewtonResult(theta, it, True, norm)
        if it == cfg.max_iter:
            break
        scale = 1.0
        for _ in range(cfg.step_halving_max + 1):
            cand = theta + scale * step
            cpsi, cS = fun(cand)
            cnorm = float(np.max(np.abs(cpsi)))
            if cnorm <= norm:
                break
            scale *= 0.5
        theta, psi, S, norm = cand, cpsi, cS, cnorm
    return _NewtonResult(theta, cfg.max_iter, False, norm)


# --------------------------------------------------------------------------
# quantile


def _check_loss(resid: np.ndarray, tau: float) -> float:
    return float(np.mean(resid * (tau - (resid < 0))))


def _quantile_basic_solution(X, y, resid) -> Optional[np.ndarray]:
    """Interpolate the p observations closest to the fit (greedy, rank-checked)."""
    p = X.shape[1]
    chosen = []
    for i in np.argsort(np.abs(resid), kind="stable"):
        trial = chosen + [int(i)]
        if np.linalg.matrix_rank(X[trial]) == len(trial):
            chosen = trial
            if len(chosen) == p:
                return np.linalg.solve(X[chosen], y[chosen])
    return None


def _solve_quantile(model: Quantile, data: Dataset, cfg: SolverConfig, theta0):
    X, y, tau = data.X, data.y, model.tau
    theta = np.linalg.lstsq(X, y, rcond=None)[0] if theta0 is None else np.array(theta0, float)
    scale = float(np.std(y - X @ theta))
    scale = scale if scale > 0 else 1.0
    eps_target = cfg.quantile_smoothing_eps * scale
    iterations = 0

    def objective(th, eps):
        r = y - X @ th
        return float(np.mean(tau * r + eps * np.logaddexp(0.0, -r / eps)))

    # continuation in the smoothing width keeps Newton inside its basin
    eps = scale
    while True:
        eps = max(eps, eps_target)
        for _ in range(cfg.max_iter):
            r = y - X @ theta
            s = expit(-r / eps)
            grad = X.T @ (s - tau) / len(y)
            if np.max(np.abs(grad)) <= cfg.tol:
                break
            H = (X * (s * (1 - s) / eps)[:, None]).T @ X / len(y)
            step = _ridge_solve(H, grad, max(cfg.ridge, 1e-12))
            f0, t = objective(theta, eps), 1.0
            for _ in range(cfg.step_halving_max + 1):
                if objective(theta - t * step, eps) <= f0:
                    break
                t *= 0.5
            else:
                # curvature has collapsed (no residual within eps): stop this stage
                break
            theta = theta - t * step
            iterations += 1
            if t * np.max(np.abs(step)) <= 1e-14 * max(1.0, np.max(np.abs(theta))):
                break
        if eps <= eps_target:
            break
        eps /= 10.0

    bound = data.p * float(np.max(np.abs(X))) / len(y)
    candidates = [theta]
    basic = _quantile_basic_solution(X, y, y - X @ theta)
    if basic is not None:
        candidates.append(basic)
    best = None
    for cand in candidates:
        norm = float(np.max(np.abs(models.psi_bar(model, data, cand))))
        loss = _check_loss(y - X @ cand, tau)
        key = (norm > bound * (1 + 1e-12), loss, norm)
        if best is None or key < best[0]:
            best = (key, cand, norm)
    _, theta, norm = best
    return theta, None, iterations, norm <= bound * (1 + 1e-12), norm


# --------------------------------------------------------------------------
# GEE


def _gee_independence_start(model: Gee, data: Dataset, cfg: SolverConfig):
    if model.link == "identity":
        return np.linalg.lstsq(data.X, data.y, rcond=None)[0]
    indep = Gee(model.link, models.WorkingCorrelation())
    aux = GeeAux(0.0, 1.0)
    res = _newton(lambda th: (models.psi_bar(indep, data, th, aux),
                              models.sensitivity(indep, data, th, aux)),
                  np.zeros(data.p), cfg)
    return res.theta


def _solve_gee(model: Gee, data: Dataset, cfg: SolverConfig, theta0):
    theta = _gee_independence_start(model, data, cfg) if theta0 is None else np.array(theta0, float)
    aux = None
    res = None
    for outer in range(1, cfg.max_iter + 1):
        rho, sigma2 = models.estimate_correlation(
            models.pearson_residuals(model, data, theta), model.corr, data.p)
        if outer == 1 and cfg.rho_init is not None and model.corr.kind != "independence":
            rho = cfg.rho_init
        new_aux = GeeAux(rho, sigma2)
        if res is not None and res.converged and abs(rho - aux.rho) <= cfg.tol \
                and abs(sigma2 - aux.sigma2) <= cfg.tol * max(1.0, aux.sigma2):
            return theta, aux, outer, True, res.psi_norm
        aux = new_aux
        res = _newton(lambda th: (models.psi_bar(model, data, th, aux),
                                  models.sensitivity(model, data, th, aux)), theta, cfg)
        theta = res.theta
        if not np.all(np.isfinite(theta)):
            break
    return theta, aux, cfg.max_iter, False, res.psi_norm


# --------------------------------------------------------------------------
# Cox


def _solve_cox(model: Cox, data: Dataset, cfg: SolverConfig, theta0):
    if not np.any(data.status == 1):
        raise NonIdentifiableError("Cox shard has no observed events")
    risk = models.cox_risk_sets(data)
    theta = np.zeros(data.p) if theta0 is None else np.array(theta0, float)
    res = _newton(lambda th: (models.psi_bar(model, data, th, risk),
                              models.sensitivity(model, data, th, risk)), theta, cfg)
    return res.theta, risk, res.iterations, res.converged, res.psi_norm


def solve_shard(model: ModelSpec, data: Dataset, cfg: SolverConfig = SolverConfig(),
                shard_id: int = 0, theta0=None) -> ShardSummary:
    """Solve the shard estimating equation and evaluate S and V at the root."""
    models.check_roles(model, data)
    if data.n_units == 0:
        raise NonIdentifiableError(f"shard {shard_id} is empty")
    check_rank(data)
    if isinstance(model, Quantile):
        theta, aux, iters, converged, norm = _solve_quantile(model, data, cfg, theta0)
    elif isinstance(model, Gee):
        theta, aux, iters, converged, norm = _solve_gee(model, data, cfg, theta0)
    elif isinstance(model, Cox):
        theta, aux, iters, converged, norm = _solve_cox(model, data, cfg, theta0)
    else:
        raise TypeError(f"unknown model {model!r}")
    if not np.all(np.isfinite(theta)):
        raise NumericalError(f"shard {shard_id}: solver produced non-finite estimates")
    S = models.sensitivity(model, data, theta, aux)
    V = models.variability(model, data, theta, aux)
    gee = isinstance(aux, GeeAux)
    return ShardSummary(
        shard_id=int(shard_id), n_k=int(data.n_units), theta_hat=theta, S_hat=S, V_hat=V,
        model=model, rho_hat=aux.rho if gee else None, sigma2_hat=aux.sigma2 if gee else None,
        converged=bool(converged), iterations=int(iters), final_psi_norm=float(norm),
        names=data.names,
    )


def evaluate_at(model: ModelSpec, data: Dataset, theta, summary: Optional[ShardSummary] = None):
    """(psi_bar, S) at an external theta, reusing the shard's nuisance estimates."""
    aux = summary.aux if summary is not None else None
    if isinstance(model, Cox):
        aux = models.cox_risk_sets(data)
    return models.psi_bar(model, data, theta, aux), models.sensitivity(model, data, theta, aux)
