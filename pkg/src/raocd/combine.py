"""Reduce step: Wald-CD, one-step Rao-CD, AEE and the full-data benchmark."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .errors import CombinationError, FingerprintError, MemoryCapExceeded
from .linalg import sym_inv, sym_solve
from .models import ModelSpec
from .solver import ShardSummary, SolverConfig, solve_shard

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

Evaluate = Callable[[int, np.ndarray], tuple]


class ExcludedShardWarning(UserWarning):
    pass


class RefinementWarning(UserWarning):
    pass


def usable(summaries: Sequence[ShardSummary], include_nonconverged: bool = False) -> list[ShardSummary]:
    """Summaries that enter a combination, sorted by shard_id.

    Failed shards are always dropped; non-converged ones unless asked for.
    Mixed model fingerprints or parameter dimensions are refused.
    """
    if not summaries:
        raise CombinationError("no shard summaries to combine")
    fps = {repr(sorted(s.model.fingerprint().items())) for s in summaries}
    if len(fps) > 1:
        raise FingerprintError(f"summaries come from different models: {sorted(fps)}")
    keep, dropped = [], []
    for s in sorted(summaries, key=lambda s: s.shard_id):
        if s.error is not None or s.theta_hat is None or (not s.converged and not include_nonconverged):
            dropped.append(s.shard_id)
        else:
            keep.append(s)
    if dropped:
        warnings.warn(f"excluding shards {dropped} (failed or not converged)", ExcludedShardWarning,
                      stacklevel=2)
    if not keep:
        reasons = "; ".join(f"shard {s.shard_id}: {s.error or 'not converged'}" for s in summaries)
        raise CombinationError(f"every shard failed or did not converge ({reasons})")
    if len({s.p for s in keep}) > 1:
        raise CombinationError("summaries disagree on the parameter dimension")
    return keep


def _weights(summaries):
    """n_k * J_k for each summary, J_k = S' V^-1 S."""
    return [s.n_k * s.godambe() for s in summaries]


def combine_wald(summaries: Sequence[ShardSummary]) -> np.ndarray:
    """Closed-form Godambe-weighted average of the shard estimates."""
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    W = _weights(summaries)
    lhs = sum(W)
    rhs = sum(w @ s.theta_hat for w, s in zip(W, summaries))
    return sym_solve(lhs, rhs)


def combine_aee(summaries: Sequence[ShardSummary]) -> np.ndarray:
    """Sensitivity-weighted average of shard estimates (linearized AEE)."""
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    lhs = sum(s.n_k * s.S_hat for s in summaries)
    rhs = sum(s.n_k * s.S_hat @ s.theta_hat for s in summaries)
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise CombinationError("aggregated sensitivity is singular") from None


def aee_covariance(summaries: Sequence[ShardSummary]) -> np.ndarray:
    """Sandwich (sum n_k S_k)^-1 (sum n_k V_k) (sum n_k S_k)^-T."""
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    A = sum(s.n_k * s.S_hat for s in summaries)
    B = sum(s.n_k * s.V_hat for s in summaries)
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise CombinationError("aggregated sensitivity is singular") from None
    C = Ainv @ B @ Ainv.T
    return 0.5 * (C + C.T)


def meta_variance(summaries: Sequence[ShardSummary]) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated Godambe information n^-1 sum n_k J_k and its inverse / n."""
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    n = sum(s.n_k for s in summaries)
    total = sum(_weights(summaries))
    J = 0.5 * (total + total.T) / n
    return J, sym_inv(total)


def confidence_intervals(theta, ase, level: float = 0.95) -> np.ndarray:
    """Normal-pivot intervals theta +- z * ase, shape (p, 2)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    theta = np.asarray(theta, dtype=float)
    z = norm.ppf(0.5 * (1 + level))
    half = z * np.asarray(ase, dtype=float)
    return np.column_stack([theta - half, theta + half])


def p_values(theta, ase) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    ase = np.asarray(ase, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(theta) / ase
    return 2 * norm.sf(z)


def _evaluate_all(summaries, evaluate: Evaluate, theta, executor: Optional[Executor]):
    ids = [s.shard_id for s in summaries]
    if executor is None:
        return [evaluate(k, theta) for k in ids]
    futures = [executor.submit(evaluate, k, theta) for k in ids]
    return [f.result() for f in futures]


def _rao_pieces(summaries, results, n):
    """Aggregated curvature and Psi_R at the point the results were taken."""
    H = np.zeros((summaries[0].p, summaries[0].p))
    g = np.zeros(summaries[0].p)
    for s, (psi, S) in zip(summaries, results):
        VinvS = sym_solve(s.V_hat, S)
        H += s.n_k * S.T @ VinvS
        g += s.n_k * VinvS.T @ psi
    return H, g / np.sqrt(n)


class Refinement(NamedTuple):
    theta: np.ndarray
    steps: int
    psi_norm: float
    diverged: bool


def refine_rao(summaries: Sequence[ShardSummary], evaluate: Evaluate, theta_wcd,
               extra_steps: int = 1, tol: float = 0.0, step_halving_max: int = 30,
               executor: Optional[Executor] = None) -> Refinement:
    """Newton steps on Psi_R(theta) = n^-1/2 sum n_k S_k(theta)' V_k^-1 psi_k(theta).

    The Jacobian of psi_k is ``model.jacobian_sign * S_k``, so the step is
    -sign * (sum n_k S_k' V_k^-1 S_k)^-1 sum n_k S_k' V_k^-1 psi_k.

    V_k stays at its map-step value.  ``evaluate(shard_id, theta)`` returns
    (psi_bar_k(theta), S_k(theta)) and is one pass over that shard.  With the
    default single step the result is the one-step estimator and only one
    pass is made; ``psi_norm`` is then the norm at ``theta_wcd``.
    """
    if extra_steps < 1:
        raise ValueError("extra_steps must be >= 1")
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    n = sum(s.n_k for s in summaries)
    sign = summaries[0].model.jacobian_sign
    theta = np.asarray(theta_wcd, dtype=float).copy()
    H, g = _rao_pieces(summaries, _evaluate_all(summaries, evaluate, theta, executor), n)
    norm_now = float(np.max(np.abs(g)))
    diverged = False
    steps = 0
    while steps < extra_steps and norm_now > tol:
        try:
            step = -sign * sym_solve(H, g * np.sqrt(n))
        except CombinationError:
            raise CombinationError("aggregated Rao-CD curvature is singular") from None
        steps += 1
        if steps == extra_steps and extra_steps == 1:
            theta = theta + step
            break
        scale = 1.0
        for _ in range(step_halving_max + 1):
            cand = theta + scale * step
            cH, cg = _rao_pieces(summaries, _evaluate_all(summaries, evaluate, cand, executor), n)
            cnorm = float(np.max(np.abs(cg)))
            if cnorm <= norm_now:
                break
            scale *= 0.5
        else:
            diverged = True
        theta, H, g, norm_now = cand, cH, cg, cnorm
        if diverged:
            warnings.warn("Rao-CD refinement stopped decreasing |Psi_R|", RefinementWarning,
                          stacklevel=2)
            break
    return Refinement(theta, steps, norm_now, diverged)


def gmm_objective(theta, summaries: Sequence[ShardSummary], evaluate: Evaluate) -> float:
    """sum_k n_k psi_k(theta)' V_k^-1 psi_k(theta)."""
    summaries = sorted(summaries, key=lambda s: s.shard_id)
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for s in summaries:
        psi = evaluate(s.shard_id, theta)[0]
        total += s.n_k * float(psi @ sym_solve(s.V_hat, psi))
    return max(total, 0.0)


@dataclass(frozen=True, eq=False)
class MetaEstimate:
    theta_wcd: np.ndarray
    theta_rcd: Optional[np.ndarray]
    J_agg: np.ndarray
    covariance: np.ndarray
    K: int
    n: int
    shards_used: list
    level: float = 0.95
    theta_aee: Optional[np.ndarray] = None
    aee_cov: Optional[np.ndarray] = None
    names: tuple = field(default=())
    model: Optional[ModelSpec] = None
    rao_steps: int = 0
    rao_psi_norm: float = float("nan")
    rao_diverged: bool = False
    excluded: list = field(default_factory=list)

    @property
    def ase(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def aee_ase(self) -> Optional[np.ndarray]:
        if self.aee_cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.aee_cov), 0.0, None))

    @property
    def theta(self) -> np.ndarray:
        """The reported point estimate: Rao-CD when refined, else Wald-CD."""
        return self.theta_rcd if self.theta_rcd is not None else self.theta_wcd

    def intervals(self, level: Optional[float] = None) -> np.ndarray:
        return confidence_intervals(self.theta, self.ase, self.level if level is None else level)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in np.ravel(a)]

        ci = self.intervals()
        out = {
            "format_version": FORMAT_VERSION,
            "model": None if self.model is None else self.model.fingerprint(),
            "names": list(self.names),
            "K": self.K,
            "n": self.n,
            "shards_used": list(self.shards_used),
            "shards_excluded": list(self.excluded),
            "level": self.level,
            "theta_wcd": arr(self.theta_wcd),
            "theta_rcd": arr(self.theta_rcd),
            "theta_aee": arr(self.theta_aee),
            "ase": arr(self.ase),
            "ci_lower": arr(ci[:, 0]),
            "ci_upper": arr(ci[:, 1]),
            "p_values": arr(p_values(self.theta, self.ase)),
            "J_agg": arr(self.J_agg),
            "covariance": arr(self.covariance),
            "rao_steps": self.rao_steps,
            "rao_psi_norm": float(self.rao_psi_norm),
            "rao_diverged": self.rao_diverged,
        }
        if self.aee_cov is not None:
            out["aee_ase"] = arr(self.aee_ase)
        return out


def meta_estimate(summaries: Sequence[ShardSummary], evaluate: Optional[Evaluate] = None,
                  level: float = 0.95, extra_steps: int = 1, with_aee: bool = True,
                  include_nonconverged: bool = False, tol: float = 0.0,
                  executor: Optional[Executor] = None) -> MetaEstimate:
    """Full reduce: Wald-CD, optional Rao-CD refinement, AEE and the meta variance.

    Without ``evaluate`` there is no second data pass and ``theta_rcd`` is None.
    """
    all_ids = sorted(s.shard_id for s in summaries)
    used = usable(summaries, include_nonconverged)
    theta_wcd = combine_wald(used)
    J, cov = meta_variance(used)
    refinement = None
    if evaluate is not None:
        refinement = refine_rao(used, evaluate, theta_wcd, extra_steps=extra_steps, tol=tol,
                                executor=executor)
    theta_aee = aee_cov = None
    if with_aee:
        theta_aee = combine_aee(used)
        aee_cov = aee_covariance(used)
    ids = [s.shard_id for s in used]
    return MetaEstimate(
        theta_wcd=theta_wcd,
        theta_rcd=None if refinement is None else refinement.theta,
        J_agg=J, covariance=cov, K=len(used), n=sum(s.n_k for s in used),
        shards_used=ids, level=level, theta_aee=theta_aee, aee_cov=aee_cov,
        names=used[0].names, model=used[0].model,
        rao_steps=0 if refinement is None else refinement.steps,
        rao_psi_norm=float("nan") if refinement is None else refinement.psi_norm,
        rao_diverged=False if refinement is None else refinement.diverged,
        excluded=[k for k in all_ids if k not in ids],
    )


class FullFit(NamedTuple):
    theta: np.ndarray
    J: np.ndarray
    covariance: np.ndarray
    summary: ShardSummary

    @property
    def ase(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def solve_full(model: ModelSpec, data: Dataset, cfg: SolverConfig = SolverConfig(),
               max_rows: Optional[int] = None) -> FullFit:
    """Benchmark: solve on the whole dataset, sandwich covariance (S'V^-1 S)^-1 / n."""
    if max_rows is not None and data.n_rows > max_rows:
        raise MemoryCapExceeded(f"full data has {data.n_rows} rows, cap is {max_rows}")
    summary = solve_shard(model, data, cfg, shard_id=-1)
    J = summary.godambe()
    J = 0.5 * (J + J.T)
    return FullFit(summary.theta_hat, J, sym_inv(summary.n_k * J), summary)
