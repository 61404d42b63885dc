"""Divide-and-conquer estimation with Rao-type and Wald-type confidence distributions.

Shards of a large dataset are solved independently (the map step) and their
summaries (n_k, theta_k, S_k, V_k) are combined into a meta estimator with a
Godambe-information variance (the reduce step).
"""

from .combine import (MetaEstimate, combine_aee, combine_wald, confidence_intervals,
                      gmm_objective, meta_estimate, meta_variance, refine_rao, solve_full)
from .data import Dataset
from .errors import (CombinationError, DataError, FingerprintError, FormatError,
                     NonIdentifiableError, NumericalError, PartitionError, RankDeficientError,
                     RaoCDError, SchemaError)
from .models import Cox, Gee, Quantile, WorkingCorrelation, psi_bar, sensitivity, variability
from .runtime import (ByKeyPlan, RandomPlan, Schema, ingest_csv, parse_partition, partition,
                      read_summaries, run_map, write_summaries)
from .solver import ShardSummary, SolverConfig, evaluate_at, solve_shard

__version__ = "0.1.0"
