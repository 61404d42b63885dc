"""Exception hierarchy.

Data problems (bad input, degenerate shards) and numerical failures are kept
apart so the command line can map them onto distinct exit codes.
"""


class RaoCDError(Exception):
    """Base class for all package errors."""


class DataError(RaoCDError):
    """Input data is malformed or cannot support the requested model."""


class SchemaError(DataError):
    pass


class DegenerateDataError(DataError):
    """Shard content makes the estimating function ill-defined."""


class NonIdentifiableError(DegenerateDataError):
    pass


class RankDeficientError(DegenerateDataError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            "design matrix is rank deficient; dependent columns: "
            + ", ".join(map(str, self.columns))
        )


class PartitionError(DataError):
    pass


class FormatError(DataError):
    """Summary file cannot be parsed or has an unsupported version."""


class FingerprintError(DataError):
    """Summaries from different model specifications were mixed."""


class NumericalError(RaoCDError):
    """A linear system or iteration failed beyond the jitter policy."""


class CombinationError(NumericalError):
    pass


class MemoryCapExceeded(NumericalError):
    pass
