"""Exception types raised across the package."""


class FlowstackError(Exception):
    """Base class for computation and validation failures."""


class ParseError(FlowstackError):
    """Fatal input error, e.g. a missing or wrong CSV header."""


class TessellationError(FlowstackError):
    """The set of basins or regions cannot be used for assignment."""


class RankDeficientError(FlowstackError):
    """Least-squares design matrix is (numerically) rank deficient.

    Attributes
    ----------
    columns : list of str
        Names of the design columns involved in the near-linear dependency.
    condition : float
        Condition number of the scaled Gram matrix.
    """

    def __init__(self, columns, condition):
        self.columns = list(columns)
        self.condition = condition
        super().__init__(
            "collinear design columns %s (condition number %.3g)"
            % (", ".join(self.columns), condition)
        )


class DegenerateSeriesError(FlowstackError):
    """A series has zero variance where a correlation metric needs spread."""
