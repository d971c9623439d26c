"""Input checks shared by the estimators."""

import numpy as np


def check_positive(a, name):
    a = np.asarray(a, dtype=float)
    if np.any(~(a > 0)):
        bad = np.flatnonzero(~(a > 0))[0]
        raise ValueError("%s must be positive (row %d has %r)" % (name, bad, a.flat[bad]))
    return a


def check_n_columns(X, n, what):
    if X.ndim != 2 or X.shape[1] != n:
        raise ValueError("%s expects X with %d columns, got shape %s" % (what, n, X.shape))
    return X


def check_min_rows(n_rows, minimum, what):
    if n_rows < minimum:
        raise ValueError("%s needs at least %d usable rows, got %d" % (what, minimum, n_rows))
