"""Gravity law, trace-scaling and stacked hybrid flow models.

The estimators follow the scikit-learn API so they compose with
``sklearn.model_selection``. Their feature matrices are per node pair::

    GravityModel      X = [P_origin, P_destination, distance_km]
    TraceScaleModel   X = [trace_flow]
    HybridFlowModel   X = [P_origin, P_destination, distance_km, trace_flow]

The functions at the bottom of the module (``fit_gravity``, ``fit_hybrid``,
...) do the same work on :class:`~flowstack.flows.FlowMatrix` inputs.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from ._validation import check_min_rows, check_n_columns, check_positive
from .errors import FlowstackError, RankDeficientError
from .flows import FlowMatrix

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12


class DeterrenceKind(str, enum.Enum):
    """Distance decay: ``d**-beta`` (power) or ``exp(-beta*d)`` (exponential)."""

    POWER = "power"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class GravityParams:
    K: float
    alpha: float
    gamma: float
    beta: float
    kind: DeterrenceKind = DeterrenceKind.POWER

    def __post_init__(self):
        object.__setattr__(self, "kind", DeterrenceKind(self.kind))
        for name in ("K", "alpha", "gamma", "beta"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError("%s must be finite" % name)
            object.__setattr__(self, name, v)
        if not self.K > 0:
            raise ValueError("K must be positive")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["K"], d["alpha"], d["gamma"], d["beta"], d["kind"])


@dataclass(frozen=True)
class HybridParams:
    A: float
    B: float
    gravity: GravityParams | None = None

    def __post_init__(self):
        for name in ("A", "B"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError("%s must be finite" % name)
            object.__setattr__(self, name, v)

    def to_dict(self):
        return {"A": self.A, "B": self.B,
                "gravity": None if self.gravity is None else self.gravity.to_dict()}

    @classmethod
    def from_dict(cls, d):
        g = d.get("gravity")
        return cls(d["A"], d["B"], None if g is None else GravityParams.from_dict(g))


def dump_params(params, stream):
    json.dump(params.to_dict(), stream, indent=2, sort_keys=True)
    stream.write("\n")


def load_params(stream):
    d = json.load(stream)
    return HybridParams.from_dict(d) if "A" in d else GravityParams.from_dict(d)


def solve_normal_equations(X, z, names, max_condition=MAX_CONDITION):
    """Least squares ``argmin |X b - z|`` through the normal equations.

    Columns are scaled to unit norm before forming the Gram matrix; if its
    condition number exceeds ``max_condition`` the columns carrying the
    near-null direction are reported in a :class:`RankDeficientError`.
    """
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        zero = [names[k] for k in np.flatnonzero(norms == 0)]
        raise RankDeficientError(zero, math.inf)
    Xs = X / norms
    gram = Xs.T @ Xs
    eigval, eigvec = np.linalg.eigh(gram)
    cond = eigval[-1] / eigval[0] if eigval[0] > 0 else math.inf
    if not cond <= max_condition:
        v = np.abs(eigvec[:, 0])
        involved = [names[k] for k in np.flatnonzero(v > 0.1 * v.max())]
        raise RankDeficientError(involved, cond)
    b = np.linalg.solve(gram, Xs.T @ z)
    return b / norms


def _deterrence(d, beta, kind):
    if kind == DeterrenceKind.POWER:
        return d ** (-beta)
    return np.exp(-beta * d)


class GravityModel(RegressorMixin, BaseEstimator):
    """Gravity law ``K * P_i**alpha * P_j**gamma * f(d)`` fitted in log space.

    ``fit`` runs ordinary least squares on
    ``log y = log K + alpha log P_i + gamma log P_j - beta * h(d)``, with
    ``h = log`` for the power law and the identity for exponential decay.
    Rows with ``y <= 0`` carry no log-space information and are ignored;
    rows with ``d == 0`` are ignored with a warning.

    Parameters
    ----------
    kind : {"power", "exponential"}
    max_condition : float
        Largest acceptable condition number of the scaled normal equations.

    Attributes
    ----------
    K_, alpha_, gamma_, beta_ : float
    params_ : GravityParams
    n_excluded_ : int
        Rows dropped because of zero distance.
    """

    def __init__(self, kind="power", max_condition=MAX_CONDITION):
        self.kind = kind
        self.max_condition = max_condition

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=float, y_numeric=True)
        check_n_columns(X, 3, "GravityModel")
        kind = DeterrenceKind(self.kind)
        keep = y > 0
        zero_d = keep & (X[:, 2] == 0)
        self.n_excluded_ = int(zero_d.sum())
        if self.n_excluded_:
            log.warning("excluding %d pairs with zero distance from the gravity fit", self.n_excluded_)
        keep &= ~zero_d
        X, y = X[keep], y[keep]
        check_min_rows(len(y), 4, "gravity fit")
        check_positive(X[:, :2], "populations")
        check_positive(X[:, 2], "distances")
        dist_col = np.log(X[:, 2]) if kind == DeterrenceKind.POWER else X[:, 2]
        design = np.column_stack([np.ones(len(y)), np.log(X[:, 0]), np.log(X[:, 1]), -dist_col])
        names = ["intercept", "log_pop_origin", "log_pop_destination",
                 "log_distance" if kind == DeterrenceKind.POWER else "distance"]
        coef = solve_normal_equations(design, np.log(y), names, self.max_condition)
        self.params_ = GravityParams(math.exp(coef[0]), coef[1], coef[2], coef[3], kind)
        self.K_, self.alpha_, self.gamma_, self.beta_ = coef_tuple(self.params_)
        return self

    @classmethod
    def from_params(cls, params: GravityParams):
        """A fitted model with fixed parameters."""
        model = cls(kind=params.kind.value)
        model.params_ = params
        model.K_, model.alpha_, model.gamma_, model.beta_ = coef_tuple(params)
        model.n_excluded_ = 0
        model.n_features_in_ = 3
        return model

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=float, reset=False)
        check_positive(X[:, :2], "populations")
        check_positive(X[:, 2], "distances")
        p = self.params_
        return p.K * X[:, 0] ** p.alpha * X[:, 1] ** p.gamma * _deterrence(X[:, 2], p.beta, p.kind)


def coef_tuple(p):
    return p.K, p.alpha, p.gamma, p.beta


def stack_weights(y, g, f, max_condition=MAX_CONDITION):
    """(A, B) minimising ``sum (y - A g - B f)**2`` over entries with y > 0."""
    y, g, f = (np.asarray(a, dtype=float) for a in (y, g, f))
    keep = y > 0
    if keep.sum() < 2:
        raise FlowstackError("hybrid fit needs at least 2 positive truth entries, got %d" % keep.sum())
    design = np.column_stack([g[keep], f[keep]])
    A, B = solve_normal_equations(design, y[keep], ["gravity", "trace"], max_condition)
    return float(A), float(B)


class HybridFlowModel(RegressorMixin, BaseEstimator):
    """Stacked combination ``A * gravity + B * trace_flow``.

    The gravity model is fitted alone first; its in-sample predictions and
    the trace flows are then combined by a least-squares fit without
    intercept. Predictions are clamped at zero.

    Attributes
    ----------
    gravity_ : GravityModel
    A_, B_ : float
    params_ : HybridParams
    """

    def __init__(self, kind="power", max_condition=MAX_CONDITION):
        self.kind = kind
        self.max_condition = max_condition

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=float, y_numeric=True)
        check_n_columns(X, 4, "HybridFlowModel")
        self.gravity_ = GravityModel(self.kind, self.max_condition).fit(X[:, :3], y)
        keep = (y > 0) & (X[:, 2] > 0)
        g = self.gravity_.predict(X[keep, :3])
        self.A_, self.B_ = stack_weights(y[keep], g, X[keep, 3], self.max_condition)
        self.params_ = HybridParams(self.A_, self.B_, self.gravity_.params_)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=float, reset=False)
        g = self.gravity_.predict(X[:, :3])
        return np.maximum(0.0, self.A_ * g + self.B_ * X[:, 3])


class TraceScaleModel(RegressorMixin, BaseEstimator):
    """Trace flows rescaled by one least-squares constant ``c``."""

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=float, y_numeric=True)
        check_n_columns(X, 1, "TraceScaleModel")
        keep = y > 0
        f = X[keep, 0]
        denom = float(f @ f)
        if denom == 0:
            raise RankDeficientError(["trace"], math.inf)
        self.c_ = float(f @ y[keep]) / denom
        return self

    def predict(self, X):
        check_is_fitted(self, "c_")
        X = validate_data(self, X, dtype=float, reset=False)
        return np.maximum(0.0, self.c_ * X[:, 0])


# --- FlowMatrix-level API ---------------------------------------------------

def pair_features(pairs, pop, d, f: FlowMatrix | None = None) -> np.ndarray:
    """Feature rows ``[P_i, P_j, d_ij(, f_ij)]`` for ``pairs``.

    Raises FlowstackError naming the first pair lacking a population or a
    distance.
    """
    pairs = list(pairs)
    try:
        pi = np.array([pop[i] for i, _ in pairs], dtype=float)
        pj = np.array([pop[j] for _, j in pairs], dtype=float)
    except KeyError:
        bad = next(p for p in pairs if p[0] not in pop or p[1] not in pop)
        raise FlowstackError("no population for a node of pair %r" % (bad,)) from None
    try:
        dist = d.many(pairs)
    except KeyError as exc:
        raise FlowstackError(str(exc.args[0])) from None
    cols = [pi, pj, dist]
    if f is not None:
        cols.append(f.values_for(pairs))
    return np.column_stack(cols) if pairs else np.zeros((0, len(cols)))


def predict_gravity(params: GravityParams, pop, d, pairs) -> FlowMatrix:
    pairs = list(pairs)
    X = pair_features(pairs, pop, d)
    for p, km in zip(pairs, X[:, 2]):
        if not km > 0:
            raise FlowstackError("zero distance for pair %r" % (p,))
    if not pairs:
        return FlowMatrix()
    values = GravityModel.from_params(params).predict(X)
    return FlowMatrix(dict(zip(pairs, values)))


def fit_gravity(truth: FlowMatrix, pop, d, kind="power") -> GravityParams:
    """Log-space OLS gravity fit over the positive entries of ``truth``."""
    pairs = truth.pairs()
    if len(pairs) < 4:
        raise FlowstackError("gravity fit needs at least 4 flows, got %d" % len(pairs))
    X = pair_features(pairs, pop, d)
    return GravityModel(kind).fit(X, truth.values_for(pairs)).params_


def fit_hybrid(truth: FlowMatrix, g: FlowMatrix, f: FlowMatrix, gravity: GravityParams | None = None) -> HybridParams:
    """Stacking weights (A, B) over the support of ``truth``.

    ``g`` must cover every truth entry; ``f`` reads 0 where absent.
    """
    pairs = truth.pairs()
    missing = [p for p in pairs if p not in g]
    if missing:
        raise FlowstackError("gravity prediction missing for pair %r" % (missing[0],))
    A, B = stack_weights(truth.values_for(pairs), g.values_for(pairs), f.values_for(pairs))
    return HybridParams(A, B, gravity)


def predict_hybrid(params: HybridParams, g: FlowMatrix, f: FlowMatrix, pairs) -> FlowMatrix:
    """``max(0, A g + B f)`` on ``pairs``; zero results are left out."""
    pairs = list(pairs)
    missing = [p for p in pairs if p not in g]
    if missing:
        raise FlowstackError("gravity prediction missing for pair %r" % (missing[0],))
    h = np.maximum(0.0, params.A * g.values_for(pairs) + params.B * f.values_for(pairs))
    return FlowMatrix(dict(zip(pairs, h)))


def loss(truth: FlowMatrix, pred: FlowMatrix) -> float:
    """Frobenius norm of ``truth - pred`` restricted to the truth support."""
    pairs = truth.pairs()
    r = truth.values_for(pairs) - pred.values_for(pairs)
    return float(math.sqrt(r @ r))
