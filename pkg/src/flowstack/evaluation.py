"""Metrics and cross-validation harnesses for flow models.

Three models are scored throughout: ``gravity`` (the gravity law alone),
``trace`` (trace flows times a least-squares constant) and ``hybrid`` (the
stacked combination). All harnesses are deterministic given their seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateSeriesError, FlowstackError
from .flows import DistanceTable, FlowMatrix, union_pairs
from .models import GravityModel, HybridFlowModel, TraceScaleModel, pair_features

MODELS = ("gravity", "trace", "hybrid")


class EvalInputs(NamedTuple):
    """Everything besides the truth a harness needs to fit the models."""

    pop: object
    d: DistanceTable
    f: FlowMatrix
    kind: str = "power"


# --- metrics ----------------------------------------------------------------

def paired_series(truth: FlowMatrix, pred: FlowMatrix, pairs=None):
    """(y, h) arrays over ``pairs`` (default: the truth support)."""
    pairs = truth.pairs() if pairs is None else list(pairs)
    return truth.values_for(pairs), pred.values_for(pairs)


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises DegenerateSeriesError on zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two aligned series of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateSeriesError("series has zero variance")
    return max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


def r_squared(y, h) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot`` on raw values."""
    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    if y.shape != h.shape or y.size < 2:
        raise ValueError("r_squared needs two aligned series of length >= 2")
    dy = y - y.mean()
    ss_tot = float(dy @ dy)
    if ss_tot == 0:
        raise DegenerateSeriesError("truth has zero variance")
    res = y - h
    return 1.0 - float(res @ res) / ss_tot


def _cpc_arrays(h, y):
    denom = h.sum() + y.sum()
    if denom == 0:
        return None
    return float(2.0 * np.minimum(h, y).sum() / denom)


def cpc(h: FlowMatrix, y: FlowMatrix) -> float:
    """Common part of commuters ``2 sum min(h, y) / (sum h + sum y)``."""
    if not len(h) and not len(y):
        raise ValueError("cpc of two empty matrices is undefined")
    pairs = union_pairs(h, y)
    return _cpc_arrays(h.values_for(pairs), y.values_for(pairs))


def _maybe(metric, *args):
    try:
        return metric(*args)
    except DegenerateSeriesError:
        return None


def score(y, preds: dict) -> dict:
    """pearson / r_squared / cpc for each model's predictions against ``y``.

    Metrics that are undefined on the given series are reported as None.
    """
    y = np.asarray(y, dtype=float)
    out = {}
    for name, h in preds.items():
        h = np.asarray(h, dtype=float)
        out[name] = {
            "pearson": _maybe(pearson, y, h),
            "r_squared": _maybe(r_squared, y, h),
            "cpc": _cpc_arrays(h, y),
        }
    return out


# --- reports ----------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


@dataclass
class EvalReport:
    """Outcome of one evaluation scheme.

    ``metrics`` maps model name to its pearson / r_squared / cpc; curves are
    named lists of rows. ``predictions`` (one FlowMatrix per model) is kept
    in memory and written separately from the JSON document.
    """

    scheme: str
    seed: int | None
    metrics: dict = field(default_factory=dict)
    fold_details: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        return _plain({
            "scheme": self.scheme,
            "seed": self.seed,
            "metrics": self.metrics,
            "fold_details": self.fold_details,
            "curves": self.curves,
            "extra": self.extra,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def curve_csv(self, name, columns=None) -> str:
        rows = self.curves[name]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        width = len(rows[0]) if rows else 2
        w.writerow(columns or (["x", "y"] if width == 2 else ["x"] + ["y%d" % k for k in range(1, width)]))
        for row in _plain(rows):
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


# --- shared fitting ---------------------------------------------------------

def _fit_all(X, y, kind):
    return {
        "gravity": GravityModel(kind).fit(X[:, :3], y),
        "trace": TraceScaleModel().fit(X[:, 3:], y),
        "hybrid": HybridFlowModel(kind).fit(X, y),
    }


def _predict_all(models, X):
    return {
        "gravity": models["gravity"].predict(X[:, :3]),
        "trace": models["trace"].predict(X[:, 3:]),
        "hybrid": models["hybrid"].predict(X),
    }


def _train_losses(models, X, y):
    preds = _predict_all(models, X)
    return {name: float(math.sqrt(((y - h) ** 2).sum())) for name, h in preds.items()}


def _fit_details(models):
    return {
        "gravity": models["gravity"].params_.to_dict(),
        "trace": {"c": models["trace"].c_},
        "hybrid": {"A": models["hybrid"].A_, "B": models["hybrid"].B_},
    }


def _fit_models(X, y, kind, where):
    try:
        return _fit_all(X, y, kind)
    except (FlowstackError, ValueError) as exc:
        raise FlowstackError("%s: %s" % (where, exc)) from exc


def _design(truth, inputs):
    pairs = truth.pairs()
    X = pair_features(pairs, inputs.pop, inputs.d, inputs.f)
    return pairs, X, truth.values_for(pairs)


# --- harnesses --------------------------------------------------------------

def kfold_cv(truth: FlowMatrix, inputs: EvalInputs, k: int = 10, seed: int = 0) -> EvalReport:
    """k-fold cross-validation over the positive entries of ``truth``.

    Entries are shuffled with ``numpy.random.default_rng(seed)`` and cut into
    ``k`` contiguous, near-equal folds. Every entry is predicted exactly once
    by models fitted on the other folds; the pooled held-out predictions are
    scored per model.
    """
    inputs = EvalInputs(*inputs)
    pairs, X, y = _design(truth, inputs)
    n = len(pairs)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError("truth has %d entries, fewer than k=%d" % (n, k))
    rng = np.random.default_rng(seed)
    folds = np.array_split(rng.permutation(n), k)
    held_out = {name: np.full(n, np.nan) for name in MODELS}
    details = []
    for fold_no, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        models = _fit_models(X[train], y[train], inputs.kind, "fold %d" % fold_no)
        for name, h in _predict_all(models, X[test]).items():
            held_out[name][test] = h
        details.append({
            "fold": fold_no,
            "n_train": len(train),
            "n_test": len(test),
            "test_pairs": [list(pairs[t]) for t in sorted(test)],
            "params": _fit_details(models),
            "train_loss": _train_losses(models, X[train], y[train]),
        })
    report = EvalReport("kfold", seed, score(y, held_out), details)
    report.extra = {"k": k, "n_entries": n}
    report.predictions = {name: FlowMatrix(dict(zip(pairs, h))) for name, h in held_out.items()}
    return report


def spatial_cv(truth: FlowMatrix, node_locations, inputs: EvalInputs,
               meridian_lon: float = -102.0, seed: int | None = None) -> EvalReport:
    """Two-fold geographic validation split at a meridian.

    Nodes with ``lon < meridian_lon`` are west, the rest east. Flows whose
    endpoints lie in different halves are discarded. Models trained on one
    half's internal flows predict the other half's, in both directions; the
    headline metrics pool the two test sets.
    """
    inputs = EvalInputs(*inputs)
    side = {}
    for node in truth.node_ids:
        if node not in node_locations:
            raise FlowstackError("no location for node %r" % (node,))
        side[node] = "west" if node_locations[node].lon < meridian_lon else "east"
    halves = {"west": {}, "east": {}}
    crossed = 0
    for (i, j), w in truth.items():
        if side[i] == side[j]:
            halves[side[i]][(i, j)] = w
        else:
            crossed += 1
    for name, flows in halves.items():
        if len(flows) < 4:
            raise FlowstackError("%s half has too few flows to fit (%d)" % (name, len(flows)))
    halves = {name: FlowMatrix(flows) for name, flows in halves.items()}
    details, pooled_y, pooled_h, predictions = [], [], {m: [] for m in MODELS}, {m: {} for m in MODELS}
    for train_half, test_half in (("west", "east"), ("east", "west")):
        _, X_tr, y_tr = _design(halves[train_half], inputs)
        te_pairs, X_te, y_te = _design(halves[test_half], inputs)
        where = "train %s / test %s" % (train_half, test_half)
        models = _fit_models(X_tr, y_tr, inputs.kind, where)
        preds = _predict_all(models, X_te)
        details.append({
            "train": train_half,
            "test": test_half,
            "n_train": len(y_tr),
            "n_test": len(y_te),
            "params": _fit_details(models),
            "train_loss": _train_losses(models, X_tr, y_tr),
            "metrics": score(y_te, preds),
        })
        pooled_y.append(y_te)
        for name, h in preds.items():
            pooled_h[name].append(h)
            predictions[name].update(zip(te_pairs, h))
    report = EvalReport("spatial", seed, score(np.concatenate(pooled_y),
                                                {m: np.concatenate(v) for m, v in pooled_h.items()}),
                        details)
    report.extra = {"meridian_lon": meridian_lon, "crossed_flows_discarded": crossed}
    report.predictions = {m: FlowMatrix(p) for m, p in predictions.items()}
    return report


def learning_curve(truth: FlowMatrix, inputs: EvalInputs, fractions, repeats: int = 10,
                   seed: int = 0) -> EvalReport:
    """r^2 on held-out flows as a function of the training fraction.

    For each fraction, ``repeats`` training sets of ``round(fraction * n)``
    entries are drawn without replacement; models are scored on the
    complement. Curves hold ``[fraction, mean, q1, q3]`` per model.
    """
    inputs = EvalInputs(*inputs)
    fractions = [float(x) for x in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly ascending")
    if any(not 0 < x < 1 for x in fractions):
        raise ValueError("fractions must lie in (0, 1)")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    pairs, X, y = _design(truth, inputs)
    n = len(pairs)
    rng = np.random.default_rng(seed)
    curves = {name: [] for name in MODELS}
    details = []
    for frac in fractions:
        n_train = int(round(frac * n))
        if n_train < 4 or n - n_train < 2:
            raise FlowstackError("fraction %g gives %d training / %d test entries; need >= 4 / >= 2"
                                 % (frac, n_train, n - n_train))
        r2 = {name: [] for name in MODELS}
        for rep in range(repeats):
            train = np.sort(rng.choice(n, size=n_train, replace=False))
            test = np.setdiff1d(np.arange(n), train)
            models = _fit_models(X[train], y[train], inputs.kind, "fraction %g" % frac)
            for name, h in _predict_all(models, X[test]).items():
                v = _maybe(r_squared, y[test], h)
                if v is not None:
                    r2[name].append(v)
        for name in MODELS:
            vals = np.array(r2[name])
            if len(vals):
                q1, q3 = np.percentile(vals, [25, 75])
                curves[name].append([frac, float(vals.mean()), float(q1), float(q3)])
            else:
                curves[name].append([frac, None, None, None])
        details.append({"fraction": frac, "n_train": n_train, "repeats": repeats,
                        "r_squared": r2})
    report = EvalReport("learning-curve", seed, {}, details, curves)
    report.extra = {"n_entries": n}
    return report


def thresholded_r2(truth: FlowMatrix, preds: dict, thresholds, min_count: int = 3):
    """r^2 restricted to entries with truth strictly above each threshold.

    Returns
    -------
    curves : dict
        model -> list of ``[threshold, r_squared, n_entries]``
    omitted : dict
        model -> thresholds skipped because fewer than ``min_count`` entries
        survive (or the surviving truth is constant)
    """
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    pairs = truth.pairs()
    y = truth.values_for(pairs)
    curves, omitted = {}, {}
    for name, pred in preds.items():
        h = pred.values_for(pairs)
        curves[name], omitted[name] = [], []
        for t in thresholds:
            mask = y > t
            value = _maybe(r_squared, y[mask], h[mask]) if mask.sum() >= min_count else None
            if value is None:
                omitted[name].append(t)
            else:
                curves[name].append([t, value, int(mask.sum())])
    return curves, omitted


def _bin_index(values, edges):
    """Bin of each value for ascending ``edges``; -1 outside. Last bin is closed."""
    edges = np.asarray(edges, dtype=float)
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    idx[(values < edges[0]) | (values > edges[-1])] = -1
    return idx


def _check_edges(edges, what):
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("%s must be at least two strictly ascending values" % what)
    return edges


def ratio_vs_distance(truth: FlowMatrix, pred: FlowMatrix, d: DistanceTable, min_flow: float, bins):
    """Median and quartiles of ``pred / truth`` per distance bin.

    Only entries with truth strictly above ``min_flow`` are used. Bins are
    ``[lo, hi)`` except the last, which is closed.

    Returns a list of dicts with keys lo, hi, count, median, q1, q3 (the
    statistics are None for empty bins).
    """
    bins = _check_edges(bins, "bin edges")
    pairs = [p for p in truth.pairs() if truth[p] > min_flow]
    ratio = pred.values_for(pairs) / truth.values_for(pairs) if pairs else np.zeros(0)
    idx = _bin_index(d.many(pairs), bins) if pairs else np.zeros(0, dtype=int)
    out = []
    for b in range(len(bins) - 1):
        r = ratio[idx == b]
        row = {"lo": bins[b], "hi": bins[b + 1], "count": int(len(r)),
               "median": None, "q1": None, "q3": None}
        if len(r):
            q1, med, q3 = np.percentile(r, [25, 50, 75])
            row.update(median=float(med), q1=float(q1), q3=float(q3))
        out.append(row)
    return out


def cpc_grid(truth: FlowMatrix, preds: dict, d: DistanceTable, pop, d_edges, pop_edges,
             baseline: str = "gravity", candidate: str = "hybrid") -> dict:
    """CPC per (distance bin, destination-population bin) cell and model.

    A cell holds the pairs, from the union of the truth and prediction
    supports, whose distance and destination population fall in its bins.
    Empty cells are None. ``difference`` is ``candidate - baseline`` per cell
    when both models are present.
    """
    d_edges = _check_edges(d_edges, "distance edges")
    pop_edges = _check_edges(pop_edges, "population edges")
    pairs = union_pairs(truth, *preds.values())
    try:
        pj = np.array([pop[j] for _, j in pairs], dtype=float)
    except KeyError:
        bad = next(p for p in pairs if p[1] not in pop)
        raise FlowstackError("no population for destination of pair %r" % (bad,)) from None
    di = _bin_index(d.many(pairs), d_edges) if pairs else np.zeros(0, dtype=int)
    pi = _bin_index(pj, pop_edges) if pairs else np.zeros(0, dtype=int)
    y = truth.values_for(pairs)
    shape = (len(d_edges) - 1, len(pop_edges) - 1)
    counts = [[int(((di == a) & (pi == b)).sum()) for b in range(shape[1])] for a in range(shape[0])]
    cells = {}
    for name, pred in preds.items():
        h = pred.values_for(pairs)
        grid = []
        for a in range(shape[0]):
            row = []
            for b in range(shape[1]):
                mask = (di == a) & (pi == b)
                row.append(_cpc_arrays(h[mask], y[mask]) if mask.any() else None)
            grid.append(row)
        cells[name] = grid
    difference = None
    if baseline in cells and candidate in cells:
        difference = [[None if c is None or g is None else c - g
                       for c, g in zip(crow, grow)]
                      for crow, grow in zip(cells[candidate], cells[baseline])]
    return {"distance_edges": d_edges, "population_edges": pop_edges,
            "counts": counts, "cells": cells, "difference": difference}
