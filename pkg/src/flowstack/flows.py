"""Origin-destination flow matrices and the builders that produce them."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from collections.abc import Mapping
from types import MappingProxyType
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateSeriesError, FlowstackError, ParseError
from .geo import GeoPoint, haversine_km

log = logging.getLogger(__name__)

FLOW_HEADER = ["origin", "destination", "weight"]
DISTANCE_HEADER = ["origin", "destination", "km"]

MIN_THRESHOLD = "min-threshold"
MAX_THRESHOLD = "max-threshold"


class FlowMatrix(Mapping):
    """Sparse directed weighted graph, a read-only map ``(i, j) -> weight``.

    Stored weights are strictly positive and the diagonal is always empty.
    Zero weights passed to the constructor are dropped; negative or
    non-finite weights and diagonal entries raise ValueError. Absent pairs
    read as 0 through :meth:`weight`.
    """

    def __init__(self, entries=None, node_ids: Iterable | None = None):
        clean = {}
        for (i, j), w in dict(entries or {}).items():
            w = float(w)
            if i == j:
                raise ValueError("diagonal entry (%r, %r)" % (i, j))
            if not math.isfinite(w) or w < 0:
                raise ValueError("invalid weight %r for (%r, %r)" % (w, i, j))
            if w > 0:
                clean[(i, j)] = w
        nodes = set()
        for i, j in clean:
            nodes.add(i)
            nodes.add(j)
        if node_ids is None:
            node_ids = sorted(nodes)
        else:
            node_ids = list(node_ids)
            missing = nodes.difference(node_ids)
            if missing:
                raise ValueError("entries reference unknown nodes %s" % sorted(missing)[:5])
        self.node_ids = tuple(node_ids)
        self._entries = MappingProxyType(clean)

    def __getitem__(self, pair):
        return self._entries[pair]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return "FlowMatrix(%d entries, %d nodes)" % (len(self), len(self.node_ids))

    def __eq__(self, other):
        if isinstance(other, FlowMatrix):
            return dict(self._entries) == dict(other._entries)
        return NotImplemented

    __hash__ = None

    #: trace points that could not be assigned to a node (trace flows only)
    dropped = 0

    def weight(self, i, j) -> float:
        return self._entries.get((i, j), 0.0)

    def pairs(self) -> list:
        """Entry keys sorted by (origin, destination)."""
        return sorted(self._entries)

    def values_for(self, pairs) -> np.ndarray:
        """Weights on ``pairs`` with 0 where absent."""
        get = self._entries.get
        return np.array([get(p, 0.0) for p in pairs], dtype=float)

    def total(self) -> float:
        return float(sum(self._entries.values()))

    @property
    def is_symmetric(self) -> bool:
        return all(self._entries.get((j, i)) == w for (i, j), w in self._entries.items())

    def restrict(self, pairs) -> "FlowMatrix":
        keep = set(pairs)
        return FlowMatrix({p: w for p, w in self._entries.items() if p in keep}, self.node_ids)

    def scaled(self, factor) -> "FlowMatrix":
        return FlowMatrix({p: w * factor for p, w in self._entries.items()}, self.node_ids)

    def to_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(FLOW_HEADER)
        for (i, j) in self.pairs():
            w.writerow([i, j, repr(self._entries[(i, j)])])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def read_flow_csv(stream) -> FlowMatrix:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != FLOW_HEADER:
        raise ParseError("flow file must start with header %s" % ",".join(FLOW_HEADER))
    entries = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            i, j, w = row
            entries[(i, j)] = entries.get((i, j), 0.0) + float(w)
        except ValueError as exc:
            raise ParseError("line %d: %s" % (lineno, exc)) from None
    try:
        return FlowMatrix(entries)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


class DistanceTable:
    """Symmetric node-to-node distances in km.

    Built either from node representative points (great-circle distance,
    computed on demand) or from an explicit table of pairs.
    """

    def __init__(self, points: Mapping | None = None, table: Mapping | None = None):
        if (points is None) == (table is None):
            raise ValueError("give exactly one of points or table")
        self._points = None
        self._table = None
        if points is not None:
            self._points = {k: v if isinstance(v, GeoPoint) else GeoPoint(*v) for k, v in points.items()}
            ids = sorted(self._points)
            self._index = {k: n for n, k in enumerate(ids)}
            self._lat = np.array([self._points[k].lat for k in ids])
            self._lon = np.array([self._points[k].lon for k in ids])
        else:
            t = {}
            for (i, j), km in table.items():
                t[(i, j)] = float(km)
                t[(j, i)] = float(km)
            self._table = t

    @classmethod
    def from_points(cls, points: Mapping) -> "DistanceTable":
        return cls(points=points)

    @property
    def node_ids(self) -> list:
        if self._points is not None:
            return sorted(self._points)
        return sorted({i for i, _ in self._table})

    def km(self, i, j) -> float:
        """Distance between nodes; KeyError if either is unknown."""
        if i == j:
            if self._points is not None and i not in self._points:
                raise KeyError(i)
            return 0.0
        if self._points is not None:
            a, b = self._points[i], self._points[j]
            return float(haversine_km(a.lat, a.lon, b.lat, b.lon))
        return self._table[(i, j)]

    def __getitem__(self, pair):
        return self.km(*pair)

    def __contains__(self, pair):
        i, j = pair
        if self._points is not None:
            return i in self._points and j in self._points
        return i == j or (i, j) in self._table

    def many(self, pairs) -> np.ndarray:
        """Vector of distances for ``pairs``; raises KeyError naming a missing pair."""
        if not len(pairs):
            return np.zeros(0)
        if self._points is not None:
            try:
                a = np.array([self._index[i] for i, _ in pairs])
                b = np.array([self._index[j] for _, j in pairs])
            except KeyError as exc:
                bad = next(p for p in pairs if p[0] not in self._index or p[1] not in self._index)
                raise KeyError("no distance for pair %r" % (bad,)) from exc
            return haversine_km(self._lat[a], self._lon[a], self._lat[b], self._lon[b])
        out = np.empty(len(pairs))
        for n, p in enumerate(pairs):
            try:
                out[n] = self.km(*p)
            except KeyError:
                raise KeyError("no distance for pair %r" % (p,)) from None
        return out

    def to_csv(self, stream, pairs=None) -> None:
        """Write ``origin,destination,km``; all ordered off-diagonal pairs by default."""
        if pairs is None:
            ids = self.node_ids
            pairs = [(i, j) for i in ids for j in ids if i != j]
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(DISTANCE_HEADER)
        for (i, j), km in zip(pairs, self.many(pairs)):
            w.writerow([i, j, repr(float(km))])


def read_distance_csv(stream) -> DistanceTable:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != DISTANCE_HEADER:
        raise ParseError("distance file must start with header %s" % ",".join(DISTANCE_HEADER))
    table = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            table[(row[0], row[1])] = float(row[2])
        except (ValueError, IndexError) as exc:
            raise ParseError("line %d: %s" % (lineno, exc)) from None
    return DistanceTable(table=table)


# --- builders ---------------------------------------------------------------

def build_trace_flows(traces, assign: Callable, node_ids=None) -> FlowMatrix:
    """Count consecutive-picture trips between nodes.

    Records are grouped per user and stably sorted by timestamp, so equal
    timestamps keep input order. Each consecutive pair of pictures in
    different nodes adds 1 to ``(node(p_k), node(p_k+1))``. Pictures for
    which ``assign`` returns None are dropped before pairing; the number
    dropped is available as ``result.dropped``.

    Parameters
    ----------
    traces : sequence of TraceRecord
    assign : callable
        Maps a sequence of GeoPoints to a sequence of node ids (or None).
    node_ids : iterable, optional
        Node set of the resulting matrix.
    """
    traces = list(traces)
    nodes = list(assign([t.location for t in traces])) if traces else []
    by_user = defaultdict(list)
    dropped = 0
    for n, (t, node) in enumerate(zip(traces, nodes)):
        if node is None:
            dropped += 1
            continue
        by_user[t.user_id].append((t.timestamp, n, node))
    counts = defaultdict(float)
    for user in sorted(by_user):
        seq = sorted(by_user[user], key=lambda r: (r[0], r[1]))
        for (_, _, a), (_, _, b) in zip(seq, seq[1:]):
            if a != b:
                counts[(a, b)] += 1
    m = FlowMatrix(counts, node_ids)
    m.dropped = dropped
    if dropped:
        log.info("dropped %d unassignable trace points", dropped)
    return m


def trip_break_destinations(itinerary) -> list:
    """(d_1, .., d_n): the departure airport followed by every trip break."""
    out = [itinerary.coupons[0].origin]
    out.extend(c.destination for c in itinerary.coupons if c.trip_break)
    return out


def build_air_truth(itineraries, node_of: Callable | None = None, node_ids=None) -> FlowMatrix:
    """Passenger flows between consecutive trip breaks of each itinerary.

    Stopovers vanish: coupons A->B (stopover), B->C (trip break) yield a
    single A->C flow. ``node_of`` maps airport ids to node ids (e.g. basin
    ids); consecutive destinations landing in the same node are skipped.
    """
    counts = defaultdict(float)
    for it in itineraries:
        dests = trip_break_destinations(it)
        if node_of is not None:
            dests = [node_of(d) for d in dests]
        for a, b in zip(dests, dests[1:]):
            if a != b:
                counts[(a, b)] += it.passengers
    return FlowMatrix(counts, node_ids)


def build_commute_truth(records, node_ids=None) -> FlowMatrix:
    """Workers per (home, work) pair; same-region commuters are dropped."""
    counts = defaultdict(float)
    for r in records:
        if r.home_region_id != r.work_region_id:
            counts[(r.home_region_id, r.work_region_id)] += r.workers
    return FlowMatrix(counts, node_ids)


def filter_by_distance(m: FlowMatrix, d: DistanceTable, min_km=None, max_km=None) -> FlowMatrix:
    """Keep entries with ``min_km <= d(i, j) <= max_km``; missing bounds are open."""
    if min_km is not None and max_km is not None and min_km > max_km:
        raise ValueError("min_km > max_km")
    pairs = m.pairs()
    try:
        km = d.many(pairs)
    except KeyError as exc:
        raise FlowstackError("distance table does not match flow nodes: %s" % exc.args[0]) from None
    keep = np.ones(len(pairs), dtype=bool)
    if min_km is not None:
        keep &= km >= min_km
    if max_km is not None:
        keep &= km <= max_km
    return FlowMatrix({p: m[p] for p, k in zip(pairs, keep) if k}, m.node_ids)


def union_pairs(*matrices) -> list:
    keys = set()
    for m in matrices:
        keys.update(m.keys())
    return sorted(keys)


def calibrate_threshold(f: FlowMatrix, truth: FlowMatrix, d: DistanceTable,
                        candidates: Sequence[float], mode: str = MIN_THRESHOLD):
    """Pick the distance threshold maximising Pearson correlation with truth.

    For each candidate the trace flows are filtered (``min_km=t`` or
    ``max_km=t`` by ``mode``) and correlated with ``truth`` over the union of
    both supports, reading absent entries as 0. Candidates whose vectors are
    degenerate get a None correlation. Ties go to the smallest threshold.

    Returns
    -------
    best : float
    curve : list of (threshold, pearson or None), sorted by threshold
    """
    from .evaluation import pearson

    if mode not in (MIN_THRESHOLD, MAX_THRESHOLD):
        raise ValueError("mode must be %r or %r" % (MIN_THRESHOLD, MAX_THRESHOLD))
    if not len(candidates):
        raise ValueError("no candidate thresholds")
    curve = []
    best, best_rho = None, -math.inf
    for t in sorted(candidates):
        bounds = {"min_km": t} if mode == MIN_THRESHOLD else {"max_km": t}
        ff = filter_by_distance(f, d, **bounds)
        pairs = union_pairs(ff, truth)
        try:
            rho = pearson(truth.values_for(pairs), ff.values_for(pairs))
        except DegenerateSeriesError:
            rho = None
        curve.append((t, rho))
        if rho is not None and rho > best_rho:
            best, best_rho = t, rho
    if best is None:
        raise DegenerateSeriesError("every candidate threshold gives a constant series")
    return best, curve
