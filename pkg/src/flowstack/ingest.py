"""CSV parsers for traces, itineraries, commuting records and populations.

Every parser returns ``(records, diagnostics)``. Row-level problems become
:class:`Diagnostic` entries carrying the 1-based line number; only a missing
or wrong header is fatal (:class:`~flowstack.errors.ParseError`). Blank lines
are ignored and are not counted as data rows.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import NamedTuple

from .errors import ParseError
from .geo import GeoPoint

TRACE_HEADER = ["user_id", "timestamp", "lat", "lon"]
ITINERARY_HEADER = ["ticket_id", "passengers", "coupon_index", "origin", "destination", "trip_break"]
COMMUTE_HEADER = ["home_region", "work_region", "workers"]
POPULATION_HEADER = ["node_id", "population"]


@dataclass(frozen=True)
class Diagnostic:
    """A rejected input. ``rows`` counts the data rows it covers."""

    line: int
    message: str
    rows: int = 1

    def __str__(self):
        return "%s, line %d" % (self.message, self.line)


@dataclass(frozen=True)
class TraceRecord:
    user_id: str
    timestamp: int
    location: GeoPoint

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("negative timestamp")


class Coupon(NamedTuple):
    origin: str
    destination: str
    trip_break: bool


@dataclass(frozen=True)
class Itinerary:
    ticket_id: str
    passengers: int
    coupons: tuple

    def __post_init__(self):
        problem = itinerary_problem(self.passengers, self.coupons)
        if problem:
            raise ValueError(problem)


def itinerary_problem(passengers, coupons):
    """Return why (passengers, coupons) is not a valid itinerary, or None."""
    if passengers < 1:
        return "passengers must be positive"
    if not coupons:
        return "itinerary has no coupons"
    for prev, cur in zip(coupons, coupons[1:]):
        if cur.origin != prev.destination:
            return "discontinuous chain"
    if not coupons[-1].trip_break:
        return "itinerary does not end in trip break"
    return None


@dataclass(frozen=True)
class CommuteRecord:
    home_region_id: str
    work_region_id: str
    workers: int

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be positive")


class PopulationTable(Mapping):
    """Read-only map node_id -> population, all strictly positive."""

    def __init__(self, data=None):
        data = dict(data or {})
        for k, v in data.items():
            v = float(v)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError("population of %r must be positive and finite" % (k,))
            data[k] = v
        self._data = data

    def __getitem__(self, key):
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        return "PopulationTable(%r)" % (self._data,)

    def scaled(self, factor):
        return PopulationTable({k: v * factor for k, v in self._data.items()})


def _rows(stream, header, name):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    first = next(reader, None)
    if first is None or [h.strip() for h in first] != header:
        raise ParseError("%s file must start with header %s" % (name, ",".join(header)))
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        yield lineno, [f.strip() for f in row]


def _float(text, what):
    try:
        v = float(text)
    except ValueError:
        raise ValueError("bad %s %r" % (what, text)) from None
    if not math.isfinite(v):
        raise ValueError("bad %s %r" % (what, text))
    return v


def _int(text, what):
    try:
        return int(text)
    except ValueError:
        raise ValueError("bad %s %r" % (what, text)) from None


def _point(lat_text, lon_text):
    lat, lon = _float(lat_text, "lat"), _float(lon_text, "lon")
    if not -90 <= lat <= 90:
        raise ValueError("lat out of range")
    if not -180 <= lon <= 180:
        raise ValueError("lon out of range")
    return GeoPoint(lat, lon)


def _nonempty(text, what):
    if not text:
        raise ValueError("empty %s" % what)
    return text


def parse_traces(stream):
    """Parse ``user_id,timestamp,lat,lon`` rows into TraceRecords."""
    records, diags = [], []
    for lineno, row in _rows(stream, TRACE_HEADER, "trace"):
        try:
            if len(row) != 4:
                raise ValueError("expected 4 fields, got %d" % len(row))
            ts = _int(row[1], "timestamp")
            if ts < 0:
                raise ValueError("negative timestamp")
            records.append(TraceRecord(_nonempty(row[0], "user_id"), ts, _point(row[2], row[3])))
        except ValueError as exc:
            diags.append(Diagnostic(lineno, str(exc)))
    return records, diags


def parse_itineraries(stream):
    """Parse coupon rows and group them per ticket into Itineraries.

    Rows of a ticket must be contiguous with increasing ``coupon_index``. Any
    problem with a ticket rejects the whole ticket as one diagnostic.
    """
    records, diags = [], []
    finished = set()
    group = None  # [ticket_id, first_line, rows, error]

    def flush():
        if group is None:
            return
        ticket_id, first_line, rows, error = group
        if error is None and ticket_id in finished:
            error = "ticket rows are not contiguous"
        finished.add(ticket_id)
        if error is None:
            passengers = {r[0] for r in rows}
            indices = [r[1] for r in rows]
            coupons = tuple(r[2] for r in rows)
            if len(passengers) != 1:
                error = "inconsistent passenger count"
            elif any(b <= a for a, b in zip(indices, indices[1:])):
                error = "coupons not ordered by coupon_index"
            else:
                error = itinerary_problem(passengers.pop(), coupons)
        if error is None:
            records.append(Itinerary(ticket_id, rows[0][0], coupons))
        else:
            diags.append(Diagnostic(first_line, "ticket %s: %s" % (ticket_id, error), len(rows)))

    for lineno, row in _rows(stream, ITINERARY_HEADER, "itinerary"):
        ticket_id = row[0] if row else ""
        if group is None or group[0] != ticket_id:
            flush()
            group = [ticket_id, lineno, [], None]
        try:
            if len(row) != 6:
                raise ValueError("expected 6 fields, got %d" % len(row))
            _nonempty(ticket_id, "ticket_id")
            passengers = _int(row[1], "passengers")
            if passengers < 1:
                raise ValueError("passengers must be positive")
            index = _int(row[2], "coupon_index")
            if row[5] not in ("0", "1"):
                raise ValueError("trip_break must be 0 or 1")
            coupon = Coupon(_nonempty(row[3], "origin"), _nonempty(row[4], "destination"), row[5] == "1")
            group[2].append((passengers, index, coupon))
        except ValueError as exc:
            group[2].append(None)
            if group[3] is None:
                group[3] = "line %d: %s" % (lineno, exc)
    flush()
    return records, diags


def parse_commutes(stream):
    """Parse ``home_region,work_region,workers`` rows. Diagonal rows are kept."""
    records, diags = [], []
    for lineno, row in _rows(stream, COMMUTE_HEADER, "commute"):
        try:
            if len(row) != 3:
                raise ValueError("expected 3 fields, got %d" % len(row))
            workers = _int(row[2], "workers")
            if workers < 1:
                raise ValueError("workers must be positive")
            records.append(CommuteRecord(_nonempty(row[0], "home_region"),
                                         _nonempty(row[1], "work_region"), workers))
        except ValueError as exc:
            diags.append(Diagnostic(lineno, str(exc)))
    return records, diags


def parse_population(stream):
    """Parse ``node_id,population``; repeated node ids are summed."""
    totals, diags = {}, []
    for lineno, row in _rows(stream, POPULATION_HEADER, "population"):
        try:
            if len(row) != 2:
                raise ValueError("expected 2 fields, got %d" % len(row))
            pop = _float(row[1], "population")
            if pop <= 0:
                raise ValueError("population must be positive")
            node = _nonempty(row[0], "node_id")
            totals[node] = totals.get(node, 0.0) + pop
        except ValueError as exc:
            diags.append(Diagnostic(lineno, str(exc)))
    return PopulationTable(totals), diags


def _writer(stream):
    return csv.writer(stream, lineterminator="\n")


def write_traces(records, stream):
    w = _writer(stream)
    w.writerow(TRACE_HEADER)
    for r in records:
        w.writerow([r.user_id, r.timestamp, repr(r.location.lat), repr(r.location.lon)])


def write_itineraries(records, stream):
    w = _writer(stream)
    w.writerow(ITINERARY_HEADER)
    for it in records:
        for k, c in enumerate(it.coupons, start=1):
            w.writerow([it.ticket_id, it.passengers, k, c.origin, c.destination, int(c.trip_break)])


def write_commutes(records, stream):
    w = _writer(stream)
    w.writerow(COMMUTE_HEADER)
    for r in records:
        w.writerow([r.home_region_id, r.work_region_id, r.workers])


def write_population(table, stream):
    w = _writer(stream)
    w.writerow(POPULATION_HEADER)
    for node in sorted(table):
        w.writerow([node, repr(table[node])])
