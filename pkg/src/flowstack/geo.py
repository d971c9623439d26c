"""Great-circle distances, airport basins and point-to-region assignment.

Nodes of a flow network are either airport basins (the nearest-airport
partition of space, with airports closer than a threshold merged into one
basin) or administrative regions given as polygons.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ParseError, TessellationError

EARTH_RADIUS_KM = 6371.0
DEFAULT_MERGE_KM = 30.0

NEAREST_POINT = "nearest-point"
POLYGON = "polygon"

# distances within this many km of each other count as a tie
_TIE_KM = 1e-9


@dataclass(frozen=True)
class GeoPoint:
    """A (lat, lon) pair in degrees. Out-of-range values raise ValueError."""

    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not -90.0 <= lat <= 90.0:
            raise ValueError("lat out of range: %r" % (self.lat,))
        if not -180.0 <= lon <= 180.0:
            raise ValueError("lon out of range: %r" % (self.lon,))
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_km(lat1, lon1, lat2, lon2):
    """Vectorised haversine over broadcastable arrays of degrees."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def _unit_vectors(lats, lons):
    phi = np.radians(np.asarray(lats, dtype=float))
    lam = np.radians(np.asarray(lons, dtype=float))
    return np.column_stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])


def _chord_for_km(km):
    # chord length on the unit sphere subtending an arc of `km`
    return 2.0 * math.sin(min(math.pi, km / EARTH_RADIUS_KM) / 2.0)


@dataclass(frozen=True)
class Basin:
    basin_id: str
    representative: GeoPoint
    members: tuple


class BasinSet:
    """Partition of space into flow nodes.

    In ``nearest-point`` mode a location belongs to the basin whose
    representative is closest by great-circle distance, ties going to the
    lexicographically smallest ``basin_id``. In ``polygon`` mode the basins
    only carry representative points (region centroids) used for distances.
    """

    def __init__(self, basins: Iterable[Basin], mode: str = NEAREST_POINT):
        if mode not in (NEAREST_POINT, POLYGON):
            raise ValueError("unknown basin mode %r" % (mode,))
        basins = tuple(sorted(basins, key=lambda b: b.basin_id))
        seen_ids, seen_members = set(), {}
        for b in basins:
            if b.basin_id in seen_ids:
                raise ValueError("duplicate basin_id %r" % (b.basin_id,))
            seen_ids.add(b.basin_id)
            for m in b.members:
                if m in seen_members:
                    raise ValueError(
                        "airport %r in basins %r and %r" % (m, seen_members[m], b.basin_id)
                    )
                seen_members[m] = b.basin_id
        self.basins = basins
        self.mode = mode
        self._member_to_basin = seen_members
        self._ids = np.array([b.basin_id for b in basins], dtype=object)
        self._lat = np.array([b.representative.lat for b in basins], dtype=float)
        self._lon = np.array([b.representative.lon for b in basins], dtype=float)
        self._tree = cKDTree(_unit_vectors(self._lat, self._lon)) if basins else None

    def __len__(self):
        return len(self.basins)

    def __iter__(self):
        return iter(self.basins)

    @property
    def ids(self) -> list:
        return [b.basin_id for b in self.basins]

    def representatives(self) -> dict:
        return {b.basin_id: b.representative for b in self.basins}

    def basin_of(self, member_id):
        """Basin id holding airport ``member_id``; KeyError if unknown."""
        return self._member_to_basin[member_id]

    def assign(self, lats, lons) -> np.ndarray:
        """Nearest basin id for each (lat, lon); returns an object array."""
        if self.mode != NEAREST_POINT:
            raise TessellationError("assignment needs a nearest-point basin set")
        if not self.basins:
            raise TessellationError("empty basin set")
        lats = np.atleast_1d(np.asarray(lats, dtype=float))
        lons = np.atleast_1d(np.asarray(lons, dtype=float))
        n_basins = len(self.basins)
        k = min(n_basins, 8)
        _, idx = self._tree.query(_unit_vectors(lats, lons), k=k)
        idx = np.asarray(idx).reshape(len(lats), k)
        out = np.empty(len(lats), dtype=object)
        for row, (lat, lon) in enumerate(zip(lats, lons)):
            cand = idx[row]
            dist = haversine_km(lat, lon, self._lat[cand], self._lon[cand])
            best = dist.min()
            tied = cand[dist <= best + _TIE_KM]
            if len(tied) == k and k < n_basins:
                # every candidate is tied; fall back to a full scan
                dist = haversine_km(lat, lon, self._lat, self._lon)
                tied = np.flatnonzero(dist <= dist.min() + _TIE_KM)
            # basins are sorted by id, so the smallest index is the smallest id
            out[row] = self._ids[int(np.min(tied))]
        return out


def merge_airports(airports: Sequence[tuple], threshold: float = DEFAULT_MERGE_KM) -> BasinSet:
    """Group airports into basins by single-linkage at ``threshold`` km.

    Basins are the connected components of the graph joining every pair of
    airports closer than ``threshold`` (strictly). A basin's representative is
    the arithmetic mean of its members' lat/lon and its id is the sorted member
    ids joined with ``+``.

    Parameters
    ----------
    airports : sequence of (airport_id, GeoPoint)
    threshold : float
        Merge distance in km, > 0.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    airports = sorted(airports, key=lambda a: a[0])
    ids = [a[0] for a in airports]
    if len(set(ids)) != len(ids):
        raise ValueError("airport ids must be unique")
    if not airports:
        return BasinSet([])
    lat = np.array([a[1].lat for a in airports])
    lon = np.array([a[1].lon for a in airports])
    tree = cKDTree(_unit_vectors(lat, lon))
    # slightly generous chord radius, then confirm on the exact metric
    pairs = tree.query_pairs(_chord_for_km(threshold) * (1 + 1e-9) + 1e-12, output_type="ndarray")
    if len(pairs):
        d = haversine_km(lat[pairs[:, 0]], lon[pairs[:, 0]], lat[pairs[:, 1]], lon[pairs[:, 1]])
        pairs = pairs[d < threshold]
    n = len(airports)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    basins = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        member_ids = tuple(ids[m] for m in members)
        rep = GeoPoint(float(np.mean(lat[members])), float(np.mean(lon[members])))
        if len(members) == 1:
            rep = airports[members[0]][1]
        basins.append(Basin("+".join(member_ids), rep, member_ids))
    return BasinSet(basins)


def assign_basin(p: GeoPoint, basins: BasinSet):
    """Id of the basin whose representative is nearest to ``p``."""
    return basins.assign([p.lat], [p.lon])[0]


@dataclass(frozen=True)
class Region:
    region_id: str
    rings: tuple  # of (n, 2) arrays of (lon, lat), closure implicit


class RegionPolygons:
    """Named regions, each a union of one or more simple rings (no holes).

    Rings are stored open: a repeated closing vertex is dropped on input and
    the last-to-first edge is implied.
    """

    def __init__(self, regions: Iterable[tuple]):
        out = []
        seen = set()
        for region_id, rings in regions:
            if region_id in seen:
                raise ValueError("duplicate region_id %r" % (region_id,))
            seen.add(region_id)
            arrs = []
            for ring in rings:
                pts = [p if isinstance(p, GeoPoint) else GeoPoint(p[1], p[0]) for p in ring]
                if len(pts) > 1 and pts[0] == pts[-1]:
                    pts = pts[:-1]
                if len(pts) < 3:
                    raise ValueError("region %r has a ring with fewer than 3 vertices" % (region_id,))
                arrs.append(np.array([[p.lon, p.lat] for p in pts], dtype=float))
            if not arrs:
                raise ValueError("region %r has no rings" % (region_id,))
            out.append(Region(region_id, tuple(arrs)))
        self.regions = tuple(sorted(out, key=lambda r: r.region_id))
        self._bbox = [
            (
                min(r[:, 0].min() for r in reg.rings),
                max(r[:, 0].max() for r in reg.rings),
                min(r[:, 1].min() for r in reg.rings),
                max(r[:, 1].max() for r in reg.rings),
            )
            for reg in self.regions
        ]

    def __len__(self):
        return len(self.regions)

    @property
    def ids(self):
        return [r.region_id for r in self.regions]

    def centroids(self) -> dict:
        """Area-weighted centroid of each region (planar lon/lat)."""
        out = {}
        for reg in self.regions:
            total_a = cx = cy = 0.0
            for ring in reg.rings:
                x, y = ring[:, 0], ring[:, 1]
                xn, yn = np.roll(x, -1), np.roll(y, -1)
                cross = x * yn - xn * y
                a = cross.sum() / 2.0
                if a == 0:
                    continue
                total_a += a
                cx += ((x + xn) * cross).sum() / 6.0
                cy += ((y + yn) * cross).sum() / 6.0
            if total_a == 0:
                pts = np.vstack(reg.rings)
                out[reg.region_id] = GeoPoint(pts[:, 1].mean(), pts[:, 0].mean())
            else:
                out[reg.region_id] = GeoPoint(cy / total_a, cx / total_a)
        return out

    def as_basins(self) -> BasinSet:
        cents = self.centroids()
        return BasinSet(
            [Basin(r.region_id, cents[r.region_id], (r.region_id,)) for r in self.regions],
            mode=POLYGON,
        )


def _on_segment(x, y, x1, y1, x2, y2, eps=1e-12):
    if min(x1, x2) - eps <= x <= max(x1, x2) + eps and min(y1, y2) - eps <= y <= max(y1, y2) + eps:
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        scale = max(1.0, abs(x2 - x1) + abs(y2 - y1))
        return abs(cross) <= eps * scale
    return False


def _ring_contains(ring, x, y):
    """Even-odd ray casting; returns (inside, on_boundary)."""
    inside = False
    n = len(ring)
    for k in range(n):
        x1, y1 = ring[k]
        x2, y2 = ring[(k + 1) % n]
        if _on_segment(x, y, x1, y1, x2, y2):
            return True, True
        if (y1 > y) != (y2 > y):
            xs = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xs:
                inside = not inside
    return inside, False


def assign_region(p: GeoPoint, regions: RegionPolygons):
    """Id of the region containing ``p``, or None.

    Points on an edge count as inside; when several regions claim the point
    the smallest region_id wins.
    """
    x, y = p.lon, p.lat
    for reg, (x0, x1, y0, y1) in zip(regions.regions, regions._bbox):
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            continue
        for ring in reg.rings:
            inside, _ = _ring_contains(ring, x, y)
            if inside:
                # regions are sorted, so the first hit has the smallest id
                return reg.region_id
    return None


def make_assigner(tessellation):
    """Return a callable mapping a sequence of GeoPoints to node ids.

    ``tessellation`` is a nearest-point BasinSet or a RegionPolygons; points
    outside every region map to None.
    """
    if isinstance(tessellation, RegionPolygons):
        return lambda pts: [assign_region(p, tessellation) for p in pts]
    if tessellation.mode != NEAREST_POINT:
        raise TessellationError("polygon-mode basin sets cannot assign points")
    return lambda pts: list(tessellation.assign([p.lat for p in pts], [p.lon for p in pts]))


# --- file formats -----------------------------------------------------------

AIRPORT_HEADER = ["airport_id", "lat", "lon"]
BASIN_HEADER = ["basin_id", "lat", "lon", "members"]


def _text(stream):
    return io.StringIO(stream) if isinstance(stream, str) else stream


def read_airports(stream) -> list:
    """Parse an ``airport_id,lat,lon`` CSV into (id, GeoPoint) tuples.

    Unlike the trace parsers this is strict: any bad row raises ParseError,
    since a silently missing airport changes the tessellation.
    """
    reader = csv.reader(_text(stream))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != AIRPORT_HEADER:
        raise ParseError("airport file must start with header %s" % ",".join(AIRPORT_HEADER))
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError("line %d: expected 3 fields" % lineno)
        try:
            out.append((row[0].strip(), GeoPoint(float(row[1]), float(row[2]))))
        except ValueError as exc:
            raise ParseError("line %d: %s" % (lineno, exc)) from None
    return out


def write_basins(basins: BasinSet, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(BASIN_HEADER + ["mode"])
    for b in basins:
        w.writerow([b.basin_id, repr(b.representative.lat), repr(b.representative.lon),
                    ";".join(b.members), basins.mode])


def read_basins(stream) -> BasinSet:
    reader = csv.reader(_text(stream))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != BASIN_HEADER + ["mode"]:
        raise ParseError("basin file must start with header %s,mode" % ",".join(BASIN_HEADER))
    basins, modes = [], set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            members = tuple(m for m in row[3].split(";") if m)
            basins.append(Basin(row[0], GeoPoint(float(row[1]), float(row[2])), members))
            modes.add(row[4])
        except (ValueError, IndexError) as exc:
            raise ParseError("line %d: %s" % (lineno, exc)) from None
    if len(modes) > 1:
        raise ParseError("mixed basin modes %s" % sorted(modes))
    return BasinSet(basins, mode=modes.pop() if modes else NEAREST_POINT)


def read_regions(stream) -> RegionPolygons:
    """Parse line-delimited JSON ``{"region_id": .., "rings": [[[lon, lat], ..], ..]}``."""
    regions = []
    for lineno, line in enumerate(_text(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rings = [[GeoPoint(lat, lon) for lon, lat in ring] for ring in obj["rings"]]
            regions.append((str(obj["region_id"]), rings))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError("line %d: %s" % (lineno, exc)) from None
    try:
        return RegionPolygons(regions)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_regions(regions: RegionPolygons, stream) -> None:
    for reg in regions.regions:
        rings = [[[float(x), float(y)] for x, y in ring] for ring in reg.rings]
        stream.write(json.dumps({"region_id": reg.region_id, "rings": rings}) + "\n")

