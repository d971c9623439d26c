import io
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstack import GeoPoint, RegionPolygons, assign_basin, assign_region, haversine_distance, merge_airports
from flowstack.errors import ParseError, TessellationError
from flowstack.geo import (
    Basin,
    BasinSet,
    make_assigner,
    read_airports,
    read_basins,
    read_regions,
    write_basins,
    write_regions,
)

from oracles import haversine, nearest_by_scan, region_by_winding

lats = st.floats(-90, 90, allow_nan=False)
lons = st.floats(-180, 180, allow_nan=False)
points = st.builds(GeoPoint, lats, lons)


def offset_east(p, km):
    """Point `km` east of `p` along its parallel (only exact on the equator)."""
    return GeoPoint(p.lat, p.lon + math.degrees(km / 6371.0))


class TestGeoPoint:
    def test_valid(self):
        p = GeoPoint(40.0, -75.0)
        assert (p.lat, p.lon) == (40.0, -75.0)

    @pytest.mark.parametrize("lat,lon", [(95.0, 0.0), (-90.5, 0.0), (0.0, 181.0), (float("nan"), 0.0)])
    def test_rejects_out_of_range(self, lat, lon):
        with pytest.raises(ValueError):
            GeoPoint(lat, lon)


class TestHaversine:
    def test_identical_points(self):
        assert haversine_distance(GeoPoint(40.0, -75.0), GeoPoint(40.0, -75.0)) == 0.0

    def test_symmetry_example(self):
        a, b = GeoPoint(40.7, -74.0), GeoPoint(34.1, -118.2)
        assert haversine_distance(a, b) == haversine_distance(b, a)

    def test_one_degree_on_equator(self):
        expected = 2 * math.pi * 6371.0 / 360.0
        assert haversine_distance(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(111.195, abs=1e-3)

    @settings(max_examples=200)
    @given(points, points)
    def test_matches_atan2_formula(self, a, b):
        assert haversine_distance(a, b) == pytest.approx(haversine(a.lat, a.lon, b.lat, b.lon), abs=1e-6)

    @settings(max_examples=300)
    @given(points, points, points)
    def test_metric_axioms(self, a, b, c):
        ab, bc, ac = haversine_distance(a, b), haversine_distance(b, c), haversine_distance(a, c)
        assert ab >= 0
        assert ab == haversine_distance(b, a)
        assert ac <= ab + bc + 1e-9

    @given(points)
    def test_zero_on_identity(self, a):
        assert haversine_distance(a, a) == 0.0


class TestMergeAirports:
    def test_two_close_airports_merge(self):
        a = GeoPoint(0.0, 0.0)
        basins = merge_airports([("A", a), ("B", offset_east(a, 10))], 30)
        assert len(basins) == 1
        assert basins.basins[0].members == ("A", "B")

    def test_chain_merges_into_one_component(self):
        a = GeoPoint(0.0, 0.0)
        b, c = offset_east(a, 25), offset_east(a, 50)
        assert haversine_distance(a, c) == pytest.approx(50, abs=1e-9)
        basins = merge_airports([("A", a), ("B", b), ("C", c)], 30)
        assert len(basins) == 1
        assert set(basins.basins[0].members) == {"A", "B", "C"}

    def test_far_apart_stay_separate(self):
        a = GeoPoint(0.0, 0.0)
        basins = merge_airports([("A", a), ("B", offset_east(a, 31))], 30)
        assert len(basins) == 2

    def test_threshold_is_strict(self):
        a = GeoPoint(0.0, 0.0)
        b = offset_east(a, 30)
        d = haversine_distance(a, b)
        assert len(merge_airports([("A", a), ("B", b)], d)) == 2
        assert len(merge_airports([("A", a), ("B", b)], d * (1 + 1e-9))) == 1

    def test_singleton_keeps_coordinates(self):
        p = GeoPoint(33.9, -118.4)
        basins = merge_airports([("LAX", p)])
        assert len(basins) == 1
        assert basins.basins[0].representative == p
        assert basins.basins[0].basin_id == "LAX"

    def test_centroid_representative(self):
        a, b = GeoPoint(10.0, 20.0), GeoPoint(10.1, 20.1)
        rep = merge_airports([("A", a), ("B", b)]).basins[0].representative
        assert rep.lat == pytest.approx(10.05) and rep.lon == pytest.approx(20.05)

    def test_empty(self):
        assert len(merge_airports([])) == 0

    def test_duplicate_ids(self):
        with pytest.raises(ValueError):
            merge_airports([("A", GeoPoint(0, 0)), ("A", GeoPoint(1, 1))])

    def test_matches_bruteforce_components(self):
        rng = random.Random(3)
        airports = [("a%02d" % k, GeoPoint(rng.uniform(30, 31), rng.uniform(-90, -89))) for k in range(60)]
        # union-find over all pairs as the reference
        parent = list(range(len(airports)))

        def find(x):
            while parent[x] != x:
                x = parent[x]
            return x

        for i in range(len(airports)):
            for j in range(i + 1, len(airports)):
                pi, pj = airports[i][1], airports[j][1]
                if haversine(pi.lat, pi.lon, pj.lat, pj.lon) < 15:
                    parent[find(i)] = find(j)
        groups = {}
        for k, (aid, _) in enumerate(airports):
            groups.setdefault(find(k), set()).add(aid)
        expected = sorted(sorted(g) for g in groups.values())
        got = sorted(sorted(b.members) for b in merge_airports(airports, 15))
        assert got == expected

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(40, 41), st.floats(-75, -74)), min_size=1, max_size=25),
           st.randoms(use_true_random=False))
    def test_order_invariance_and_idempotence(self, coords, rnd):
        airports = [("x%02d" % k, GeoPoint(lat, lon)) for k, (lat, lon) in enumerate(coords)]
        base = merge_airports(airports, 30)
        shuffled = airports[:]
        rnd.shuffle(shuffled)
        again = merge_airports(shuffled, 30)
        assert [(b.basin_id, b.members, b.representative) for b in base] == \
               [(b.basin_id, b.members, b.representative) for b in again]
        assert len(base) <= len(airports)
        remerged = merge_airports([(b.basin_id, b.representative) for b in base], 30)
        assert len(remerged) <= len(base)


class TestAssignBasin:
    def test_coincident_point(self):
        basins = merge_airports([("A", GeoPoint(10, 10)), ("B", GeoPoint(20, 20))])
        assert assign_basin(GeoPoint(20, 20), basins) == "B"

    def test_strict_minimum(self):
        p = GeoPoint(0, 0)
        basins = merge_airports([("FAR", offset_east(p, 200)), ("NEAR", offset_east(p, -10))])
        assert assign_basin(p, basins) == "NEAR"

    def test_tie_goes_to_smallest_id(self):
        basins = merge_airports([("Z", GeoPoint(0, 1)), ("M", GeoPoint(0, -1))])
        assert assign_basin(GeoPoint(0, 0), basins) == "M"

    def test_many_ties_fall_back_to_full_scan(self):
        # 12 basins on a circle of latitude around the pole, query at the pole
        basins = BasinSet([Basin("b%02d" % k, GeoPoint(80, -180 + 30 * k), ("b%02d" % k,))
                           for k in range(12)])
        assert assign_basin(GeoPoint(90, 0), basins) == "b00"

    def test_empty_basin_set(self):
        with pytest.raises(TessellationError):
            assign_basin(GeoPoint(0, 0), BasinSet([]))

    def test_matches_exhaustive_scan(self):
        rng = random.Random(11)
        airports = [("ap%02d" % k, GeoPoint(rng.uniform(25, 49), rng.uniform(-125, -67))) for k in range(50)]
        basins = merge_airports(airports, 1e-6)
        reps = [(b.basin_id, b.representative.lat, b.representative.lon) for b in basins]
        queries = [GeoPoint(rng.uniform(20, 55), rng.uniform(-130, -60)) for _ in range(1000)]
        got = make_assigner(basins)(queries)
        assert list(got) == [nearest_by_scan(q.lat, q.lon, reps) for q in queries]


def convex_polygon(rng, cx, cy, r, n):
    angles = sorted(rng.uniform(0, 2 * math.pi) for _ in range(n))
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in angles]


class TestAssignRegion:
    square = RegionPolygons([("sq", [[(0, 0), (2, 0), (2, 2), (0, 2)]])])

    def test_interior(self):
        assert assign_region(GeoPoint(1, 1), self.square) == "sq"

    def test_outside(self):
        assert assign_region(GeoPoint(5, 5), self.square) is None

    def test_edge_and_vertex_count_as_inside(self):
        assert assign_region(GeoPoint(0, 1), self.square) == "sq"  # lat 0, lon 1: bottom edge
        assert assign_region(GeoPoint(2, 2), self.square) == "sq"

    def test_shared_edge_goes_to_smallest_id(self):
        regions = RegionPolygons([
            ("b", [[(1, 0), (2, 0), (2, 1), (1, 1)]]),
            ("a", [[(0, 0), (1, 0), (1, 1), (0, 1)]]),
        ])
        assert assign_region(GeoPoint(0.5, 1.0), regions) == "a"

    def test_explicitly_closed_ring(self):
        regions = RegionPolygons([("sq", [[(0, 0), (2, 0), (2, 2), (0, 2), (0, 0)]])])
        assert len(regions.regions[0].rings[0]) == 4

    def test_ring_too_small(self):
        with pytest.raises(ValueError):
            RegionPolygons([("bad", [[(0, 0), (1, 1)]])])

    def test_multi_ring_region(self):
        regions = RegionPolygons([("two", [[(0, 0), (1, 0), (1, 1)], [(5, 5), (6, 5), (6, 6)]])])
        assert assign_region(GeoPoint(5.2, 5.8), regions) == "two"

    def test_matches_winding_number(self):
        rng = random.Random(5)
        polys = [("r%02d" % k, [convex_polygon(rng, rng.uniform(-100, -80), rng.uniform(30, 45),
                                               rng.uniform(1, 4), rng.randint(3, 9))])
                 for k in range(20)]
        regions = RegionPolygons(polys)
        for _ in range(500):
            x, y = rng.uniform(-105, -75), rng.uniform(25, 50)
            assert assign_region(GeoPoint(y, x), regions) == region_by_winding(x, y, polys)


class TestFiles:
    def test_airports_roundtrip_through_basins(self):
        text = "airport_id,lat,lon\nJFK,40.64,-73.78\nLGA,40.77,-73.87\nLAX,33.94,-118.41\n"
        airports = read_airports(text)
        basins = merge_airports(airports)
        buf = io.StringIO()
        write_basins(basins, buf)
        back = read_basins(buf.getvalue())
        assert back.ids == basins.ids == ["JFK+LGA", "LAX"]
        assert back.representatives() == basins.representatives()
        assert back.basin_of("LGA") == "JFK+LGA"

    def test_airport_header_required(self):
        with pytest.raises(ParseError):
            read_airports("id,lat,lon\nA,1,2\n")

    def test_airport_bad_row(self):
        with pytest.raises(ParseError, match="line 2"):
            read_airports("airport_id,lat,lon\nA,100,2\n")

    def test_regions_roundtrip(self):
        text = '{"region_id": "c1", "rings": [[[-75, 40], [-74, 40], [-74, 41], [-75, 41]]]}\n'
        regions = read_regions(text)
        buf = io.StringIO()
        write_regions(regions, buf)
        again = read_regions(buf.getvalue())
        assert again.ids == ["c1"]
        np.testing.assert_array_equal(again.regions[0].rings[0], regions.regions[0].rings[0])
        cent = regions.centroids()["c1"]
        assert (cent.lat, cent.lon) == pytest.approx((40.5, -74.5))

    def test_regions_bad_line(self):
        with pytest.raises(ParseError):
            read_regions('{"region_id": "c1"}\n')
