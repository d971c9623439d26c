"""Acceptance gate: one group of tests per criterion.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the summary for one PASS/FAIL line per criterion.
"""

import json
import math
import random
import shutil
import time
from collections import Counter

import numpy as np
import pytest

from flowstack import (
    FlowMatrix,
    GeoPoint,
    GravityParams,
    assign_basin,
    build_air_truth,
    build_commute_truth,
    build_trace_flows,
    calibrate_threshold,
    filter_by_distance,
    fit_gravity,
    fit_hybrid,
    haversine_distance,
    merge_airports,
)
from flowstack.cli import main
from flowstack.evaluation import EvalInputs, cpc, kfold_cv, pearson, r_squared, spatial_cv
from flowstack.geo import make_assigner
from flowstack.ingest import CommuteRecord, Coupon, Itinerary, TraceRecord

from goldens import MICROWORLD, diff_against_golden
from oracles import (
    air_oracle,
    commute_oracle,
    haversine,
    lstsq,
    nearest_by_scan,
    pearson_oracle,
    r2_oracle,
    trace_pairs_oracle,
    two_by_two,
)
from synth import make_world

criterion = pytest.mark.criterion


# 1 ---------------------------------------------------------------------------

@criterion(1)
@pytest.mark.parametrize("kind,beta", [("power", 2.0), ("exponential", 0.02)])
def test_gravity_recovery(kind, beta):
    gen = GravityParams(3.0, 0.8, 0.6, beta, kind)
    w = make_world(40, seed=100, params=gen)
    start = time.perf_counter()
    got = fit_gravity(w.truth, w.pop, w.d, kind)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    for name in ("K", "alpha", "gamma", "beta"):
        assert abs(getattr(got, name) - getattr(gen, name)) <= 1e-6, name
    # independent solve of the same log-linear system
    pairs = w.truth.pairs()
    pi = np.log([w.pop[i] for i, _ in pairs])
    pj = np.log([w.pop[j] for _, j in pairs])
    dist = np.array([w.d.km(*p) for p in pairs])
    dcol = -np.log(dist) if kind == "power" else -dist
    b = lstsq(np.column_stack([np.ones(len(pairs)), pi, pj, dcol]), np.log(w.truth.values_for(pairs)))
    assert abs(math.exp(b[0]) - 3.0) <= 1e-6 and np.allclose(b[1:], [0.8, 0.6, beta], atol=1e-6)


# 2 ---------------------------------------------------------------------------

@criterion(2)
def test_hybrid_recovery():
    w = make_world(12, seed=101)
    pairs = [p for p in w.truth.pairs() if p in w.f]
    assert len(pairs) >= 50
    truth = FlowMatrix({p: 2 * w.g[p] + 3 * w.f[p] for p in pairs})
    got = fit_hybrid(truth, w.g, w.f)
    y = truth.values_for(pairs)
    a0, b0 = two_by_two(y, w.g.values_for(pairs), w.f.values_for(pairs))
    assert abs(a0 - 2) <= 1e-9 and abs(b0 - 3) <= 1e-9
    assert abs(got.A - 2) <= 1e-9 and abs(got.B - 3) <= 1e-9


# 3 ---------------------------------------------------------------------------

@criterion(3)
@pytest.mark.parametrize("kind,beta", [("power", 2.0), ("exponential", 0.02)])
def test_kfold_exact(kind, beta):
    w = make_world(30, seed=102, params=GravityParams(3.0, 0.8, 0.6, beta, kind))
    rep = kfold_cv(w.truth, EvalInputs(w.pop, w.d, w.f, kind), k=10, seed=0)
    for m in ("gravity", "hybrid"):
        assert abs(rep.metrics[m]["r_squared"] - 1) <= 1e-9
    tested = Counter(tuple(p) for fold in rep.fold_details for p in fold["test_pairs"])
    assert sorted(tested) == w.truth.pairs()
    assert set(tested.values()) == {1}


@criterion(3)
def test_spatial_exact():
    w = make_world(30, seed=103)
    rep = spatial_cv(w.truth, w.points, EvalInputs(w.pop, w.d, w.f), -102.0)
    for m in ("gravity", "hybrid"):
        assert abs(rep.metrics[m]["r_squared"] - 1) <= 1e-9
        for direction in rep.fold_details:
            assert abs(direction["metrics"][m]["r_squared"] - 1) <= 1e-9


# 4 ---------------------------------------------------------------------------

@criterion(4)
@pytest.mark.parametrize("seed", range(5))
def test_stacking_dominance(seed):
    w = make_world(20, seed=110 + seed, noise=0.7, trace_weight=10.0 * seed)
    rep = kfold_cv(w.truth, EvalInputs(w.pop, w.d, w.f), k=10, seed=seed)
    for fold in rep.fold_details:
        loss = fold["train_loss"]
        assert loss["hybrid"] <= loss["gravity"]
        assert loss["hybrid"] <= loss["trace"]


# 5 ---------------------------------------------------------------------------

RNG_BASINS = merge_airports([("ap%02d" % k, GeoPoint(30 + 2 * (k % 5), -120 + 9 * (k // 5))) for k in range(20)])
REPS = [(b.basin_id, b.representative.lat, b.representative.lon) for b in RNG_BASINS]


@criterion(5)
@pytest.mark.parametrize("seed", range(120))
def test_trace_builder_oracle(seed):
    rng = random.Random(seed)
    rows = [("u%d" % rng.randint(0, 15), rng.randint(0, 60), rng.uniform(28, 40), rng.uniform(-122, -80))
            for _ in range(rng.randint(0, 500))]
    traces = [TraceRecord(u, t, GeoPoint(lat, lon)) for u, t, lat, lon in rows]
    got = build_trace_flows(traces, make_assigner(RNG_BASINS))
    want = trace_pairs_oracle(rows, lambda lat, lon: nearest_by_scan(lat, lon, REPS))
    assert dict(got) == {k: float(v) for k, v in want.items()}
    assert all(i != j for i, j in got)


@criterion(5)
@pytest.mark.parametrize("seed", range(120))
def test_air_builder_oracle(seed):
    rng = random.Random(1000 + seed)
    its, tickets, n_rows = [], [], 0
    target = rng.randint(1, 496)
    while n_rows < target:
        here = rng.choice("ABCDEFGH")
        legs = []
        for _ in range(rng.randint(1, 4)):
            nxt = rng.choice("ABCDEFGH")
            legs.append((here, nxt, rng.random() < 0.4))
            here = nxt
        legs[-1] = legs[-1][:2] + (True,)
        pax = rng.randint(1, 300)
        its.append(Itinerary("t%d" % len(its), pax, tuple(Coupon(*leg) for leg in legs)))
        tickets.append((pax, legs))
        n_rows += len(legs)
    assert n_rows <= 500
    got = build_air_truth(its)
    assert dict(got) == {k: float(v) for k, v in air_oracle(tickets).items()}


@criterion(5)
@pytest.mark.parametrize("seed", range(120))
def test_commute_builder_oracle(seed):
    rng = random.Random(2000 + seed)
    rows = [(rng.choice("pqrstu"), rng.choice("pqrstu"), rng.randint(1, 5000))
            for _ in range(rng.randint(0, 500))]
    got = build_commute_truth([CommuteRecord(*r) for r in rows])
    assert dict(got) == {k: float(v) for k, v in commute_oracle(rows).items()}


@criterion(5)
def test_hub_removal_and_zero_diagonal():
    via_hub = Itinerary("t", 3, (Coupon("A", "HUB", False), Coupon("HUB", "B", True)))
    truth = build_air_truth([via_hub])
    assert dict(truth) == {("A", "B"): 3.0}
    assert not any("HUB" in p for p in truth)
    assert len(build_commute_truth([CommuteRecord("c", "c", 9)])) == 0
    back_home = Itinerary("r", 1, (Coupon("A", "B", False), Coupon("B", "A", True)))
    assert len(build_air_truth([back_home])) == 0


# 6 ---------------------------------------------------------------------------

@criterion(6)
def test_cpc_identities():
    rng = np.random.default_rng(6)
    pairs = [(i, j) for i in "abcdef" for j in "abcdef" if i != j]
    y = FlowMatrix({p: float(v) for p, v in zip(pairs, rng.integers(1, 1000, len(pairs)))})
    assert cpc(y, y) == 1.0
    left = FlowMatrix({p: y[p] for p in pairs[:10]})
    right = FlowMatrix({p: y[p] for p in pairs[10:]})
    assert cpc(left, right) == 0.0
    assert cpc(y.scaled(2.0), y) == 2 / 3


@criterion(6)
def test_pearson_r2_oracles():
    rng = np.random.default_rng(66)
    for _ in range(500):
        n = int(rng.integers(2, 200))
        x = rng.lognormal(2, 1.5, n)
        h = x * rng.lognormal(0, 0.5, n)
        assert abs(pearson(x, h) - pearson_oracle(list(x), list(h))) <= 1e-12
        assert abs(r_squared(x, h) - r2_oracle(list(x), list(h))) <= 1e-12


# 7 ---------------------------------------------------------------------------

@criterion(7)
def test_threshold_calibration():
    w = make_world(30, seed=107)
    truth = filter_by_distance(w.f, w.d, min_km=500)
    best, curve = calibrate_threshold(w.f, truth, w.d, [100, 300, 500, 700], "min-threshold")
    assert best == 500
    assert dict(curve)[500] == pytest.approx(1.0, abs=1e-12)


# 8 ---------------------------------------------------------------------------

@criterion(8)
def test_assign_basin_brute_force():
    rng = random.Random(8)
    airports = [("a%03d" % k, GeoPoint(rng.uniform(25, 49), rng.uniform(-125, -67))) for k in range(80)]
    basins = merge_airports(airports, 30)
    reps = [(b.basin_id, b.representative.lat, b.representative.lon) for b in basins]
    queries = [GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180)) for _ in range(1000)]
    assert list(make_assigner(basins)(queries)) == [nearest_by_scan(q.lat, q.lon, reps) for q in queries]
    assert [assign_basin(q, basins) for q in queries[:50]] == \
           [nearest_by_scan(q.lat, q.lon, reps) for q in queries[:50]]


@criterion(8)
def test_chain_merge():
    a = GeoPoint(40.0, -100.0)
    # steps of just under 25 km along the parallel; A and C end up ~50 km apart
    step = 25.0 / (6371.0 * math.cos(math.radians(40.0))) * 180 / math.pi
    b, c = GeoPoint(40.0, -100.0 + step), GeoPoint(40.0, -100.0 + 2 * step)
    assert 24.9 < haversine_distance(a, b) < 25.0 and haversine_distance(a, c) > 30
    assert haversine(a.lat, a.lon, b.lat, b.lon) == pytest.approx(haversine_distance(a, b), abs=1e-9)
    basins = merge_airports([("A", a), ("B", b), ("C", c)], 30)
    assert len(basins) == 1 and basins.basins[0].members == ("A", "B", "C")


@criterion(8)
def test_merge_order_invariance():
    rng = random.Random(88)
    airports = [("x%02d" % k, GeoPoint(rng.uniform(40, 41), rng.uniform(-75, -74))) for k in range(40)]
    base = [(b.basin_id, b.members, b.representative) for b in merge_airports(airports, 15)]
    for _ in range(20):
        rng.shuffle(airports)
        assert [(b.basin_id, b.members, b.representative) for b in merge_airports(airports, 15)] == base


# 9 ---------------------------------------------------------------------------

def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@criterion(9)
@pytest.mark.parametrize("config", ["air.json", "commute.json"])
def test_evaluate_deterministic(tmp_path, capsys, config):
    cfg = str(MICROWORLD / config)
    out = tmp_path / "run"
    assert main(["pipeline", "--config", cfg, "--out", str(out)]) == 0
    first = _snapshot(out)
    for path in out.iterdir():
        if path.name.startswith(("report_", "curve_", "predictions_")):
            path.unlink()
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    assert _snapshot(out) == first
    capsys.readouterr()


@criterion(9)
def test_evaluate_deterministic_all_schemes_synthetic(tmp_path, capsys):
    w = make_world(25, seed=109, noise=0.5, trace_weight=3)
    (tmp_path / "airports.csv").write_text(
        "airport_id,lat,lon\n" + "".join("%s,%r,%r\n" % (k, p.lat, p.lon) for k, p in w.points.items()))
    (tmp_path / "population.csv").write_text(
        "node_id,population\n" + "".join("%s,%r\n" % kv for kv in w.pop.items()))
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "airports": "airports.csv", "population": "population.csv", "merge_threshold_km": 1,
        "schemes": ["kfold", "spatial", "learning-curve", "thresholded-r2", "ratio-curve", "cpc-grid"],
        "fractions": [0.2, 0.5], "repeats": 3, "thresholds": [0, 1000], "seed": 5}))
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["tessellate", "--config", str(cfg), "--out", str(out)]) == 0
        (out / "truth_flows.csv").write_text(w.truth.to_csv_string())
        (out / "trace_flows.csv").write_text(w.f.to_csv_string())
        assert main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    assert _snapshot(tmp_path / "a") == _snapshot(tmp_path / "b")
    capsys.readouterr()


# 10 --------------------------------------------------------------------------

@criterion(10)
@pytest.mark.parametrize("name", ["air", "commute"])
def test_microworld_golden(tmp_path, capsys, name):
    work = tmp_path / "mw"
    shutil.copytree(MICROWORLD, work, ignore=shutil.ignore_patterns("golden"))
    start = time.perf_counter()
    code = main(["pipeline", "--config", str(work / ("%s.json" % name))])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    assert code == 0
    assert elapsed < 5.0
    assert diff_against_golden(work / ("out_%s" % name), MICROWORLD / "golden" / name) == []
