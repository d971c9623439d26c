"""Command-line pipeline: tessellate, build-flows, fit, evaluate.

Every stage reads its inputs from the config (a JSON file) and from the
artifacts earlier stages wrote to the output directory, so each stage can be
rerun on its own. Exit codes: 0 success, 1 computation or validation
failure, 2 I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import geo, ingest
from .errors import FlowstackError, ParseError
from .evaluation import (
    EvalInputs,
    EvalReport,
    cpc_grid,
    kfold_cv,
    learning_curve,
    ratio_vs_distance,
    spatial_cv,
    thresholded_r2,
)
from .flows import (
    DistanceTable,
    FlowMatrix,
    build_air_truth,
    build_commute_truth,
    build_trace_flows,
    filter_by_distance,
    read_flow_csv,
)
from .models import (
    DeterrenceKind,
    GravityParams,
    dump_params,
    fit_gravity,
    fit_hybrid,
    load_params,
    predict_gravity,
)

log = logging.getLogger("flowstack")

SCHEMES = ("kfold", "spatial", "learning-curve", "thresholded-r2", "ratio-curve", "cpc-grid")

BASINS_FILE = "basins.csv"
DISTANCES_FILE = "distances.csv"
TRACE_FLOWS_FILE = "trace_flows.csv"
TRUTH_FLOWS_FILE = "truth_flows.csv"
GRAVITY_FILE = "gravity.json"
HYBRID_FILE = "hybrid.json"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Declarative description of a run. Paths are relative to the config file."""

    airports: str | None = None
    regions: str | None = None
    traces: str | None = None
    itineraries: str | None = None
    commutes: str | None = None
    population: str | None = None
    merge_threshold_km: float = geo.DEFAULT_MERGE_KM
    truth: str | None = None
    trace_min_km: float | None = None
    trace_max_km: float | None = None
    kind: str = "power"
    schemes: list = field(default_factory=lambda: ["kfold"])
    k: int = 10
    meridian_lon: float = -102.0
    fractions: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    repeats: int = 10
    thresholds: list = field(default_factory=lambda: [0.0])
    ratio_bins: list = field(default_factory=lambda: [0.0, 500.0, 1000.0, 2000.0, 5000.0])
    ratio_min_flow: float = 100.0
    cpc_distance_edges: list = field(default_factory=lambda: [0.0, 100.0, 1000.0, 5000.0])
    cpc_population_edges: list = field(default_factory=lambda: [0.0, 1e4, 1e5, 1e6, 1e8])
    seed: int = 0
    out: str = "out"
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc.strerror)) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config %s is not valid JSON: %s" % (path, exc)) from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError("unknown config keys: %s" % ", ".join(unknown))
        cfg = cls(**raw, base_dir=path.parent)
        cfg.validate()
        return cfg

    def validate(self):
        if self.airports and self.regions:
            raise ConfigError("give either airports or regions, not both")
        try:
            DeterrenceKind(self.kind)
        except ValueError:
            raise ConfigError("kind must be 'power' or 'exponential'") from None
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError("unknown scheme(s) %s; valid schemes: %s" % (", ".join(bad), ", ".join(SCHEMES)))
        if self.truth not in (None, "air", "commute"):
            raise ConfigError("truth must be 'air' or 'commute'")
        if self.seed is None:
            self.seed = 0

    def path(self, name) -> Path:
        value = getattr(self, name)
        if value is None:
            raise ConfigError("config has no %r input" % name)
        p = Path(value)
        p = p if p.is_absolute() else self.base_dir / p
        if not p.exists():
            raise ConfigError("input file not found: %s" % p)
        return p

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def truth_kind(self):
        if self.truth:
            return self.truth
        return "air" if self.itineraries else "commute"


def _read(path):
    return open(path, encoding="utf-8", newline="")


def _artifact(cfg, name) -> Path:
    p = cfg.out_dir / name
    if not p.exists():
        raise ConfigError("missing artifact %s; run the earlier stage first" % p)
    return p


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _report_diagnostics(what, diags):
    for d in diags[:10]:
        print("%s: %s" % (what, d), file=sys.stderr)
    if len(diags) > 10:
        print("%s: ... %d more rejected rows" % (what, len(diags) - 10), file=sys.stderr)


# --- stages -----------------------------------------------------------------

def cmd_tessellate(cfg: RunConfig):
    if cfg.regions:
        with _read(cfg.path("regions")) as fh:
            basins = geo.read_regions(fh).as_basins()
    else:
        with _read(cfg.path("airports")) as fh:
            airports = geo.read_airports(fh)
        if not airports:
            raise FlowstackError("airport list is empty")
        basins = geo.merge_airports(airports, cfg.merge_threshold_km)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / BASINS_FILE, "w", encoding="utf-8", newline="") as fh:
        geo.write_basins(basins, fh)
    with open(out / DISTANCES_FILE, "w", encoding="utf-8", newline="") as fh:
        DistanceTable.from_points(basins.representatives()).to_csv(fh)
    print("%d basins" % len(basins))
    return basins


def _load_basins(cfg):
    with _read(_artifact(cfg, BASINS_FILE)) as fh:
        return geo.read_basins(fh)


def _distances(basins):
    return DistanceTable.from_points(basins.representatives())


def cmd_build_flows(cfg: RunConfig):
    basins = _load_basins(cfg)
    nodes = basins.ids
    node_set = set(nodes)
    d = _distances(basins)
    out = cfg.out_dir

    if cfg.traces:
        with _read(cfg.path("traces")) as fh:
            traces, diags = ingest.parse_traces(fh)
        _report_diagnostics("traces", diags)
        if cfg.regions:
            with _read(cfg.path("regions")) as fh:
                assign = geo.make_assigner(geo.read_regions(fh))
        else:
            assign = geo.make_assigner(basins)
        raw = build_trace_flows(traces, assign, nodes)
        f = filter_by_distance(raw, d, cfg.trace_min_km, cfg.trace_max_km)
        print("trace flows: %d entries (%d before distance filter), %d points dropped"
              % (len(f), len(raw), raw.dropped))
    else:
        f = FlowMatrix(node_ids=nodes)
        print("trace flows: no trace input")
    _write_text(out / TRACE_FLOWS_FILE, f.to_csv_string())

    truth_kind = cfg.truth_kind
    if truth_kind == "air":
        with _read(cfg.path("itineraries")) as fh:
            itineraries, diags = ingest.parse_itineraries(fh)
        _report_diagnostics("itineraries", diags)

        def node_of(airport):
            try:
                return basins.basin_of(airport)
            except KeyError:
                raise FlowstackError("airport %r is not in the tessellation" % (airport,)) from None

        truth = build_air_truth(itineraries, node_of, nodes)
    else:
        with _read(cfg.path("commutes")) as fh:
            records, diags = ingest.parse_commutes(fh)
        _report_diagnostics("commutes", diags)
        unknown = sorted({r for c in records for r in (c.home_region_id, c.work_region_id)} - node_set)
        if unknown:
            raise FlowstackError("commute regions not in the tessellation: %s" % ", ".join(unknown[:5]))
        truth = build_commute_truth(records, nodes)
    _write_text(out / TRUTH_FLOWS_FILE, truth.to_csv_string())
    print("%s truth: %d entries, total %s" % (truth_kind, len(truth), _fmt(truth.total())))
    return f, truth


def load_population(cfg, basins):
    """Population per node; airport ids are folded into their basin."""
    with _read(cfg.path("population")) as fh:
        table, diags = ingest.parse_population(fh)
    _report_diagnostics("population", diags)
    ids = set(basins.ids)
    totals, unknown = {}, []
    for node, value in table.items():
        if node not in ids:
            try:
                node = basins.basin_of(node)
            except KeyError:
                unknown.append(node)
                continue
        totals[node] = totals.get(node, 0.0) + value
    if unknown:
        print("population: ignoring %d unknown node ids" % len(unknown), file=sys.stderr)
    return ingest.PopulationTable(totals)


def _load_stage_inputs(cfg):
    basins = _load_basins(cfg)
    with _read(_artifact(cfg, TRUTH_FLOWS_FILE)) as fh:
        truth = read_flow_csv(fh)
    with _read(_artifact(cfg, TRACE_FLOWS_FILE)) as fh:
        f = read_flow_csv(fh)
    pop = load_population(cfg, basins)
    return basins, truth, f, pop


def _fmt(x):
    return "%.10g" % x


def cmd_fit(cfg: RunConfig):
    basins, truth, f, pop = _load_stage_inputs(cfg)
    d = _distances(basins)
    gravity = fit_gravity(truth, pop, d, cfg.kind)
    g = predict_gravity(gravity, pop, d, truth.pairs())
    hybrid = fit_hybrid(truth, g, f, gravity)
    out = cfg.out_dir
    with open(out / GRAVITY_FILE, "w", encoding="utf-8") as fh:
        dump_params(gravity, fh)
    with open(out / HYBRID_FILE, "w", encoding="utf-8") as fh:
        dump_params(hybrid, fh)
    print("gravity (%s): K=%s alpha=%s gamma=%s beta=%s" % (
        gravity.kind.value, _fmt(gravity.K), _fmt(gravity.alpha), _fmt(gravity.gamma), _fmt(gravity.beta)))
    print("hybrid: A=%s B=%s" % (_fmt(hybrid.A), _fmt(hybrid.B)))
    return gravity, hybrid


def _write_report(cfg, report: EvalReport, curve_columns=None):
    out = cfg.out_dir
    _write_text(out / ("report_%s.json" % report.scheme), report.to_json())
    for name in sorted(report.curves):
        columns = (curve_columns or {}).get(name)
        _write_text(out / ("curve_%s_%s.csv" % (report.scheme, name)), report.curve_csv(name, columns))


def cmd_evaluate(cfg: RunConfig):
    basins, truth, f, pop = _load_stage_inputs(cfg)
    d = _distances(basins)
    inputs = EvalInputs(pop, d, f, cfg.kind)
    reports = []
    kfold = None

    def cross_validated():
        nonlocal kfold
        if kfold is None:
            kfold = kfold_cv(truth, inputs, cfg.k, cfg.seed)
        return kfold

    for scheme in cfg.schemes:
        try:
            if scheme == "kfold":
                report = cross_validated()
                for name, pred in sorted(report.predictions.items()):
                    _write_text(cfg.out_dir / ("predictions_kfold_%s.csv" % name), pred.to_csv_string())
                _write_report(cfg, report)
            elif scheme == "spatial":
                report = spatial_cv(truth, basins.representatives(), inputs, cfg.meridian_lon, cfg.seed)
                _write_report(cfg, report)
            elif scheme == "learning-curve":
                report = learning_curve(truth, inputs, cfg.fractions, cfg.repeats, cfg.seed)
                cols = ["fraction", "mean_r2", "q1", "q3"]
                _write_report(cfg, report, {m: cols for m in report.curves})
            elif scheme == "thresholded-r2":
                curves, omitted = thresholded_r2(truth, cross_validated().predictions, cfg.thresholds)
                report = EvalReport(scheme, cfg.seed, curves=curves,
                                    extra={"omitted_thresholds": omitted, "source": "kfold"})
                _write_report(cfg, report, {m: ["threshold", "r2", "n"] for m in curves})
            elif scheme == "ratio-curve":
                bins = {m: ratio_vs_distance(truth, p, d, cfg.ratio_min_flow, cfg.ratio_bins)
                        for m, p in cross_validated().predictions.items()}
                curves = {m: [[(b["lo"] + b["hi"]) / 2, b["median"], b["q1"], b["q3"]] for b in rows]
                          for m, rows in bins.items()}
                report = EvalReport(scheme, cfg.seed, curves=curves,
                                    extra={"bins": bins, "min_flow": cfg.ratio_min_flow, "source": "kfold"})
                _write_report(cfg, report, {m: ["distance_km", "median", "q1", "q3"] for m in curves})
            else:  # cpc-grid
                grid = cpc_grid(truth, cross_validated().predictions, d, pop,
                                cfg.cpc_distance_edges, cfg.cpc_population_edges)
                report = EvalReport(scheme, cfg.seed, extra={"grid": grid, "source": "kfold"})
                _write_report(cfg, report)
        except FlowstackError as exc:
            raise FlowstackError("scheme %s: %s" % (scheme, exc)) from exc
        reports.append(report)
        print(_summary(report))
    return reports


def _summary(report):
    if not report.metrics:
        return "%s: written" % report.scheme
    parts = []
    for model in sorted(report.metrics):
        m = report.metrics[model]
        parts.append("%s rho=%s r2=%s" % (model, _opt(m["pearson"]), _opt(m["r_squared"])))
    return "%s: %s" % (report.scheme, "; ".join(parts))


def _opt(x):
    return "n/a" if x is None else "%.4f" % x


def cmd_pipeline(cfg: RunConfig):
    cmd_tessellate(cfg)
    cmd_build_flows(cfg)
    cmd_fit(cfg)
    return cmd_evaluate(cfg)


COMMANDS = {
    "tessellate": cmd_tessellate,
    "build-flows": cmd_build_flows,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="flowstack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = os.path.abspath(args.out)
        COMMANDS[args.command](cfg)
    except (ConfigError, ParseError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (FlowstackError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
