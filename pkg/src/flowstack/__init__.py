"""Origin-destination flow reconstruction and hybrid gravity/trace models."""

from .errors import (
    DegenerateSeriesError,
    FlowstackError,
    ParseError,
    RankDeficientError,
    TessellationError,
)
from .evaluation import (
    EvalInputs,
    EvalReport,
    cpc,
    cpc_grid,
    kfold_cv,
    learning_curve,
    pearson,
    r_squared,
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
    calibrate_threshold,
    filter_by_distance,
)
from .geo import (
    BasinSet,
    GeoPoint,
    RegionPolygons,
    assign_basin,
    assign_region,
    haversine_distance,
    merge_airports,
)
from .models import (
    DeterrenceKind,
    GravityModel,
    GravityParams,
    HybridFlowModel,
    HybridParams,
    TraceScaleModel,
    fit_gravity,
    fit_hybrid,
    loss,
    predict_gravity,
    predict_hybrid,
)

__version__ = "0.1.0"
