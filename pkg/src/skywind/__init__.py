"""Multi-layer wind velocity field estimation from thermal sky images.

The package tracks cloud motion in sequences of ground-based thermal images:
pixel temperatures are clustered by a beta mixture into cloud layers, weighted
Lucas-Kanade flow yields per-layer velocities, high-change pixels are pooled
over recent frames, layer velocity/height Gaussians are inferred by iterated
conditional modes, and a weighted epsilon-tube support vector regressor (with
optional zero-divergence flow constraints) extrapolates each layer's wind field
over the full frame, from which streamlines and potential lines follow.
"""

from .bemm import (
    BetaMixtureFit,
    NormalizedTemps,
    beta_logpdf,
    e_step,
    fit_em,
    layer_mean_height,
    m_step,
    normalize_temps,
)
from .errors import InputError, LayerEmptyError, SkywindError
from .evalharness import (
    CvSpec,
    FrameLabels,
    cross_validate,
    mae_wmae,
    mape_labels,
    selection_score,
)
from .flowfield import (
    DivCurl,
    GridField,
    StreamFunction,
    div_curl,
    extract_isolines,
    extrapolate,
    stream_potential,
)
from .imaging import (
    CloudMask,
    HeightField,
    HeightModel,
    LayerSpec,
    PixelGeometry,
    SceneSpec,
    ThermalFrame,
    height_map,
    pixel_geometry,
    synth_scene,
)
from .layers import LayerModel, icm_height, icm_velocity, order_layers
from .motionpool import (
    ChangeRank,
    PoolConfig,
    VectorPool,
    change_rank,
    push_frame,
    threshold_select,
)
from .optflow import FlowField, WlkConfig, derivatives, flow_per_layer, to_metric, wlk
from .pipeline import FrameResult, LayerResult, PipelineConfig, PipelineRun, run_pipeline
from .subsample import (
    SampleSet,
    build_sample_set,
    importance_weights,
    posteriors,
    sample_layer,
)
from .wsvr import (
    DualSolution,
    FlowConstraintOps,
    KernelSpec,
    SvrProblem,
    flow_constraint_ops,
    gram,
    grid_coordinates,
    predict,
    solve_mo_wsvm,
    solve_mo_wsvm_fc,
    solve_wsvm,
)

__version__ = "0.1.0"
