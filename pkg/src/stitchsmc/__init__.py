"""Online fixed-lag particle smoothing by stitching, with a map-matching model."""

from .core import (
    AllWeightsZero,
    MissingBound,
    StateSpaceModel,
    TrajectorySample,
    WeightedSample,
    ess,
    make_rng,
    multinomial_indices,
    multinomial_resample,
)
from .stitch import (
    SmootherState,
    backward_simulation,
    ffbsi,
    fixed_lag_stitch,
    online_smoother_bsi_init,
    online_smoother_bsi_update,
    online_smoother_init,
    online_smoother_update,
    run_online,
    run_particle_filter,
    stitch_indices,
    stitch_weights,
)

__version__ = "0.1.0"
