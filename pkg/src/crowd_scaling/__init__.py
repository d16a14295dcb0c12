"""Portfolio scaling laws and stochastic asset selection for fund-holdings snapshots."""

__version__ = "0.1.0"

from .estimators import (
    LoessCurve,
    LoessRegressor,
    NoBreakError,
    PowerLawFit,
    PowerLawRegressor,
    SegmentedFit,
    SegmentedRegressor,
    fit_power_law,
    fit_segmented,
    loess_fit,
)
from .ingestion import (
    EmptyAfterFilteringError,
    FilterConfig,
    FilterReport,
    MissingHeaderError,
    apply_filters,
    load_snapshot,
    save_snapshot,
)
from .metrics import (
    BetaFit,
    BetaKernel,
    EntropyRecord,
    FmaxRecord,
    SelectionModel,
    calibrate,
    fit_beta,
    fmax,
    restricted_entropy,
    scaled_entropy,
    selection_density,
)
from .simulator import (
    EntropyCurve,
    SimConfig,
    SimulatedUniverse,
    SyntheticParams,
    VolatilityConfig,
    entropy_under_volatility,
    generate_synthetic_universe,
    simulate_universe,
)
from .universe import (
    FundRecord,
    SecurityRecord,
    UniverseSnapshot,
    build_snapshot,
    scaled_capitalization_ranks,
)
