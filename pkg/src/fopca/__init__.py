"""Fixed-order PCA for factor models with an overestimated number of factors."""

from .diagnostics import (
    ExtraSpectrumReport,
    ProbeSet,
    RateFit,
    boundary_case_r0,
    noise_cross_terms,
    extra_spectrum,
    fit_bulk,
    lowrank_error,
    make_probes,
    rate_regression,
    weyl_margins,
)
from .errors import (
    DegeneracyWarning,
    FopcaError,
    InputError,
    DimensionError,
    NumericError,
    SingularVarianceError,
    WeakInstrumentError,
)
from .inference import (
    InferenceResult,
    RegressionData,
    hc0_sandwich,
    iv_estimate,
    ols_estimate,
    residualize,
    robustness_profile,
)
from .montecarlo import DgpConfig, McSummary, generate, ks_test_normal, run_experiment, summarize
from .mplaw import MpLaw, SpectralMeasure, check_regularity, density, solve_law, typical_locations
from .panel import (
    CanonicalRotation,
    FactorStructure,
    Panel,
    SvdTriple,
    canonical_normalization,
    demean_columns,
    svd_top,
)
from .pca import (
    PcaFit,
    RotationPair,
    compressed_rotation,
    expanded_rotation,
    factor_alignment,
    fit,
    split,
)

__version__ = "0.1.0"
