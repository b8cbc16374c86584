"""Provider profiling with generalized partially linear models.

Set ``GPLMPROF_THREADS`` before import to cap the BLAS thread count.
"""

import os as _os

if "GPLMPROF_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["GPLMPROF_THREADS"])

from .exact import (  # noqa: E402
    DegenerateTestError, ProviderNullModel, TestResult, conditional_cdf, exact_confidence_interval,
    exact_mid_p, flag_provider, poisson_binomial_cdf, poisson_binomial_pmf, population_norm,
    score_statistic, sub_cdf, wald_statistic,
)
from .funnel import (  # noqa: E402
    FunnelPoint, OverdispersionFit, adjusted_control_limits, fit_empirical_null, flag_rate, funnel_points,
    interpolated_control_limits, precision, standardized_ratio, z_scores,
)
from .io import ModelArtifact, load_artifact, load_panel, save_artifact, save_panel  # noqa: E402
from .model import (  # noqa: E402
    DropoutSpec, NetworkParams, NetworkTopology, OutcomeFamily, ProviderBlock, ProviderPanel,
    ShapeError, backward, forward, init_params, predictor,
)
from .optim import FitResult, TrainConfig, fit  # noqa: E402
from .profile import null_models, profile_providers  # noqa: E402

__version__ = "0.1.0"
