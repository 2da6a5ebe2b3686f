"""R2D2 priors for generalized linear mixed models.

A Beta(a, b) prior on the coefficient of determination induces a prior on
the global variance W of the linear predictor. This package provides the
exact induced priors where closed forms exist, quantile-grid / linear /
generalized-beta-prime approximations elsewhere, a Metropolis-within-Gibbs
GLMM sampler, simulation-study drivers, and a CLI.
"""

from .families import (
    DEFAULT_THETA,
    LinearPredictorLaw,
    ModelFamily,
    R2PriorSpec,
    canonical_link,
    default_family,
    mean_fn,
    mean_prime,
    r2_bounds,
    r2_exact,
    r2_grad,
    var_fn,
    weibull_r2_max,
)
from .distributions import (
    DirichletSpec,
    GbpParams,
    beta4_cdf,
    beta4_logpdf,
    beta4_pdf,
    beta4_sample,
    dirichlet_sample,
    gbp_cdf,
    gbp_logpdf,
    gbp_mean,
    gbp_pdf,
    gbp_quantile,
    gbp_sample,
    gbp_sqrt_law,
)
from .exact import InducedPrior, induced_logpdf, induced_pdf, induced_sample, origin_limit
from .approx import (
    EmpiricalMixture,
    QmcConfig,
    linear_s2,
    qmc_moments,
    qmc_pdf,
    qmc_r2,
    qmc_r2_curve,
)
from .gbpfit import (
    FitConfig,
    FitResult,
    ThetaEstimate,
    chi2_divergence,
    estimate_beta0,
    estimate_theta_mle,
    fit_gbp,
)
from .mcmc import (
    GlmmSpec,
    GroupSpec,
    HorseshoePrior,
    McmcConfig,
    PCPrior,
    PosteriorSamples,
    R2D2Prior,
    SpatialExponential,
    VaguePrior,
    build_model,
    effective_samples_per_second,
    posterior_r2n,
    run_chain,
)
from .dataio import (
    CsvSchema,
    Dataset,
    exp_correlation,
    load_csv,
    spatial_distances,
)
from .simulate import (
    MetricsRow,
    StudyConfig,
    gen_gaussian_re,
    gen_logistic_sparse,
    gen_poisson_mixed,
    metrics,
    run_study,
)

__version__ = "0.1.0"
