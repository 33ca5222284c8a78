"""Path-dependent difference-in-differences with a partially observed treatment history."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, EmptyCellError, NonConvergenceError, NumericalError,
                     ParseError, PathDidError, SeparationError, SingularityError, ValidationError)
from .panel_data import (NEVER_TREATED, TARGET_PATHS, EstimandSpec, ObservationRecord, PanelSample,
                         Schema, TreatmentPath, load_csv, summarize, write_csv)
from .first_stage import NuisanceSet, fit_logit, fit_nuisances, fit_ols
from .estimators import (METHODS, BoundsResult, EstimateResult, aggregate_second_period,
                         compute_weights, estimate_cc, estimate_dr, estimate_ipw, estimate_many,
                         estimate_naive_prepost, estimate_or, estimate_robust,
                         estimate_weak_mar_ipw, partial_id_bounds)
from .inference import (TrueNuisance, VarianceResult, confidence_interval, efficient_influence,
                        estimate_robust_improved, improved_fit, influence_robust, seb_estimate)
from .simulation import (SCENARIOS, DgpConfig, generate_draw, generate_sample, power_curve,
                         replication_rng, run_monte_carlo, sweep_misspecification,
                         sweep_missingness, true_pdatt)
