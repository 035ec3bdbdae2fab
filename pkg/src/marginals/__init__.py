"""Sampling p-th moments of all one-dimensional marginals of a random vector,
with the operator-norm, rearrangement and decoupling tools around it."""

__version__ = "0.1.0"

from .dist import (DistributionSpec, ModelParams, SampleMatrix, check_assumptions,
                   exact_moment, moment_mc_oracle, sample_matrix)
from .rng import Stream
from .sphere import SolverConfig
from .norms import (check_norm_theorem, gram_offdiag_check, nonincreasing_rearrangement,
                    opnorm_l2_l2inf, opnorm_l2_lp, projected_subset_norm,
                    rearrangement_bound_check, rearrangement_failure_rate, weak_l2_norm)
from .estimate import (choose_B, deviation_decomposition, deviation_sup, empirical_moment,
                       large_coeff_diag, truncated_estimate, truncation_threshold)
from .decouple import (DecouplingInput, decouple, min_norm_hull_point, separating_direction,
                       verify_certificate)
