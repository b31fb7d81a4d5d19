"""Numerical stochastic homogenization for variable-exponent fluid stress laws.

Subpackages follow the pipeline: random media generation (`media`), stress
laws and Orlicz norms (`varexp`), periodic cell correctors (`cell`),
Monte-Carlo effective-law estimation and verification (`effective`),
fine-scale and homogenized unsteady flow (`macro`), and orchestration
(`config`, `pipeline`, `reports`, `cli`).
"""

__version__ = "0.1.0"

from .media import (TorusGrid, PointSet, MediumRealization, sample_poisson_points,
                    voronoi_exponent_medium, poisson_voronoi_medium, mollify_exponent,
                    bernoulli_percolation_medium, laminate_medium, constant_medium,
                    checkerboard_medium, regenerate, birkhoff_identity_check)
from .varexp import (StressLaw, GrowthConstants, ConfigurationError, sym_dot, sym_norm,
                     stress_eval, stress_field, potential_eval, potential_field,
                     verify_growth, luxemburg_norm, modular, exponent_gate,
                     alpha0_of, alpha_star_of, tracefree_from_polar)
from .cell import (CorrectorSolution, solve_corrector, corrector_uniqueness_probe,
                   resolution_study, law_from_medium)
