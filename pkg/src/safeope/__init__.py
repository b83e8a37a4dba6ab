"""Safety-constrained variance-minimizing behavior policies for off-policy
evaluation in finite-horizon tabular CMDPs."""

__version__ = "0.1.0"

from .cmdp import Cmdp, TabularPolicy, Trajectory, make_rng, validate_cmdp  # noqa: E402
from .dp import expected_cost, expected_return, pdis_variance_closed_form, total_variance  # noqa: E402
from .synth import SafetyConfig, SolverConfig, synthesize_odi, synthesize_scope  # noqa: E402

__all__ = [
    "Cmdp", "TabularPolicy", "Trajectory", "make_rng", "validate_cmdp",
    "expected_cost", "expected_return", "pdis_variance_closed_form", "total_variance",
    "SafetyConfig", "SolverConfig", "synthesize_odi", "synthesize_scope",
]
