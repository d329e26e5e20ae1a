"""Layered reach-avoid control: robust MPC under a certified grid abstraction."""

__version__ = "0.1.0"

from .scenario import Scenario, load_scenario, parse_scenario  # noqa: E402
from .pipeline import build_context, estimate, evaluate_policy, run_pipeline, solve  # noqa: E402

__all__ = ["Scenario", "load_scenario", "parse_scenario", "build_context", "estimate", "solve",
           "evaluate_policy", "run_pipeline", "__version__"]
