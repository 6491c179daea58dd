"""Timed reward machines: specification and parsing, timed product MDPs over
digital / uniformly discretized / corner-point time, and delay-aware tabular
Q-learning with counterfactual imagining.

The usual entry points are re-exported here; the submodules hold the rest
(``machine`` for semantics, ``regions`` for the clock abstraction,
``product`` for the MDP compositions, ``learning`` for the algorithms,
``cli`` for the command line).
"""

from .bundled import BUNDLED, DEFAULT_ENV, bundled_trm
from .envs import make_env
from .learning import (
    LearnerConfig,
    QTable,
    corner_adjust,
    evaluate,
    train,
    value_iteration,
)
from .machine import (
    DIGITAL,
    REALTIME,
    NoMatchError,
    Trajectory,
    TrajStep,
    TrmError,
    discounted_return,
    max_constants,
    parse_trm,
    trm_run,
)
from .product import make_product

__version__ = "0.1.0"

__all__ = [
    "BUNDLED",
    "DEFAULT_ENV",
    "DIGITAL",
    "REALTIME",
    "LearnerConfig",
    "NoMatchError",
    "QTable",
    "Trajectory",
    "TrajStep",
    "TrmError",
    "bundled_trm",
    "corner_adjust",
    "discounted_return",
    "evaluate",
    "make_env",
    "make_product",
    "max_constants",
    "parse_trm",
    "train",
    "trm_run",
    "value_iteration",
]
