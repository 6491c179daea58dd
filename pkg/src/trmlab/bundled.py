"""Bundled reward machines and their default environment pairings.

``trm1``/``trm3`` target the taxi world, ``trm2``/``trm4`` the frozen lake,
``window`` the three-cell line, and ``pq`` the 2x2 grid.  All except ``pq``
ship as ``.trm`` files; ``pq`` needs per-cell waiting costs that the file
format's constant state rewards can't express, so it is built in code.
"""

import importlib.resources

from .machine import parse_trm

# waiting cost per grid2x2 cell, shared by every non-terminal machine state
GRID_CELL_COSTS = {0: -2.0, 1: -1.0, 2: -4.0, 3: -1.0}

_FILES = ("window", "trm1", "trm2", "trm3", "trm4")

BUNDLED = ("pq",) + _FILES

# which bundled environment each machine was written against
DEFAULT_ENV = {
    "pq": "grid2x2",
    "window": "line3",
    "trm1": "taxi",
    "trm2": "frozen_lake",
    "trm3": "taxi",
    "trm4": "frozen_lake",
}

_PQ_TEXT = """
states: u0 u1 u2
initial: u0
terminal: u2
clocks: x
props: p q
trans: u0 -> u0 | label=empty | reward=0
trans: u0 -> u1 | label=p | guard=x>2 | reward=5
trans: u1 -> u1 | label=empty | reward=0
trans: u1 -> u2 | label=q | guard=x>5 | reward=10
"""


def _pq():
    trm = parse_trm(_PQ_TEXT, name="pq")
    for u in ("u0", "u1"):
        trm.state_rewards[u] = dict(GRID_CELL_COSTS)
    return trm


def bundled_source(name):
    """The .trm text of a bundled machine (pq has no file form)."""
    if name not in _FILES:
        raise ValueError(f"no bundled file for {name!r}")
    return (
        importlib.resources.files("trmlab")
        .joinpath("data").joinpath(f"{name}.trm")
        .read_text()
    )


def bundled_trm(name):
    """Load a bundled machine by name (see BUNDLED for the list)."""
    if name == "pq":
        return _pq()
    if name in _FILES:
        return parse_trm(bundled_source(name), name=name)
    raise ValueError(f"unknown bundled machine {name!r} (have {BUNDLED})")
