"""Small fully-specified environments bundled with the toolkit.

Every environment exposes the same tabular interface:

* ``initial_state()`` / ``reset(rng)`` — fixed start state,
* ``step(state, action, rng)`` -> ``(next_state, done)``,
* ``transitions(state, action)`` -> tuple of ``(prob, next_state, done)``
  (the exact model, used by value iteration and product construction),
* ``labels(state, action, next_state)`` -> frozenset of propositions,
* ``states()`` — full state enumeration.

Labels are a deterministic function of the transition: propositions of the
landed state (``at_green``, ``a`` …) plus event propositions for the step on
which they happen (``pick_pass``, ``drop_off``).  Rewards come from reward
machines layered on top, never from the environment itself.

Stochastic environments draw exactly one ``rng.random()`` per step, so runs
are reproducible across interpreters given the same seed.
"""

import importlib.resources


class TabularEnv:
    """Shared plumbing for the bundled environments."""

    name = "env"
    props = ()
    n_actions = 0
    action_names = ()

    def initial_state(self):
        raise NotImplementedError

    def reset(self, rng=None):
        # starts are deterministic; rng accepted for interface uniformity
        return self.initial_state()

    def transitions(self, state, action):
        raise NotImplementedError

    def step(self, state, action, rng):
        outcomes = self.transitions(state, action)
        if len(outcomes) == 1:
            return outcomes[0][1], outcomes[0][2]
        r = rng.random()
        acc = 0.0
        for prob, nxt, done in outcomes:
            acc += prob
            if r < acc:
                return nxt, done
        return outcomes[-1][1], outcomes[-1][2]

    def labels(self, state, action, next_state):
        raise NotImplementedError

    def states(self):
        raise NotImplementedError


class Grid2x2(TabularEnv):
    """Four cells in a square; deterministic moves, bumps stay put.

        s1 s2
        s0 s3

    Entering s1 emits ``p``, entering s3 emits ``q``.
    """

    name = "grid2x2"
    props = ("p", "q")
    n_actions = 4
    action_names = ("up", "right", "down", "left")

    _MOVES = {
        (0, 0): 1, (0, 1): 3,            # s0: up -> s1, right -> s3
        (1, 1): 2, (1, 2): 0,            # s1: right -> s2, down -> s0
        (2, 2): 3, (2, 3): 1,            # s2: down -> s3, left -> s1
        (3, 0): 2, (3, 3): 0,            # s3: up -> s2, left -> s0
    }

    def initial_state(self):
        return 0

    def transitions(self, state, action):
        nxt = self._MOVES.get((state, action), state)
        return ((1.0, nxt, False),)

    def labels(self, state, action, next_state):
        if next_state == 1:
            return frozenset({"p"})
        if next_state == 3:
            return frozenset({"q"})
        return frozenset()

    def states(self):
        return (0, 1, 2, 3)


class Line3(TabularEnv):
    """Three cells in a row with a single action that moves right (the last
    cell absorbs).  Entering the rightmost cell emits ``p``."""

    name = "line3"
    props = ("p",)
    n_actions = 1
    action_names = ("right",)

    def initial_state(self):
        return 0

    def transitions(self, state, action):
        return ((1.0, min(state + 1, 2), False),)

    def labels(self, state, action, next_state):
        return frozenset({"p"}) if next_state == 2 else frozenset()

    def states(self):
        return (0, 1, 2)


class Taxi(TabularEnv):
    """5x5 taxi world with the classic wall layout.

    The passenger waits at red (0,0) and wants to go to blue (4,3); the taxi
    starts at (2,2).  State is ``(row, col, status)`` with status 0 = waiting,
    1 = in taxi, 2 = delivered.  Moves are deterministic; bumping a wall or
    the border stays put.  Pickup/dropoff only change anything when legal;
    a successful dropoff ends the episode.
    """

    name = "taxi"
    props = ("in_taxi", "at_green", "at_dest", "pick_pass", "drop_off")
    n_actions = 6
    action_names = ("south", "north", "east", "west", "pickup", "dropoff")

    PASSENGER = (0, 0)   # red
    GREEN = (0, 4)
    DEST = (4, 3)        # blue
    START = (2, 2)

    # pairs of horizontally adjacent cells with a wall between them
    _WALLS = frozenset({
        ((0, 1), (0, 2)), ((1, 1), (1, 2)),
        ((3, 0), (3, 1)), ((3, 2), (3, 3)),
        ((4, 0), (4, 1)), ((4, 2), (4, 3)),
    })

    def initial_state(self):
        return (*self.START, 0)

    def _blocked(self, a, b):
        return (a, b) in self._WALLS or (b, a) in self._WALLS

    def transitions(self, state, action):
        row, col, status = state
        if action < 4:
            dr, dc = ((1, 0), (-1, 0), (0, 1), (0, -1))[action]
            nr, nc = row + dr, col + dc
            if not (0 <= nr < 5 and 0 <= nc < 5):
                nr, nc = row, col
            elif dc and self._blocked((row, col), (nr, nc)):
                nr, nc = row, col
            return ((1.0, (nr, nc, status), False),)
        if action == 4:  # pickup
            if status == 0 and (row, col) == self.PASSENGER:
                return ((1.0, (row, col, 1), False),)
            return ((1.0, state, False),)
        # dropoff
        if status == 1 and (row, col) == self.DEST:
            return ((1.0, (row, col, 2), True),)
        return ((1.0, state, False),)

    def labels(self, state, action, next_state):
        row, col, status = next_state
        out = set()
        if status == 1:
            out.add("in_taxi")
        if (row, col) == self.GREEN:
            out.add("at_green")
        if (row, col) == self.DEST:
            out.add("at_dest")
        if state[2] == 0 and status == 1:
            out.add("pick_pass")
        if state[2] == 1 and status == 2:
            out.add("drop_off")
        return frozenset(out)

    def states(self):
        return tuple(
            (r, c, p) for r in range(5) for c in range(5) for p in range(3)
        )


DEFAULT_LAKE_MAP = "lake8x8.map"
_LAKE_CHARS = set("SFHABC")


def parse_lake_map(text):
    """Parse a lake layout: one row per line, charset S/F/H/A/B/C, exactly one
    S and one each of A, B, C.  Returns (rows, start, goals, holes)."""
    rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not rows or len(set(map(len, rows))) != 1:
        raise ValueError("lake map must be a non-empty rectangle")
    cells = {}
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch not in _LAKE_CHARS:
                raise ValueError(f"bad map character {ch!r} at {(r, c)}")
            cells.setdefault(ch, []).append((r, c))
    for ch in "SABC":
        if len(cells.get(ch, [])) != 1:
            raise ValueError(f"map needs exactly one {ch!r}")
    start = cells["S"][0]
    goals = {"a": cells["A"][0], "b": cells["B"][0], "c": cells["C"][0]}
    holes = frozenset(cells.get("H", []))
    return rows, start, goals, holes


class FrozenLake(TabularEnv):
    """Slippery grid walk over a fixed map (default 8x8, three goals, ten
    holes).

    Actions succeed with probability 0.8 and slip to each perpendicular
    direction with probability 0.1; moves off the map stay put.  Landing on a
    goal emits its letter, landing on a hole emits ``h``.  The environment
    itself never ends an episode — the reward machine on top decides what a
    hole means.
    """

    name = "frozen_lake"
    props = ("a", "b", "c", "h")
    n_actions = 4
    action_names = ("left", "down", "right", "up")

    _DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))

    def __init__(self, map_text=None):
        if map_text is None:
            map_text = (
                importlib.resources.files("trmlab")
                .joinpath("data").joinpath(DEFAULT_LAKE_MAP)
                .read_text()
            )
        self.rows, self.start, self.goals, self.holes = parse_lake_map(map_text)
        self.height = len(self.rows)
        self.width = len(self.rows[0])
        self._goal_at = {pos: name for name, pos in self.goals.items()}

    def initial_state(self):
        return self.start

    def _move(self, state, direction):
        dr, dc = self._DIRS[direction]
        nr, nc = state[0] + dr, state[1] + dc
        if 0 <= nr < self.height and 0 <= nc < self.width:
            return (nr, nc)
        return state

    def transitions(self, state, action):
        outcomes = []
        # intended direction first, then the two perpendicular slips
        for direction, prob in (
            (action, 0.8),
            ((action - 1) % 4, 0.1),
            ((action + 1) % 4, 0.1),
        ):
            outcomes.append((prob, self._move(state, direction), False))
        return tuple(outcomes)

    def labels(self, state, action, next_state):
        out = set()
        if next_state in self._goal_at:
            out.add(self._goal_at[next_state])
        if next_state in self.holes:
            out.add("h")
        return frozenset(out)

    def states(self):
        return tuple(
            (r, c) for r in range(self.height) for c in range(self.width)
        )


def make_env(name, map_text=None):
    """Environment registry used by the command-line tools."""
    if name == "grid2x2":
        return Grid2x2()
    if name == "line3":
        return Line3()
    if name == "taxi":
        return Taxi()
    if name == "frozen_lake":
        return FrozenLake(map_text)
    raise ValueError(
        f"unknown environment {name!r} "
        "(expected grid2x2, line3, taxi, or frozen_lake)"
    )
