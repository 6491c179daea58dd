"""Product decision processes: an environment composed with a reward machine.

Two constructions share one step contract:

* ``TickProduct`` — machine clocks kept as exact integer tick counts on a
  1/kappa grid (kappa=1 is plain digital time).  The agent picks a delay from
  the grid plus an environment action; guards are checked at the elapsed
  valuation, state rewards accrue over the waiting time, and the discount for
  a step spanning ``d`` time units of waiting plus one unit of acting is
  ``gamma**(d+1)``.
* ``CornerProduct`` — clock state abstracted to a corner configuration
  (region + corner point).  The agent picks an integral delay, a number of
  region boundaries to cross, and an environment action; guards are answered
  by whole regions and waiting costs accrue in continuous time.

Values past a clock's relevance bound collapse to infinity in both, which
keeps the state space finite without changing any guard's answer.

A step where no machine edge matches the emitted label ends the episode with
a configurable penalty and is flagged invalid rather than silently patched.
"""

import math
from collections import deque, namedtuple
from fractions import Fraction

import numpy as np

from .machine import DIGITAL, REALTIME, max_constants
from .regions import (
    CornerConfiguration,
    advance,
    corners,
    initial_configuration,
    region_satisfies,
    reset_corner,
    reset_region,
)

INF = math.inf

# next_state is None when no machine edge matched (invalid=True); terminal
# means the machine reached an accepting state, env_done that the environment
# itself ended the episode (horizon cuts count as neither)
StepOutcome = namedtuple(
    "StepOutcome",
    "next_state reward done terminal invalid delay_units labels transition "
    "env_done",
)


def _accrual_factor(d, gamma, semantics):
    """Multiplier for a state reward accrued while waiting d time units."""
    if d == 0:
        return 0.0
    if semantics == DIGITAL:
        return (1.0 - gamma ** d) / (1.0 - gamma)
    return (1.0 - gamma ** float(d)) / (-math.log(gamma))


class TickProduct:
    """Environment x machine with clocks in integer ticks of size 1/kappa.

    Delay actions are the full tick grid {0, 1/k, ..., M_d} unless an explicit
    ``delay_ticks`` tuple is given (the reward-machine interpretation passes
    ``(0,)``).  Action encoding is delay-major: ``delay_index * n_env_actions
    + env_action``.
    """

    kind = "tick"

    def __init__(self, trm, env, gamma, kappa=1, delay_ticks=None,
                 no_match_penalty=0.0):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if kappa < 1 or kappa != int(kappa):
            raise ValueError("kappa must be a positive integer")
        self.trm = trm
        self.env = env
        self.gamma = gamma
        self.kappa = int(kappa)
        self.semantics = DIGITAL if self.kappa == 1 else REALTIME
        self.no_match_penalty = no_match_penalty
        mx, md = max_constants(trm)
        self.max_delay = md
        self.clocks = trm.clocks
        self.mx_ticks = tuple(mx[c] * self.kappa for c in self.clocks)
        if delay_ticks is None:
            delay_ticks = tuple(range(md * self.kappa + 1))
        self.delay_ticks = tuple(delay_ticks)
        self.n_env_actions = env.n_actions
        self.n_actions = len(self.delay_ticks) * env.n_actions
        self.props = frozenset(trm.props)

        # exact per-transition tick windows per clock: (lo, hi) closed, hi
        # None for unbounded; built from the normalized guard intervals
        self._windows = {}
        for t in trm.transitions:
            win = []
            for c in self.clocks:
                lo, lo_s, hi, hi_s = t.guard.intervals.get(
                    c, (0, False, None, False)
                )
                lo_t = lo * self.kappa + (1 if lo_s else 0)
                hi_t = None if hi is None else hi * self.kappa - (1 if hi_s else 0)
                win.append((lo_t, hi_t))
            self._windows[t.index] = tuple(win)

        # per-delay-index caches: delay in time units, step discount gamma^(d+1),
        # and the state-reward accrual factor for waiting d units
        self._delay_units = []
        self.delay_discount = []
        self.delay_accrual = []
        for ticks in self.delay_ticks:
            d = (
                ticks // self.kappa
                if ticks % self.kappa == 0
                else Fraction(ticks, self.kappa)
            )
            self._delay_units.append(d)
            self.delay_discount.append(gamma ** (float(d) + 1.0))
            self.delay_accrual.append(_accrual_factor(d, gamma, self.semantics))

        self._const_ureward = (
            None if trm.has_env_dependent_rewards() else dict(trm.state_rewards)
        )

    # -- state helpers ------------------------------------------------------

    def initial_state(self):
        return (self.env.initial_state(), self.trm.initial, (0,) * len(self.clocks))

    def decode(self, action):
        d_idx, a = divmod(action, self.n_env_actions)
        return self.delay_ticks[d_idx], a

    def delay_units(self, action):
        return self._delay_units[action // self.n_env_actions]

    def step_discount(self, action):
        """gamma**(d+1) for this action's wait-then-act span."""
        return self.delay_discount[action // self.n_env_actions]

    def legal_mask(self, state):
        return None  # every delay/action combination is available

    def state_reward(self, u, s):
        if self._const_ureward is not None:
            return self._const_ureward.get(u, 0.0)
        return self.trm.state_reward_at(u, s)

    # -- dynamics -----------------------------------------------------------

    def elapse(self, v, d_ticks):
        out = []
        for vi, m in zip(v, self.mx_ticks):
            e = vi + d_ticks + self.kappa
            out.append(INF if e > m else e)
        return tuple(out)

    def match(self, u, labels, elapsed):
        """The unique machine edge enabled at this label/valuation, or None."""
        for t in self.trm.matching_labels(u, labels):
            win = self._windows[t.index]
            if all(
                lo <= e and (hi is None or e <= hi)
                for e, (lo, hi) in zip(elapsed, win)
            ):
                return t
        return None

    def reset_ticks(self, elapsed, transition):
        return tuple(
            0 if c in transition.resets else e
            for c, e in zip(self.clocks, elapsed)
        )

    def _resolve(self, state, action, s2, env_done):
        s, u, v = state
        d_idx, a = divmod(action, self.n_env_actions)
        d_ticks = self.delay_ticks[d_idx]
        d_units = self._delay_units[d_idx]
        labels = frozenset(self.env.labels(s, a, s2)) & self.props
        elapsed = self.elapse(v, d_ticks)
        t = self.match(u, labels, elapsed)
        if t is None:
            return StepOutcome(
                None, self.no_match_penalty, True, False, True,
                d_units, labels, None, env_done,
            )
        v2 = self.reset_ticks(elapsed, t)
        reward = t.reward + self.delay_accrual[d_idx] * self.state_reward(u, s)
        terminal = t.target in self.trm.terminals
        return StepOutcome(
            (s2, t.target, v2), reward, env_done or terminal, terminal,
            False, d_units, labels, t, env_done,
        )

    def step(self, state, action, rng):
        _, a = self.decode(action)
        s2, env_done = self.env.step(state[0], a, rng)
        return self._resolve(state, action, s2, env_done)

    def transitions(self, state, action):
        """Exact model: tuple of (probability, StepOutcome)."""
        _, a = self.decode(action)
        return tuple(
            (prob, self._resolve(state, action, s2, env_done))
            for prob, s2, env_done in self.env.transitions(state[0], a)
        )


class CornerProduct:
    """Environment x machine over corner configurations.

    Actions are (delay, boundary-crossings, env action), encoded
    delay-major then sigma: ``(d_idx * n_sigmas + s_idx) * n_env + a``.
    Sigma ranges over -2|X| .. 2|X|; combinations whose region walk is
    undefined are masked out per configuration.  State rewards accrue in
    continuous time over the integral delay.
    """

    kind = "corner"

    def __init__(self, trm, env, gamma, no_match_penalty=0.0):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        self.trm = trm
        self.env = env
        self.gamma = gamma
        self.no_match_penalty = no_match_penalty
        mx, md = max_constants(trm)
        self.bounds = mx
        self.max_delay = md
        self.clocks = trm.clocks
        k = len(trm.clocks)
        self.delays = tuple(range(md + 1))
        self.sigmas = tuple(range(-2 * k, 2 * k + 1))
        self.n_env_actions = env.n_actions
        self.n_actions = len(self.delays) * len(self.sigmas) * env.n_actions
        self.props = frozenset(trm.props)
        self.delay_discount = [gamma ** (d + 1) for d in self.delays]
        self.delay_accrual = [
            _accrual_factor(d, gamma, REALTIME) for d in self.delays
        ]
        self._const_ureward = (
            None if trm.has_env_dependent_rewards() else dict(trm.state_rewards)
        )
        self._adv = {}     # (config, d, sigma) -> advanced config or None
        self._sat = {}     # (region, transition index) -> bool
        self._legal = {}   # config -> bool mask over the action encoding

    # -- state helpers ------------------------------------------------------

    def initial_state(self):
        return (
            self.env.initial_state(),
            self.trm.initial,
            initial_configuration(self.clocks, self.bounds),
        )

    def decode(self, action):
        rest, a = divmod(action, self.n_env_actions)
        d_idx, s_idx = divmod(rest, len(self.sigmas))
        return self.delays[d_idx], self.sigmas[s_idx], a

    def delay_units(self, action):
        return self.delays[action // (self.n_env_actions * len(self.sigmas))]

    def step_discount(self, action):
        return self.delay_discount[
            action // (self.n_env_actions * len(self.sigmas))
        ]

    def state_reward(self, u, s):
        if self._const_ureward is not None:
            return self._const_ureward.get(u, 0.0)
        return self.trm.state_reward_at(u, s)

    # -- dynamics -----------------------------------------------------------

    def advanced(self, config, d, sigma):
        """advance() with the one-unit action time folded in, memoized."""
        key = (config, d, sigma)
        try:
            return self._adv[key]
        except KeyError:
            out = advance(config, d + 1, sigma, self.bounds)
            self._adv[key] = out
            return out

    def region_allows(self, region, t):
        key = (region, t.index)
        try:
            return self._sat[key]
        except KeyError:
            out = region_satisfies(region, t.guard, self.bounds)
            self._sat[key] = out
            return out

    def legal_mask(self, state):
        config = state[2]
        mask = self._legal.get(config)
        if mask is None:
            mask = np.zeros(self.n_actions, dtype=bool)
            i = 0
            for d in self.delays:
                for sigma in self.sigmas:
                    ok = self.advanced(config, d, sigma) is not None
                    mask[i : i + self.n_env_actions] = ok
                    i += self.n_env_actions
            self._legal[config] = mask
        return mask

    def match(self, u, labels, region):
        for t in self.trm.matching_labels(u, labels):
            if self.region_allows(region, t):
                return t
        return None

    def apply_edge(self, moved, transition):
        """New configuration after firing an edge from an advanced one."""
        if not transition.resets:
            return moved
        return CornerConfiguration(
            reset_region(moved.region, transition.resets),
            reset_corner(moved.region, moved.corner, transition.resets),
        )

    def _resolve(self, state, action, s2, env_done):
        s, u, config = state
        d, sigma, a = self.decode(action)
        moved = self.advanced(config, d, sigma)
        if moved is None:
            raise ValueError(
                f"illegal action (d={d}, sigma={sigma}) from {config}"
            )
        labels = frozenset(self.env.labels(s, a, s2)) & self.props
        t = self.match(u, labels, moved.region)
        if t is None:
            return StepOutcome(
                None, self.no_match_penalty, True, False, True, d, labels,
                None, env_done,
            )
        new_config = self.apply_edge(moved, t)
        reward = t.reward + self.delay_accrual[d] * self.state_reward(u, s)
        terminal = t.target in self.trm.terminals
        return StepOutcome(
            (s2, t.target, new_config), reward, env_done or terminal,
            terminal, False, d, labels, t, env_done,
        )

    def step(self, state, action, rng):
        _, _, a = self.decode(action)
        s2, env_done = self.env.step(state[0], a, rng)
        return self._resolve(state, action, s2, env_done)

    def transitions(self, state, action):
        _, _, a = self.decode(action)
        return tuple(
            (prob, self._resolve(state, action, s2, env_done))
            for prob, s2, env_done in self.env.transitions(state[0], a)
        )


INTERPRETATIONS = ("digital", "discretized", "corner", "reward-machine")


def make_product(trm, env, interp="digital", gamma=0.999, kappa=1,
                 no_match_penalty=0.0):
    """Build a product for one of the four interpretations.

    ``digital`` uses unit time steps; ``discretized`` refines them to a
    1/kappa grid (kappa >= 2); ``reward-machine`` (alias ``rm``) is the
    delay-blind baseline — the digital product restricted to delay 0;
    ``corner`` is the corner-point abstraction (no tick grid applies).
    """
    if interp == "digital":
        if kappa != 1:
            raise ValueError("digital time has no tick grid; use discretized")
        return TickProduct(trm, env, gamma,
                           no_match_penalty=no_match_penalty)
    if interp == "discretized":
        if kappa < 2:
            raise ValueError("discretized interpretation needs kappa >= 2")
        return TickProduct(trm, env, gamma, kappa=kappa,
                           no_match_penalty=no_match_penalty)
    if interp in ("reward-machine", "rm"):
        if kappa != 1:
            raise ValueError("the reward-machine interpretation has no tick grid")
        return TickProduct(trm, env, gamma, kappa=1, delay_ticks=(0,),
                           no_match_penalty=no_match_penalty)
    if interp == "corner":
        if kappa != 1:
            raise ValueError("the corner interpretation has no tick grid")
        return CornerProduct(trm, env, gamma,
                             no_match_penalty=no_match_penalty)
    raise ValueError(
        f"unknown interpretation {interp!r} (expected one of {INTERPRETATIONS})"
    )


def explicit_states(product, limit=10 ** 6):
    """All product states reachable from the start by legal actions,
    following non-terminating outcomes.  Raises if the product exceeds
    ``limit`` states (guards against unbounded blowup)."""
    x0 = product.initial_state()
    seen = {x0}
    order = [x0]
    queue = deque([x0])
    while queue:
        x = queue.popleft()
        mask = product.legal_mask(x)
        for action in range(product.n_actions):
            if mask is not None and not mask[action]:
                continue
            for _, out in product.transitions(x, action):
                nxt = out.next_state
                if out.done or nxt is None or nxt in seen:
                    continue
                if len(seen) >= limit:
                    raise ValueError(
                        f"product exceeds {limit} reachable states"
                    )
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
    return order
