"""Tabular Q-learning over product decision processes.

The update rule discounts by gamma^(d+1), the full span of waiting d time
units and acting for one.  Exploration is epsilon-greedy over the legal
actions of the current state.  Counterfactual imagining augments each realized
step with up to ``top_k`` synthesized experiences that replay the same
environment transition under alternative machine contexts — other machine
states, nearby clock valuations and different delays (tick products), or
nearby corner configurations and different delay/boundary choices (corner
products) — ranked by immediate reward.

Also here: exact value iteration over the explicit product (the oracle the
learner is judged against), greedy evaluation with an independent return
cross-check, metrics CSV writing, and the delay-adjustment construction that
pushes a real-time trajectory's decision times toward region boundaries
without losing return.
"""

import csv
import math
import random
from collections import namedtuple
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .machine import (
    TrajStep,
    Trajectory,
    discounted_return,
    max_constants,
    trm_step,
)
from .product import INF, explicit_states
from .regions import CornerConfiguration, corners, enumerate_regions

Experience = namedtuple(
    "Experience", "state action reward next_state delay terminal counterfactual"
)


@dataclass
class LearnerConfig:
    """Knobs for one training run; defaults follow the benchmark setup."""

    gamma: float = 0.999
    alpha0: float = 0.9
    epsilon0: float = 0.9
    decay: float = 0.999          # per-episode multiplier on alpha and epsilon
    alpha_floor: float = 0.01
    epsilon_floor: float = 0.01
    q_init: float = 10.0
    max_global_steps: int = 100_000
    horizon: int = 200            # decision points per episode
    counterfactual: bool = False
    r_crm: int = 3                # Chebyshev radius for imagined clock states
    top_k: int = 15               # imagined experiences per realized step
    ci_vary_states: bool = True   # imagine other machine states too
    no_match_penalty: float = 0.0

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.r_crm < 0 or self.top_k < 0:
            raise ValueError("r_crm and top_k must be non-negative")
        if self.max_global_steps < 0:
            raise ValueError("max_global_steps must be non-negative")
        return self


class QTable:
    """Sparse state -> action-value rows, materialized on first touch."""

    def __init__(self, n_actions, q_init=10.0):
        self.n_actions = n_actions
        self.q_init = q_init
        self.rows = {}

    def row(self, state):
        r = self.rows.get(state)
        if r is None:
            r = np.full(self.n_actions, self.q_init)
            self.rows[state] = r
        return r

    def best(self, state, mask=None):
        """(action, value) of the greedy choice; ties go to the lowest
        action encoding."""
        row = self.row(state)
        if mask is None:
            a = int(np.argmax(row))
        else:
            a = int(np.argmax(np.where(mask, row, -np.inf)))
        return a, float(row[a])

    def max_value(self, state, mask=None):
        return self.best(state, mask)[1]

    def __len__(self):
        return len(self.rows)


def q_update(row, action, reward, discount, next_max, alpha):
    """One backup: Q += alpha * (r + discount * next_max - Q)."""
    row[action] += alpha * (reward + discount * next_max - row[action])
    return row[action]


def select_action(q, state, epsilon, rng, mask=None):
    """Epsilon-greedy over the legal actions.

    The rng is consumed in a fixed order — one uniform draw, then one
    randrange only when exploring — so seeded runs replay exactly.
    """
    if rng.random() < epsilon:
        if mask is None:
            return rng.randrange(q.n_actions)
        legal = np.flatnonzero(mask)
        if len(legal) == 0:
            raise ValueError("no legal action available")
        return int(legal[rng.randrange(len(legal))])
    return q.best(state, mask)[0]


# ---------------------------------------------------------------------------
# counterfactual imagining
# ---------------------------------------------------------------------------

# machine-side candidate, cached independently of the realized env triple
_Imagined = namedtuple("_Imagined", "sort_key u v d_idx reward u2 v2 terminal")


class TickImagining:
    """Imagined experiences for tick products.

    Alternatives vary the machine state (optional), clock valuations within
    Chebyshev radius ``r_crm`` time units of the realized one (the saturation
    pattern is kept), and any delay whose elapsed valuation fires an edge for
    the realized label set.  Candidates are ranked by immediate reward, ties
    broken by (machine state, valuation, delay) encoding; the realized triple
    is excluded and the best ``top_k`` survive.

    The machine-side work depends only on (u, v, labels) — and the waiting
    cell when state rewards are environment-dependent — so candidate lists
    are cached under that key and re-composed with the live (s, a, s') each
    step.
    """

    def __init__(self, product, r_crm=3, top_k=15, vary_states=True):
        self.product = product
        self.radius = r_crm * product.kappa
        self.top_k = top_k
        self.vary_states = vary_states
        self._state_order = {u: i for i, u in enumerate(product.trm.states)}
        self._cache = {}

    def _value_window(self, vi, bound):
        if vi == INF:
            return (INF,)
        lo = max(0, vi - self.radius)
        hi = min(bound, vi + self.radius)
        return tuple(range(lo, hi + 1))

    def _build(self, u, v, labels, s):
        product = self.product
        trm = product.trm
        sources = trm.states if self.vary_states else (u,)
        windows = [
            self._value_window(vi, m) for vi, m in zip(v, product.mx_ticks)
        ]
        boxes = [()]
        for window in windows:
            boxes = [prefix + (val,) for prefix in boxes for val in window]
        found = []
        for u_bar in sources:
            order = self._state_order[u_bar]
            delta = product.state_reward(u_bar, s)
            for v_bar in boxes:
                for d_idx, d_ticks in enumerate(product.delay_ticks):
                    elapsed = product.elapse(v_bar, d_ticks)
                    t = product.match(u_bar, labels, elapsed)
                    if t is None:
                        continue
                    reward = t.reward + product.delay_accrual[d_idx] * delta
                    found.append(_Imagined(
                        (-reward, order, v_bar, d_ticks),
                        u_bar, v_bar, d_idx, reward, t.target,
                        product.reset_ticks(elapsed, t),
                        t.target in trm.terminals,
                    ))
        found.sort(key=lambda c: c.sort_key)
        return tuple(found[: self.top_k + 1])

    def updates(self, state, action, out):
        """Experiences synthesized around one realized step."""
        if self.top_k == 0:
            return []
        product = self.product
        s, u, v = state
        d_idx, a = divmod(action, product.n_env_actions)
        d_ticks = product.delay_ticks[d_idx]
        skey = s if product._const_ureward is None else None
        key = (u, v, out.labels, skey)
        cached = self._cache.get(key)
        if cached is None:
            cached = self._build(u, v, out.labels, s)
            self._cache[key] = cached
        s2 = out.next_state[0]
        picked = []
        for cand in cached:
            if cand.u == u and cand.v == v and cand.d_idx == d_idx:
                continue
            picked.append(Experience(
                (s, cand.u, cand.v),
                cand.d_idx * product.n_env_actions + a,
                cand.reward,
                (s2, cand.u2, cand.v2),
                product.delay_ticks[cand.d_idx],
                cand.terminal or out.env_done,
                True,
            ))
            if len(picked) == self.top_k:
                break
        return picked


class CornerImagining:
    """Imagined experiences for the corner product: alternative corner
    configurations whose corner lies within Chebyshev radius ``r_crm`` of the
    realized one, combined with every (delay, boundary-crossing) pair whose
    advanced region fires an edge for the realized labels.  Ranking and
    caching mirror the tick variant, with ties broken by (configuration,
    delay, crossing) enumeration order."""

    def __init__(self, product, r_crm=3, top_k=15):
        self.product = product
        self.radius = r_crm
        self.top_k = top_k
        trm = product.trm
        regions = enumerate_regions(trm.clocks, product.bounds)
        self.configs = []
        self.by_corner = {}
        for region in regions:
            for corner in corners(region):
                cfg = CornerConfiguration(region, corner)
                self.by_corner.setdefault(corner, []).append(len(self.configs))
                self.configs.append(cfg)
        self._windows = {}
        self._cache = {}

    def _corner_window(self, corner):
        hit = self._windows.get(corner)
        if hit is not None:
            return hit
        bounds = self.product.bounds
        clocks = self.product.clocks
        ranges = [
            range(max(0, ci - self.radius),
                  min(bounds[c], ci + self.radius) + 1)
            for ci, c in zip(corner, clocks)
        ]
        near = [()]
        for rng_ in ranges:
            near = [prefix + (val,) for prefix in near for val in rng_]
        indices = sorted(
            i for pt in near for i in self.by_corner.get(pt, ())
        )
        self._windows[corner] = indices
        return indices

    def _build(self, u, config, labels, s):
        product = self.product
        delta = product.state_reward(u, s)
        found = []
        for index in self._corner_window(config.corner):
            cfg = self.configs[index]
            for d in product.delays:
                for sigma in product.sigmas:
                    moved = product.advanced(cfg, d, sigma)
                    if moved is None:
                        continue
                    t = product.match(u, labels, moved.region)
                    if t is None:
                        continue
                    reward = t.reward + product.delay_accrual[d] * delta
                    found.append(_Imagined(
                        (-reward, index, d, sigma),
                        cfg, (d, sigma), d, reward, t.target,
                        product.apply_edge(moved, t),
                        t.target in product.trm.terminals,
                    ))
        found.sort(key=lambda c: c.sort_key)
        return tuple(found[: self.top_k + 1])

    def updates(self, state, action, out):
        if self.top_k == 0:
            return []
        product = self.product
        s, u, config = state
        d, sigma, a = product.decode(action)
        skey = s if product._const_ureward is None else None
        key = (u, config, out.labels, skey)
        cached = self._cache.get(key)
        if cached is None:
            cached = self._build(u, config, out.labels, s)
            self._cache[key] = cached
        s2 = out.next_state[0]
        n_sig = len(product.sigmas)
        sig0 = product.sigmas[0]
        picked = []
        for cand in cached:
            d_bar, sigma_bar = cand.v
            if cand.u == config and (d_bar, sigma_bar) == (d, sigma):
                continue
            encoded = (d_bar * n_sig + (sigma_bar - sig0)) \
                * product.n_env_actions + a
            picked.append(Experience(
                (s, u, cand.u),
                encoded,
                cand.reward,
                (s2, cand.u2, cand.v2),
                d_bar,
                cand.terminal or out.env_done,
                True,
            ))
            if len(picked) == self.top_k:
                break
        return picked


def counterfactuals_digital(product, state, action, out, r_crm=3, top_k=15,
                            vary_states=True):
    """One-shot alternative-experience synthesis for a tick-product step."""
    return TickImagining(product, r_crm, top_k, vary_states).updates(
        state, action, out
    )


def counterfactuals_corner(product, state, action, out, r_crm=3, top_k=15):
    return CornerImagining(product, r_crm, top_k).updates(state, action, out)


def make_imagining(product, config):
    if product.kind == "corner":
        return CornerImagining(product, config.r_crm, config.top_k)
    return TickImagining(product, config.r_crm, config.top_k,
                         config.ci_vary_states)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

METRICS_FIELDS = (
    "episode", "global_step", "return", "episode_time",
    "terminal_reached", "epsilon", "alpha",
)

TrainResult = namedtuple("TrainResult", "qtable metrics episodes global_steps")


def train(product, config, seed, metrics_path=None):
    """Q-learning until the global step budget runs out.

    Episodes end on a terminal machine state, environment termination, a
    label no machine edge matches, or the horizon.  One metrics row is
    emitted per episode (the last may be cut short by the budget).
    """
    config.validate()
    rng = random.Random(seed)
    q = QTable(product.n_actions, config.q_init)
    imagining = make_imagining(product, config) if config.counterfactual else None
    epsilon, alpha = config.epsilon0, config.alpha0
    gamma = product.gamma
    metrics = []
    global_step = 0
    episode = 0
    while global_step < config.max_global_steps:
        x = product.initial_state()
        g = 0.0
        t_units = 0.0
        reached = False
        for _ in range(config.horizon):
            if global_step >= config.max_global_steps:
                break
            mask = product.legal_mask(x)
            if mask is not None and not mask.any():
                # dead product state: nothing can be chosen, give up
                g += gamma ** t_units * config.no_match_penalty
                break
            action = select_action(q, x, epsilon, rng, mask)
            out = product.step(x, action, rng)
            global_step += 1
            if out.done:
                next_max = 0.0
            else:
                next_max = q.max_value(
                    out.next_state, product.legal_mask(out.next_state)
                )
            q_update(q.row(x), action, out.reward,
                     product.step_discount(action), next_max, alpha)
            if imagining is not None and not out.invalid:
                for e in imagining.updates(x, action, out):
                    nm = 0.0 if e.terminal else q.max_value(
                        e.next_state, product.legal_mask(e.next_state)
                    )
                    q_update(q.row(e.state), e.action, e.reward,
                             product.step_discount(e.action), nm, alpha)
            g += gamma ** t_units * out.reward
            t_units += float(out.delay_units) + 1.0
            if out.done:
                reached = out.terminal
                break
            x = out.next_state
        metrics.append({
            "episode": episode,
            "global_step": global_step,
            "return": g,
            "episode_time": t_units,
            "terminal_reached": reached,
            "epsilon": epsilon,
            "alpha": alpha,
        })
        epsilon = max(config.epsilon_floor, epsilon * config.decay)
        alpha = max(config.alpha_floor, alpha * config.decay)
        episode += 1
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return TrainResult(q, metrics, episode, global_step)


def evaluate(product, q, episodes=20, seed=0, horizon=200, cross_check=True):
    """Greedy rollouts (epsilon = 0) with fresh seeds.

    For tick products each complete episode's accumulated return is
    re-derived through the exact machine semantics; a discrepancy beyond
    1e-9 means the product and the machine disagree and raises.
    """
    rng = random.Random(seed)
    check = cross_check and product.kind == "tick" \
        and product.no_match_penalty == 0.0
    if check:
        mx, _ = max_constants(product.trm)
    returns, times, successes = [], [], 0
    for _ in range(episodes):
        x = product.initial_state()
        start = x[0]
        g = 0.0
        t_units = 0.0
        reached = False
        invalid = False
        steps = []
        for _ in range(horizon):
            mask = product.legal_mask(x)
            if mask is not None and not mask.any():
                break
            action = q.best(x, mask)[0]
            out = product.step(x, action, rng)
            g += product.gamma ** t_units * out.reward
            t_units += float(out.delay_units) + 1.0
            invalid = out.invalid
            if not invalid and check:
                steps.append(TrajStep(
                    out.delay_units, None, out.next_state[0], out.labels
                ))
            if out.done:
                reached = out.terminal
                break
            x = out.next_state
        if check and not invalid and steps:
            ref, _ = discounted_return(
                Trajectory(start, tuple(steps)), product.trm,
                product.gamma, product.semantics, bounds=mx,
            )
            if abs(ref - g) > 1e-9:
                raise RuntimeError(
                    f"return cross-check failed: product {g!r} vs exact {ref!r}"
                )
        returns.append(g)
        times.append(t_units)
        successes += reached
    returns = np.asarray(returns)
    return {
        "episodes": episodes,
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "mean_episode_time": float(np.mean(times)),
        "success_rate": successes / episodes,
    }


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for row in metrics:
            writer.writerow([
                row["episode"],
                row["global_step"],
                f"{row['return']:.6f}",
                f"{row['episode_time']:.6f}",
                int(row["terminal_reached"]),
                f"{row['epsilon']:.6f}",
                f"{row['alpha']:.6f}",
            ])


# ---------------------------------------------------------------------------
# value iteration
# ---------------------------------------------------------------------------

VIResult = namedtuple("VIResult", "values policy sweeps residual")


def value_iteration(product, tol=1e-10, max_sweeps=1_000_000, limit=10 ** 6):
    """Optimal delay-discounted values on the explicit product.

    Backups use gamma^(d+1) per action; episode-ending outcomes contribute
    no continuation value.  Returns per-state values and a greedy policy.
    """
    states = explicit_states(product, limit=limit)
    index = {x: i for i, x in enumerate(states)}

    # flatten the model: outcomes grouped by (state, action) pair, pairs
    # grouped by state
    base, coef, nxt = [], [], []
    pair_action = []
    pair_starts = []
    state_pair_starts = []
    for x in states:
        mask = product.legal_mask(x)
        state_pair_starts.append(len(pair_starts))
        for action in range(product.n_actions):
            if mask is not None and not mask[action]:
                continue
            disc = product.step_discount(action)
            pair_starts.append(len(base))
            pair_action.append(action)
            for prob, out in product.transitions(x, action):
                base.append(prob * out.reward)
                if out.done or out.next_state is None:
                    coef.append(0.0)
                    nxt.append(0)
                else:
                    coef.append(prob * disc)
                    nxt.append(index[out.next_state])
        if state_pair_starts[-1] == len(pair_starts):
            raise ValueError(f"state {x!r} has no legal actions")

    base = np.asarray(base)
    coef = np.asarray(coef)
    nxt = np.asarray(nxt, dtype=np.int64)
    pair_starts = np.asarray(pair_starts, dtype=np.int64)
    state_pair_starts = np.asarray(state_pair_starts, dtype=np.int64)

    values = np.zeros(len(states))
    residual = math.inf
    for sweep in range(1, max_sweeps + 1):
        contrib = base + coef * values[nxt]
        qvals = np.add.reduceat(contrib, pair_starts)
        new_values = np.maximum.reduceat(qvals, state_pair_starts)
        residual = float(np.max(np.abs(new_values - values)))
        values = new_values
        if residual < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach {tol}")

    contrib = base + coef * values[nxt]
    qvals = np.add.reduceat(contrib, pair_starts)
    policy = {}
    for i, x in enumerate(states):
        lo = state_pair_starts[i]
        hi = state_pair_starts[i + 1] if i + 1 < len(states) else len(qvals)
        policy[x] = pair_action[lo + int(np.argmax(qvals[lo:hi]))]
    return VIResult(
        {x: float(values[i]) for i, x in enumerate(states)},
        policy, sweep, residual,
    )


# ---------------------------------------------------------------------------
# boundary adjustment of real-time trajectories
# ---------------------------------------------------------------------------


def _shift_window(value, bound):
    """Interval of shifts keeping one clock value in its guard class: an
    exact integer is pinned, a fractional value may roam its unit interval,
    a value past the bound anywhere above the bound.  Returned as
    (lo, lo_open, hi, hi_open) with None for an infinite endpoint."""
    if value > bound:
        return bound - value, True, None, True
    f = value - int(value)
    if f == 0:
        return Fraction(0), False, Fraction(0), False
    return -f, True, 1 - f, True


def corner_adjust(trajectory, trm, gamma):
    """Move each firing time of a real-time trajectory toward a region
    boundary without losing return.

    Shifting firing time i by delta (delay i grows by delta, delay i+1
    shrinks by it) changes the return by (gamma^{t+delta} - gamma^t) * K
    where K collects the next edge reward and the state-reward rates around
    the move, so delta is pushed toward the side the sign of K favors —
    as far as the guard classes of every affected clock value allow, which
    keeps the transition sequence intact.  Open endpoints are approached
    15/16 of the way.  Applied left to right the return never decreases.
    """
    mx, _ = max_constants(trm)
    delays = [Fraction(s.delay) for s in trajectory.steps]
    if any(d < 0 for d in delays):
        raise ValueError("delays must be non-negative")
    n = len(delays)
    lam = -math.log(gamma)
    states = trajectory.states()

    def run_points(ds):
        """(machine state, elapsed valuation, fired edge) per step."""
        u = trm.initial
        v = {c: Fraction(0) for c in trm.clocks}
        points = []
        for i, step in enumerate(trajectory.steps):
            fired = trm_step(trm, u, v, step.labels, ds[i] + 1)
            if fired is None:
                raise ValueError(f"trajectory has no machine run (step {i})")
            t, u2, v2 = fired
            points.append((u, {c: v[c] + ds[i] + 1 for c in trm.clocks}, t))
            u, v = u2, v2
        return points

    for i in range(n):
        points = run_points(delays)
        u_i, elapsed_i, fired_i = points[i]
        rate_i = trm.state_reward_at(u_i, states[i])
        if i + 1 < n:
            u_next, _, fired_next = points[i + 1]
            k = fired_next.reward \
                + trm.state_reward_at(u_next, states[i + 1]) / lam \
                - rate_i / (gamma * lam)
        else:
            k = -rate_i / (gamma * lam)
        if k == 0:
            continue

        # feasible window for delta, always containing 0
        lo, lo_open = -delays[i], False
        if i + 1 < n:
            hi, hi_open = delays[i + 1], False
        else:
            hi, hi_open = None, True

        def tighten(a, a_open, b, b_open):
            nonlocal lo, lo_open, hi, hi_open
            if a is not None and (
                lo is None or a > lo or (a == lo and a_open and not lo_open)
            ):
                lo, lo_open = a, a_open
            if b is not None and (
                hi is None or b < hi or (b == hi and b_open and not hi_open)
            ):
                hi, hi_open = b, b_open

        # the valuation checked at step i shifts by delta for every clock
        for c in trm.clocks:
            tighten(*_shift_window(elapsed_i[c], mx[c]))
        # clocks reset at step i read delta lower at later steps until
        # they are reset again
        live = set(fired_i.resets)
        for j in range(i + 1, n):
            if not live:
                break
            _, elapsed_j, fired_j = points[j]
            for c in live:
                a, a_open, b, b_open = _shift_window(elapsed_j[c], mx[c])
                tighten(
                    None if b is None else -b, b_open,
                    None if a is None else -a, a_open,
                )
            live -= fired_j.resets

        if k > 0:
            delta = lo * Fraction(15, 16) if lo_open else lo
        elif hi is None:
            delta = Fraction(1)
        else:
            delta = hi * Fraction(15, 16) if hi_open else hi
        if delta == 0:
            continue
        delays[i] += delta
        if i + 1 < n:
            delays[i + 1] -= delta

    steps = tuple(
        replace(step, delay=delays[i])
        for i, step in enumerate(trajectory.steps)
    )
    return Trajectory(trajectory.start, steps)
