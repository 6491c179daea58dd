"""Shared builders for the test suite: the two small worked-example machines,
plus seeded generators of random deterministic-and-complete machines and
trajectories for the bounding/return property suites."""

import random
from itertools import combinations

from trmlab.machine import (
    TRM,
    Guard,
    TrajStep,
    Trajectory,
    Transition,
    parse_label_formula,
    parse_trm,
    trm_step,
)

PQ_TEXT = """
# two-feature gridworld objective: see p (late), then q (later still)
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

# cost of waiting in each grid cell, shared by all machine states
GRID_CELL_COSTS = {0: -2.0, 1: -1.0, 2: -4.0, 3: -1.0}

WINDOW_TEXT = """
# corridor objective: reach p inside the x<3 window, don't rush (y>1 pays)
states: u0 u1
initial: u0
terminal: u1
clocks: x y
props: p
state_reward: u0 -1
trans: u0 -> u0 | label=empty | guard=y>1 | reward=5
trans: u0 -> u0 | label=empty | guard=y<=1 | reward=-10
trans: u0 -> u1 | label=p | guard=x<3 | reward=7
trans: u0 -> u1 | label=p | guard=x>=3 | reward=-10
"""


def pq_machine():
    trm = parse_trm(PQ_TEXT, name="pq")
    for u in ("u0", "u1"):
        trm.state_rewards[u] = dict(GRID_CELL_COSTS)
    return trm


def window_machine():
    return parse_trm(WINDOW_TEXT, name="window")


def zeta(*steps):
    """Build a machine-level trajectory from (delay, next_env_state, labels)."""
    return Trajectory(
        0,
        tuple(
            TrajStep(d, None, s, frozenset(labels)) for d, s, labels in steps
        ),
    )


# ζ1/ζ2 from the two-trajectory gridworld example (cells 0..3; moving into
# cell 1 emits p, into cell 3 emits q)
ZETA1 = zeta((2, 1, {"p"}), (1, 2, ()), (0, 3, {"q"}))
ZETA2 = zeta((2, 1, {"p"}), (0, 2, ()), (1, 3, {"q"}))


def _exact_label(subset, props):
    parts = [p if p in subset else f"!{p}" for p in props]
    return " & ".join(parts) if parts else "any"


def random_trm(rng: random.Random, lemma2=False):
    """A random machine that is deterministic and complete by construction.

    Per non-terminal state and per exact label class, time is either left
    unconstrained (one edge) or split at a threshold (``c<=m`` / ``c>m``
    edges), so no two edges ever overlap and every (label, valuation) pair is
    covered.  With ``lemma2`` the reward shape matches that lemma's
    preconditions: strictly negative state rewards, non-negative edge rewards,
    and large rewards on edges entering the terminal state.
    """
    n_states = rng.randint(2, 4)
    states = [f"u{i}" for i in range(n_states)]
    terminal = states[-1]
    clocks = ["x", "y"][: rng.randint(0, 2)]
    props = ("p", "q")[: rng.randint(1, 2)]

    def reward_for(target):
        if lemma2:
            if target == terminal:
                return float(rng.randint(80, 160))
            return float(rng.randint(0, 4))
        return float(rng.randint(-10, 10))

    def random_resets():
        return frozenset(c for c in clocks if rng.random() < 0.3)

    transitions = []
    label_classes = [
        frozenset(sub)
        for n in range(len(props) + 1)
        for sub in combinations(props, n)
    ]
    for u in states[:-1]:
        for subset in label_classes:
            src = _exact_label(subset, props)
            ast = parse_label_formula(src, props)
            if clocks and rng.random() < 0.5:
                c = rng.choice(clocks)
                m = rng.randint(1, 3)
                for guard in (Guard(((c, "<=", m),)), Guard(((c, ">", m),))):
                    tgt = rng.choice(states)
                    transitions.append(
                        Transition(u, tgt, ast, guard, random_resets(),
                                   reward_for(tgt), src)
                    )
            else:
                tgt = rng.choice(states)
                transitions.append(
                    Transition(u, tgt, ast, Guard(), random_resets(),
                               reward_for(tgt), src)
                )

    if lemma2:
        state_rewards = {u: -float(rng.randint(1, 3)) for u in states}
    else:
        state_rewards = {u: float(rng.randint(-3, 3)) for u in states}
    return TRM(states, states[0], [terminal], clocks, props, state_rewards,
               transitions, name="random")


def random_trajectory(trm, rng: random.Random, max_len=6, real_delays=False):
    """Random trajectory through a complete machine (env states are synthetic
    integers; labels drawn uniformly from the label classes)."""
    u = trm.initial
    v = trm.initial_valuation()
    steps = []
    for i in range(rng.randint(1, max_len)):
        if u in trm.terminals:
            break
        if real_delays:
            d = round(rng.uniform(0.0, 7.0), 3)
        else:
            d = rng.randint(0, 7)
        labels = frozenset(p for p in trm.props if rng.random() < 0.4)
        fired = trm_step(trm, u, v, labels, d + 1)
        assert fired is not None, "generator produced an incomplete machine"
        _, u, v = fired
        steps.append(TrajStep(d, None, i + 1, labels))
    return Trajectory(0, tuple(steps))


def suffix_returns(trajectory, trm, gamma, semantics):
    """Per-decision-point suffix returns G_i (G_0 is the full return)."""
    from trmlab.machine import accrue_state_reward

    u = trm.initial
    v = trm.initial_valuation()
    states = trajectory.states()
    rewards = []
    delays = []
    for i, step in enumerate(trajectory.steps):
        if u in trm.terminals:
            break
        r_state = accrue_state_reward(
            trm.state_reward_at(u, states[i]), step.delay, gamma, semantics
        )
        fired = trm_step(trm, u, v, step.labels, step.delay + 1)
        assert fired is not None
        _, u, v = fired
        rewards.append(fired[0].reward + r_state)
        delays.append(step.delay)
    out = []
    acc = 0.0
    for r, d in zip(reversed(rewards), reversed(delays)):
        acc = r + gamma ** float(d + 1) * acc
        out.append(acc)
    out.reverse()
    return out


def flags_trm():
    # collect flag "a" and then "b" on the lake; stepping in a hole knocks
    # the machine back to the start.  The guards spell out full exclusivity
    # so the machine is deterministic over every label subset, even ones the
    # lake never emits.
    return parse_trm(
        """
        states: u0 u1 u2
        initial: u0
        terminal: u2
        props: a b c h
        trans: u0 -> u0 | label=empty | reward=0
        trans: u0 -> u1 | label=a & !b & !c & !h | reward=2
        trans: u0 -> u0 | label=b & !a & !c & !h | reward=0
        trans: u0 -> u0 | label=c & !a & !b & !h | reward=0
        trans: u0 -> u0 | label=h & !a & !b & !c | reward=-5
        trans: u1 -> u1 | label=empty | reward=0
        trans: u1 -> u1 | label=a & !b & !c & !h | reward=0
        trans: u1 -> u2 | label=b & !a & !c & !h | reward=10
        trans: u1 -> u1 | label=c & !a & !b & !h | reward=0
        trans: u1 -> u0 | label=h & !a & !b & !c | reward=-5
        """,
        name="flags",
    )


def classic_q_learning(env, trm, config, seed):
    """Q-learning written directly against the environment and the machine's
    edge relation — no product, no delays.  Used to pin down that the
    zero-delay interpretation adds nothing beyond the classic rule."""
    from trmlab.learning import QTable, q_update, select_action

    rng = random.Random(seed)
    q = QTable(env.n_actions, config.q_init)
    props = frozenset(trm.props)
    epsilon, alpha = config.epsilon0, config.alpha0
    gstep = 0
    while gstep < config.max_global_steps:
        s, u = env.initial_state(), trm.initial
        for _ in range(config.horizon):
            if gstep >= config.max_global_steps:
                break
            a = select_action(q, (s, u), epsilon, rng)
            s2, env_done = env.step(s, a, rng)
            gstep += 1
            labels = frozenset(env.labels(s, a, s2)) & props
            fired = trm_step(trm, u, {}, labels, 1)
            if fired is None:
                q_update(q.row((s, u)), a, config.no_match_penalty,
                         config.gamma, 0.0, alpha)
                break
            t, u2, _ = fired
            done = env_done or u2 in trm.terminals
            bootstrap = 0.0 if done else q.max_value((s2, u2))
            q_update(q.row((s, u)), a, t.reward, config.gamma, bootstrap,
                     alpha)
            if done:
                break
            s, u = s2, u2
        epsilon = max(config.epsilon_floor, epsilon * config.decay)
        alpha = max(config.alpha_floor, alpha * config.decay)
    return q
