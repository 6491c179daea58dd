"""Product-level behavior: the tick product against the reference machine
run, the corner product against concretized witnesses, action encodings,
legality masks, and the explicit state enumeration."""

import math
import random
from fractions import Fraction

import numpy as np
import pytest

from conftest import pq_machine, window_machine

from trmlab.bundled import bundled_trm
from trmlab.envs import make_env
from trmlab.machine import (
    DIGITAL,
    REALTIME,
    TrajStep,
    Trajectory,
    discounted_return,
    max_constants,
    parse_trm,
)
from trmlab.product import (
    INF,
    CornerProduct,
    TickProduct,
    explicit_states,
    make_product,
)
from trmlab.regions import concretize, corners, region_of


def encode_tick(product, d_idx, a):
    return d_idx * product.n_env_actions + a


def encode_corner(product, d, sigma, a):
    action = (
        product.delays.index(d) * len(product.sigmas)
        + product.sigmas.index(sigma)
    ) * product.n_env_actions + a
    assert product.decode(action) == (d, sigma, a)
    return action


# ---------------------------------------------------------------------------
# encoding, construction, validation
# ---------------------------------------------------------------------------


def test_tick_action_encoding_roundtrip():
    product = make_product(bundled_trm("trm1"), make_env("taxi"), "digital",
                           gamma=0.999)
    assert product.delay_ticks == tuple(range(16))
    assert product.n_actions == 16 * 6
    seen = set()
    for action in range(product.n_actions):
        d_ticks, a = product.decode(action)
        assert action == product.delay_ticks.index(d_ticks) * 6 + a
        assert product.delay_units(action) == d_ticks
        assert product.step_discount(action) == pytest.approx(
            0.999 ** (d_ticks + 1)
        )
        seen.add((d_ticks, a))
    assert len(seen) == product.n_actions


def test_corner_action_encoding_roundtrip():
    product = make_product(window_machine(), make_env("line3"), "corner",
                           gamma=0.9)
    assert product.delays == (0, 1, 2, 3)
    assert product.sigmas == tuple(range(-4, 5))
    assert product.n_actions == 4 * 9 * 1
    for action in range(product.n_actions):
        d, sigma, a = product.decode(action)
        assert encode_corner(product, d, sigma, a) == action
        assert product.step_discount(action) == pytest.approx(0.9 ** (d + 1))


def test_make_product_validation():
    trm, env = window_machine(), make_env("line3")
    with pytest.raises(ValueError):
        make_product(trm, env, "zeno")
    with pytest.raises(ValueError):
        make_product(trm, env, "digital", kappa=2)
    with pytest.raises(ValueError):
        make_product(trm, env, "discretized", kappa=1)
    with pytest.raises(ValueError):
        make_product(trm, env, "corner", kappa=2)
    with pytest.raises(ValueError):
        make_product(trm, env, "rm", kappa=2)
    with pytest.raises(ValueError):
        TickProduct(trm, env, gamma=1.0)
    with pytest.raises(ValueError):
        TickProduct(trm, env, gamma=0.9, kappa=0)
    with pytest.raises(ValueError):
        CornerProduct(trm, env, gamma=0.0)


def test_rm_interpretation_is_delay_blind():
    product = make_product(bundled_trm("trm1"), make_env("taxi"),
                           "reward-machine", gamma=0.999)
    assert product.delay_ticks == (0,)
    assert product.n_actions == 6
    assert all(product.delay_units(a) == 0 for a in range(6))
    alias = make_product(bundled_trm("trm1"), make_env("taxi"), "rm",
                         gamma=0.999)
    assert alias.delay_ticks == (0,)


# ---------------------------------------------------------------------------
# tick dynamics
# ---------------------------------------------------------------------------


def test_acting_takes_one_time_unit():
    # waiting zero still elapses a full unit before guards are read
    product = make_product(window_machine(), make_env("line3"), "digital",
                           gamma=0.9)
    out = product.step(product.initial_state(), encode_tick(product, 0, 0),
                       random.Random(0))
    assert out.transition.reward == -10  # y<=1 branch, not y>1
    assert out.next_state == (1, "u0", (1, 1))
    assert not out.done


def test_elapse_saturates_past_the_bound():
    product = make_product(bundled_trm("trm1"), make_env("taxi"), "digital",
                           gamma=0.999)
    assert product.elapse((10, ), 4) == (15,)
    assert product.elapse((10, ), 5) == (INF,)
    assert product.elapse((INF,), 0) == (INF,)


def test_guard_windows_respect_strictness_on_the_tick_grid():
    trm = parse_trm(
        """
        states: u0 u1
        initial: u0
        terminal: u1
        clocks: x
        props: p
        trans: u0 -> u0 | label=empty | reward=0
        trans: u0 -> u1 | label=p | guard=x>2 | reward=1
        trans: u0 -> u0 | label=p | guard=x<=2 | reward=-1
        """,
        name="strict",
    )
    product = TickProduct(trm, make_env("line3"), gamma=0.9, kappa=10)
    labels = frozenset({"p"})
    below = product.match("u0", labels, (20,))
    above = product.match("u0", labels, (21,))
    assert below.reward == -1 and above.reward == 1
    assert product.match("u0", labels, (INF,)).reward == 1


@pytest.mark.parametrize(
    "trm,env_id,seed",
    [
        (bundled_trm("trm1"), "taxi", 7),
        (bundled_trm("trm2"), "frozen_lake", 11),
        (window_machine(), "line3", 3),
        (pq_machine(), "grid2x2", 5),
    ],
    ids=["trm1-taxi", "trm2-lake", "window-line3", "pq-grid"],
)
def test_tick_rollout_matches_reference_run(trm, env_id, seed):
    """Dual-route check: a product rollout replayed through the plain machine
    semantics gives the same discounted return, states and valuations."""
    env = make_env(env_id)
    gamma = 0.95
    product = make_product(trm, env, "digital", gamma=gamma)
    mx, _ = max_constants(trm)
    rng = random.Random(seed)
    for _ in range(12):
        x = product.initial_state()
        steps = []
        total = 0.0
        t_units = 0
        for _ in range(40):
            action = rng.randrange(product.n_actions)
            out = product.step(x, action, rng)
            if out.invalid:
                break
            total += gamma ** t_units * out.reward
            t_units += out.delay_units + 1
            steps.append(
                TrajStep(out.delay_units, None, out.next_state[0], out.labels)
            )
            # machine-part of the product state must track the reference step
            x = out.next_state
            if out.done:
                break
        if not steps:
            continue
        traj = Trajectory(product.initial_state()[0], tuple(steps))
        ref, run = discounted_return(traj, trm, gamma, DIGITAL, bounds=mx)
        assert total == pytest.approx(ref, abs=1e-9)
        end_u, end_v = run.final()
        assert end_u == x[1]
        assert tuple(end_v[c] for c in trm.clocks) == x[2]


def test_discretized_rollout_matches_reference_run():
    """kappa=10 grid: fractional delays replayed exactly (as Fractions)
    through the continuous-time semantics."""
    trm, env = window_machine(), make_env("line3")
    gamma = 0.9
    product = make_product(trm, env, "discretized", gamma=gamma, kappa=10)
    mx, _ = max_constants(trm)
    rng = random.Random(19)
    for _ in range(25):
        x = product.initial_state()
        steps = []
        total = 0.0
        t_units = Fraction(0)
        for _ in range(6):
            action = rng.randrange(product.n_actions)
            out = product.step(x, action, rng)
            assert not out.invalid  # the window machine is complete
            total += gamma ** float(t_units) * out.reward
            t_units += Fraction(out.delay_units) + 1
            steps.append(
                TrajStep(Fraction(out.delay_units), None, out.next_state[0],
                         out.labels)
            )
            x = out.next_state
            if out.done:
                break
        traj = Trajectory(0, tuple(steps))
        ref, _ = discounted_return(traj, trm, gamma, REALTIME, bounds=mx)
        assert total == pytest.approx(ref, abs=1e-9)


def test_env_dependent_state_rewards_accrue_per_cell():
    # waiting in cell 0 costs -2/unit, in cell 1 costs -1/unit
    trm, env = pq_machine(), make_env("grid2x2")
    gamma = 0.9
    product = make_product(trm, env, "digital", gamma=gamma)
    rng = random.Random(0)
    x0 = product.initial_state()
    out = product.step(x0, encode_tick(product, 3, 0), rng)  # up into cell 1
    accrual = (1 - gamma ** 3) / (1 - gamma)
    assert out.labels == frozenset({"p"})
    assert out.reward == pytest.approx(5 + accrual * -2.0)
    out2 = product.step(out.next_state, encode_tick(product, 3, 1), rng)
    assert out2.reward == pytest.approx(0 + accrual * -1.0)


def test_no_match_ends_the_episode():
    trm, env = pq_machine(), make_env("grid2x2")
    product = make_product(trm, env, "digital", gamma=0.9)
    punishing = make_product(trm, env, "digital", gamma=0.9,
                             no_match_penalty=-7.0)
    rng = random.Random(0)
    # moving right from cell 0 lands in cell 3 and emits q, which u0 cannot
    # read: the machine has no edge for it
    action = encode_tick(product, 0, 1)
    out = product.step(product.initial_state(), action, rng)
    assert out.invalid and out.done and not out.terminal
    assert out.next_state is None and out.transition is None
    assert out.reward == 0.0
    assert punishing.step(punishing.initial_state(), action,
                          random.Random(0)).reward == -7.0


def test_terminal_machine_state_ends_the_episode():
    trm, env = window_machine(), make_env("line3")
    product = make_product(trm, env, "digital", gamma=0.9)
    rng = random.Random(0)
    x = product.initial_state()
    out = product.step(x, encode_tick(product, 1, 0), rng)   # y>1: +5
    assert out.transition.reward == 5 and not out.done
    out = product.step(out.next_state, encode_tick(product, 0, 0), rng)
    assert out.terminal and out.done
    assert out.next_state[1] == "u1"


def test_tick_transitions_agree_with_sampling():
    trm, env = bundled_trm("trm2"), make_env("frozen_lake")
    product = make_product(trm, env, "digital", gamma=0.999)
    x0 = product.initial_state()
    action = encode_tick(product, 2, 2)
    model = product.transitions(x0, action)
    assert sum(p for p, _ in model) == pytest.approx(1.0)
    outcomes = {out.next_state for _, out in model}
    rng = random.Random(123)
    for _ in range(50):
        assert product.step(x0, action, rng).next_state in outcomes


# ---------------------------------------------------------------------------
# corner dynamics
# ---------------------------------------------------------------------------


def test_corner_optimal_line3_trace():
    """Waiting zero but slipping past the y=1 boundary collects the slow
    bonus with no waiting cost, then p still lands inside x<3: the corner
    product realizes the 11.3 supremum exactly."""
    trm, env = window_machine(), make_env("line3")
    product = make_product(trm, env, "corner", gamma=0.9)
    rng = random.Random(0)
    x = product.initial_state()
    a1 = encode_corner(product, 0, 1, 0)
    assert product.legal_mask(x)[a1]
    out = product.step(x, a1, rng)
    assert out.transition.reward == 5 and out.reward == 5.0
    assert not out.done
    region = out.next_state[2].region
    assert region.saturated == frozenset({"y"})
    a2 = encode_corner(product, 0, 0, 0)
    assert product.legal_mask(out.next_state)[a2]
    out2 = product.step(out.next_state, a2, rng)
    assert out2.transition.reward == 7 and out2.terminal
    total = out.reward + 0.9 * out2.reward
    assert total == pytest.approx(11.3)


def test_corner_accrual_is_continuous_time():
    trm, env = window_machine(), make_env("line3")
    gamma = 0.9
    product = make_product(trm, env, "corner", gamma=gamma)
    out = product.step(product.initial_state(),
                       encode_corner(product, 2, 0, 0), random.Random(0))
    # two units waited in u0 (state reward -1), then the y>1 edge pays 5
    accrued = -1.0 * (1 - gamma ** 2) / (-math.log(gamma))
    assert out.reward == pytest.approx(5 + accrued)


def test_corner_mask_blocks_impossible_boundary_walks():
    product = make_product(window_machine(), make_env("line3"), "corner",
                           gamma=0.9)
    x0 = product.initial_state()
    mask = product.legal_mask(x0)
    legal = {product.decode(a)[:2] for a in np.flatnonzero(mask)}
    # d=0: one unit elapses; walking 0/1 boundaries forward or 1 back keeps
    # the shifted corner valid, anything further does not
    assert (0, 0) in legal and (0, 1) in legal and (0, -1) in legal
    assert (0, 2) not in legal and (0, -2) not in legal
    # fully saturated configurations cannot cross any boundary at all
    x = x0
    rng = random.Random(1)
    out = product.step(x, encode_corner(product, 3, 0, 0), rng)
    region = out.next_state[2].region
    assert region.fully_saturated()
    sat_legal = {
        product.decode(a)[:2]
        for a in np.flatnonzero(product.legal_mask(out.next_state))
    }
    assert sat_legal == {(d, 0) for d in product.delays}


def test_corner_zero_crossing_always_legal():
    product = make_product(window_machine(), make_env("line3"), "corner",
                           gamma=0.9)
    for state in explicit_states(product):
        config = state[2]
        for d in product.delays:
            assert product.advanced(config, d, 0) is not None


def test_corner_illegal_action_raises():
    product = make_product(window_machine(), make_env("line3"), "corner",
                           gamma=0.9)
    bad = encode_corner(product, 0, 4, 0)
    with pytest.raises(ValueError):
        product.step(product.initial_state(), bad, random.Random(0))


def test_corner_no_match_flags_invalid():
    trm, env = pq_machine(), make_env("grid2x2")
    product = make_product(trm, env, "corner", gamma=0.9)
    out = product.step(product.initial_state(),
                       encode_corner(product, 0, 0, 1), random.Random(0))
    assert out.invalid and out.done and out.next_state is None


def test_corner_rollout_matches_concrete_witness():
    """Every corner step must be justified by a concrete clock valuation:
    concretizing the advanced configuration yields a point where the fired
    guard holds, where the machine-level match picks the same edge, and
    whose reset lands in the recorded region."""
    trm, env = bundled_trm("trm2"), make_env("frozen_lake")
    gamma = 0.99
    product = make_product(trm, env, "corner", gamma=gamma)
    mx, _ = max_constants(trm)
    eps = Fraction(1, 8)
    rng = random.Random(77)
    x = product.initial_state()
    checked = 0
    while checked < 150:
        mask = product.legal_mask(x)
        legal = np.flatnonzero(mask)
        action = int(legal[rng.randrange(len(legal))])
        d, sigma, _ = product.decode(action)
        prev_config = x[2]
        prev_u = x[1]
        out = product.step(x, action, rng)
        if out.invalid:
            x = product.initial_state()
            continue
        moved = product.advanced(prev_config, d, sigma)
        point = concretize(moved, eps)
        t = out.transition
        assert t.guard.satisfied(point)
        first = next(
            tt for tt in trm.matching_labels(prev_u, out.labels)
            if tt.guard.satisfied(point)
        )
        assert first is t
        after_reset = {
            c: (0 if c in t.resets else point[c]) for c in trm.clocks
        }
        assert region_of(after_reset, mx) == out.next_state[2].region
        assert out.next_state[2].corner in corners(out.next_state[2].region)
        expect = t.reward
        if d:
            expect += product.state_reward(prev_u, x[0]) * (
                (1 - gamma ** d) / (-math.log(gamma))
            )
        assert out.reward == pytest.approx(expect)
        checked += 1
        x = out.next_state if not out.done else product.initial_state()
    assert checked == 150


def test_clockless_machine_products():
    trm = parse_trm(
        """
        states: u0 u1
        initial: u0
        terminal: u1
        props: p
        trans: u0 -> u0 | label=empty | reward=0
        trans: u0 -> u1 | label=p | reward=3
        """,
        name="clockless",
    )
    env = make_env("line3")
    tick = make_product(trm, env, "digital", gamma=0.9)
    assert tick.n_actions == 1 and tick.delay_ticks == (0,)
    corner = make_product(trm, env, "corner", gamma=0.9)
    assert corner.n_actions == 1
    rng = random.Random(0)
    x = corner.initial_state()
    out = corner.step(x, 0, rng)
    assert out.reward == 0.0 and not out.done
    out = corner.step(out.next_state, 0, rng)
    assert out.transition.reward == 3 and out.terminal


# ---------------------------------------------------------------------------
# explicit enumeration
# ---------------------------------------------------------------------------


def test_explicit_states_tick():
    product = make_product(pq_machine(), make_env("grid2x2"), "digital",
                           gamma=0.9)
    states = explicit_states(product)
    assert states[0] == product.initial_state()
    assert len(states) == len(set(states))
    for s, u, v in states:
        assert s in (0, 1, 2, 3)
        assert u in ("u0", "u1", "u2")
        assert all(t == INF or 0 <= t <= 5 for t in v)
    # terminal machine states only appear as episode-enders, never expanded
    assert all(u != "u2" for _, u, _ in states)


def test_explicit_states_corner():
    product = make_product(window_machine(), make_env("line3"), "corner",
                           gamma=0.9)
    states = explicit_states(product)
    assert states[0] == product.initial_state()
    for _, _, config in states:
        assert config.corner in corners(config.region)


def test_explicit_states_limit():
    product = make_product(bundled_trm("trm1"), make_env("taxi"), "digital",
                           gamma=0.999)
    with pytest.raises(ValueError, match="exceeds"):
        explicit_states(product, limit=10)
