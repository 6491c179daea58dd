"""Timed reward machines: model, parser, and run semantics.

A timed reward machine (TRM) is a finite transition system whose edges are
guarded by clock constraints and labeled with boolean formulas over
propositions.  Each edge carries a scalar reward; each machine state carries a
state reward that accrues while time passes.  Two accrual semantics are
supported:

* ``digital`` -- time advances in whole units and waiting d units in state u
  collects ``delta * (1 + gamma + ... + gamma^(d-1))``.
* ``realtime`` -- waiting accrues the integral of ``gamma^t``, i.e.
  ``delta * (1 - gamma^d) / (-ln gamma)``.

Clock valuations map clock names to non-negative numbers; ``math.inf`` marks a
clock that has been saturated past its largest relevant constant.  All guard
constants are natural numbers, so any value above a clock's maximum constant
behaves identically to infinity.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import chain, combinations
from typing import Iterable, Optional, Union

Number = Union[int, float, Fraction]

DIGITAL = "digital"
REALTIME = "realtime"

_OPS = ("<=", ">=", "==", "<", ">", "=")


class TrmError(Exception):
    pass


class TrmParseError(TrmError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoMatchError(TrmError):
    """Raised when a timed word reaches a state/label/clock combination with
    no enabled transition."""

    def __init__(self, state, labels, valuation, step_index):
        self.state = state
        self.labels = labels
        self.valuation = valuation
        self.step_index = step_index
        super().__init__(
            f"no transition from {state} on {set(labels) or '{}'} with clocks "
            f"{valuation} (step {step_index})"
        )


# ---------------------------------------------------------------------------
# label formulas
# ---------------------------------------------------------------------------
# AST nodes are plain tuples: ("true",), ("lit", name), ("not", f),
# ("and", f, g), ("or", f, g).

_TOKEN_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|[()&|!])")


def parse_label_formula(text, props):
    """Parse a boolean formula over proposition names.

    Supports literals, ``!``, ``&``, ``|`` and parentheses, plus the keywords
    ``any`` (matches every label set) and ``empty`` (no declared proposition
    holds).  ``!`` binds tightest, then ``&``, then ``|``.
    """
    text = text.strip()
    if text == "{}":
        raise TrmParseError(
            "label={} is ambiguous; write label=any (matches every label) "
            "or label=empty (no proposition true)"
        )
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise TrmParseError(f"bad label formula near {text[pos:]!r}")
        tokens.append(m.group(1))
        pos = m.end()
    tokens.append(None)  # sentinel

    idx = [0]

    def peek():
        return tokens[idx[0]]

    def take():
        tok = tokens[idx[0]]
        idx[0] += 1
        return tok

    def parse_or():
        node = parse_and()
        while peek() == "|":
            take()
            node = ("or", node, parse_and())
        return node

    def parse_and():
        node = parse_not()
        while peek() == "&":
            take()
            node = ("and", node, parse_not())
        return node

    def parse_not():
        if peek() == "!":
            take()
            return ("not", parse_not())
        return parse_atom()

    def parse_atom():
        tok = take()
        if tok == "(":
            node = parse_or()
            if take() != ")":
                raise TrmParseError(f"unbalanced parens in label formula {text!r}")
            return node
        if tok in ("&", "|", ")", None):
            raise TrmParseError(f"bad label formula {text!r}")
        if tok == "any":
            return ("true",)
        if tok == "empty":
            node = ("true",)
            for p in props:
                node = ("and", node, ("not", ("lit", p)))
            return node
        if tok not in props:
            raise TrmParseError(f"unknown proposition {tok!r} in label formula")
        return ("lit", tok)

    node = parse_or()
    if peek() is not None:
        raise TrmParseError(f"trailing tokens in label formula {text!r}")
    return node


def eval_formula(node, labels):
    kind = node[0]
    if kind == "true":
        return True
    if kind == "lit":
        return node[1] in labels
    if kind == "not":
        return not eval_formula(node[1], labels)
    if kind == "and":
        return eval_formula(node[1], labels) and eval_formula(node[2], labels)
    return eval_formula(node[1], labels) or eval_formula(node[2], labels)


def formulas_cosatisfiable(f, g, props):
    """True if some label set over ``props`` satisfies both formulas."""
    if len(props) > 16:
        raise TrmError("co-satisfiability check limited to 16 propositions")
    for sub in chain.from_iterable(
        combinations(props, n) for n in range(len(props) + 1)
    ):
        labels = frozenset(sub)
        if eval_formula(f, labels) and eval_formula(g, labels):
            return labels
    return None


# ---------------------------------------------------------------------------
# guards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Guard:
    """Conjunction of atoms ``clock op const``, normalized to one closed/open
    interval per clock.

    ``intervals`` maps clock -> (lo, lo_strict, hi, hi_strict) with hi=None
    meaning unbounded above.  An empty atom list is the trivially true guard.
    """

    atoms: tuple = ()
    intervals: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ivs = {}
        for clock, op, const in self.atoms:
            lo, lo_s, hi, hi_s = ivs.get(clock, (0, False, None, False))
            if op in (">", ">="):
                strict = op == ">"
                if const > lo or (const == lo and strict and not lo_s):
                    lo, lo_s = const, strict
            elif op in ("<", "<="):
                strict = op == "<"
                if hi is None or const < hi or (const == hi and strict and not hi_s):
                    hi, hi_s = const, strict
            else:  # "="
                if const > lo or (const == lo and not lo_s):
                    lo, lo_s = const, False
                if hi is None or const < hi:
                    hi, hi_s = const, False
            ivs[clock] = (lo, lo_s, hi, hi_s)
        object.__setattr__(self, "intervals", ivs)

    def satisfiable(self):
        for lo, lo_s, hi, hi_s in self.intervals.values():
            if hi is None:
                continue
            if lo > hi or (lo == hi and (lo_s or hi_s)):
                return False
        return True

    def satisfied(self, valuation):
        for clock, (lo, lo_s, hi, hi_s) in self.intervals.items():
            v = valuation[clock]
            if v < lo or (v == lo and lo_s):
                return False
            if hi is not None and (v > hi or (v == hi and hi_s)):
                return False
        return True

    def __str__(self):
        if not self.atoms:
            return "true"
        return " & ".join(f"{c}{op}{k}" for c, op, k in self.atoms)


def parse_guard(text):
    atoms = []
    for part in re.split(r"[&,]", text):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*(<=|>=|==|<|>|=)\s*(\d+)", part)
        if not m:
            raise TrmParseError(f"bad guard atom {part!r}")
        clock, op, const = m.group(1), m.group(2), int(m.group(3))
        if op == "==":
            op = "="
        atoms.append((clock, op, const))
    return Guard(tuple(atoms))


def intervals_overlap(a, b):
    """Whether two normalized per-clock intervals intersect over the reals."""
    lo, lo_s = a[0], a[1]
    if b[0] > lo or (b[0] == lo and b[1]):
        lo, lo_s = b[0], b[1]
    hi, hi_s = a[2], a[3]
    if hi is None:
        hi, hi_s = b[2], b[3]
    elif b[2] is not None and (b[2] < hi or (b[2] == hi and b[3])):
        hi, hi_s = b[2], b[3]
    if hi is None:
        return True
    if lo < hi:
        return True
    return lo == hi and not lo_s and not hi_s


def guards_overlap(g1: Guard, g2: Guard):
    for clock in set(g1.intervals) | set(g2.intervals):
        a = g1.intervals.get(clock, (0, False, None, False))
        b = g2.intervals.get(clock, (0, False, None, False))
        if not intervals_overlap(a, b):
            return False
    return True


# ---------------------------------------------------------------------------
# machine structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    label: tuple
    guard: Guard
    resets: frozenset
    reward: float
    label_src: str = ""
    index: int = -1

    def __str__(self):
        parts = [f"{self.source} -> {self.target}", f"label={self.label_src}"]
        if self.guard.atoms:
            parts.append(f"guard={self.guard}")
        if self.resets:
            parts.append(f"reset={','.join(sorted(self.resets))}")
        parts.append(f"reward={self.reward:g}")
        return " | ".join(parts)


class TRM:
    """A timed reward machine.

    State rewards may be plain numbers or mappings from environment state to
    number (the latter cannot be expressed in the file format and is used by
    machines built in code).
    """

    def __init__(self, states, initial, terminals, clocks, props, state_rewards,
                 transitions, name="trm", warnings=()):
        self.name = name
        self.states = tuple(states)
        self.initial = initial
        self.terminals = frozenset(terminals)
        self.clocks = tuple(sorted(clocks))
        self.props = tuple(props)
        self.state_rewards = dict(state_rewards)
        self.transitions = tuple(
            Transition(t.source, t.target, t.label, t.guard, t.resets,
                       t.reward, t.label_src, i)
            for i, t in enumerate(transitions)
        )
        self.warnings = list(warnings)
        self._by_source = {u: [] for u in self.states}
        for t in self.transitions:
            self._by_source[t.source].append(t)
        self._label_cache = {}

    def transitions_from(self, u):
        return self._by_source[u]

    def matching_labels(self, u, labels):
        """Transitions from u whose label formula holds for ``labels``
        (guards not yet checked).  Cached per (state, label set)."""
        key = (u, labels)
        hit = self._label_cache.get(key)
        if hit is None:
            hit = tuple(
                t for t in self._by_source[u] if eval_formula(t.label, labels)
            )
            self._label_cache[key] = hit
        return hit

    def state_reward_at(self, u, s=None):
        val = self.state_rewards.get(u, 0.0)
        if isinstance(val, dict):
            if s is None:
                raise TrmError(
                    f"state reward of {u} depends on the environment state"
                )
            return val.get(s, 0.0)
        return val

    def has_env_dependent_rewards(self):
        return any(isinstance(v, dict) for v in self.state_rewards.values())

    def initial_valuation(self):
        return {c: 0 for c in self.clocks}

    def __repr__(self):
        return (f"TRM({self.name!r}, {len(self.states)} states, "
                f"{len(self.clocks)} clocks, {len(self.transitions)} transitions)")


def max_constants(trm):
    """Largest guard constant per clock (``M_x``, 0 if unconstrained) and the
    largest constant among atoms with operator in {>, >=, =} (``M_d``).

    ``M_d`` bounds the delays worth exploring: upper-bound atoms are never
    enabled by waiting longer, so only lower bounds and equalities matter.
    """
    mx = {c: 0 for c in trm.clocks}
    md = 0
    for t in trm.transitions:
        for clock, op, const in t.guard.atoms:
            mx[clock] = max(mx[clock], const)
            if op in (">", ">=", "="):
                md = max(md, const)
    return mx, md


def check_deterministic(trm):
    """Return a list of nondeterminism witnesses.

    A pair of transitions from the same state violates determinism when some
    label set satisfies both formulas and the guards' per-clock intervals all
    overlap (so some valuation enables both).
    """
    violations = []
    for u in trm.states:
        outs = trm.transitions_from(u)
        for i, t1 in enumerate(outs):
            for t2 in outs[i + 1:]:
                witness = formulas_cosatisfiable(t1.label, t2.label, trm.props)
                if witness is None:
                    continue
                if guards_overlap(t1.guard, t2.guard):
                    violations.append((u, t1, t2, witness))
    return violations


def completeness_gaps(trm, max_labels=4096):
    """Find (state, label set, valuation) combinations with no transition.

    Valuations are sampled on a grid refined at every guard constant (the
    constants themselves, midpoints between them, and one value past the
    maximum), which is exhaustive for guards built from ``clock op const``
    atoms.
    """
    n_sets = 2 ** len(trm.props)
    if n_sets > max_labels:
        raise TrmError("completeness audit limited to 12 propositions")
    grids = {}
    for clock in trm.clocks:
        consts = sorted({a[2] for t in trm.transitions for a in t.guard.atoms
                         if a[0] == clock})
        pts = {0}
        for c in consts:
            pts.update((max(c - 0.5, 0), float(c), c + 0.5))
        grids[clock] = sorted(pts)
    gaps = []
    label_sets = [frozenset(sub) for n in range(len(trm.props) + 1)
                  for sub in combinations(trm.props, n)]
    for u in trm.states:
        if u in trm.terminals:
            continue
        for labels in label_sets:
            cands = trm.matching_labels(u, labels)
            if not cands:
                gaps.append((u, labels, {c: 0 for c in trm.clocks}))
                continue
            for v in _grid_points(trm.clocks, grids):
                if not any(t.guard.satisfied(v) for t in cands):
                    gaps.append((u, labels, v))
                    break
    return gaps


def _grid_points(clocks, grids):
    if not clocks:
        yield {}
        return
    first, rest = clocks[0], clocks[1:]
    for val in grids[first]:
        for tail in _grid_points(rest, grids):
            point = {first: val}
            point.update(tail)
            yield point


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

# A timed word is a sequence of (delay, label set) pairs; delays here are the
# word-level delays (an MDP trajectory step with waiting time d contributes
# d + 1 to the word).
TimedWord = list


@dataclass(frozen=True)
class TrajStep:
    delay: Number
    action: object
    next_state: object
    labels: frozenset


@dataclass(frozen=True)
class Trajectory:
    """An environment trajectory s0 (d0,a0) s1 (d1,a1) ... with the label set
    observed on each step."""

    start: object
    steps: tuple

    def word(self):
        return [(step.delay + 1, step.labels) for step in self.steps]

    def states(self):
        out = [self.start]
        out.extend(step.next_state for step in self.steps)
        return out


@dataclass(frozen=True)
class RunStep:
    state: str
    valuation: dict
    delay: Number
    labels: frozenset
    transition: Transition
    next_state: str
    next_valuation: dict


@dataclass(frozen=True)
class Run:
    steps: tuple
    ok: bool
    fail_index: Optional[int] = None

    def transitions(self):
        return [s.transition for s in self.steps]

    def final(self):
        if not self.steps:
            return None
        last = self.steps[-1]
        return last.next_state, last.next_valuation


def bound_valuation(valuation, bounds):
    return {c: (math.inf if v > bounds[c] else v) for c, v in valuation.items()}


def trm_step(trm, u, valuation, labels, delay, bounds=None):
    """Fire one word step: elapse ``delay``, pick the enabled transition for
    ``labels``, apply resets.  Returns (transition, next state, next
    valuation) or None when no transition is enabled.

    With ``bounds`` (a per-clock maximum-constant map) the successor valuation
    is saturated: values past the bound become ``math.inf``.
    """
    elapsed = {c: v + delay for c, v in valuation.items()}
    for t in trm.matching_labels(u, labels):
        if t.guard.satisfied(elapsed):
            nxt = {c: (0 if c in t.resets else elapsed[c]) for c in trm.clocks}
            if bounds is not None:
                nxt = bound_valuation(nxt, bounds)
            return t, t.target, nxt
    return None


def trm_run(trm, word, bounds=None, start=None, valuation=None):
    """Run a timed word from the initial configuration.

    The run stops early (ok=False) on a missing transition or when a terminal
    state is reached before the word ends.
    """
    u = trm.initial if start is None else start
    v = trm.initial_valuation() if valuation is None else dict(valuation)
    steps = []
    for i, (delay, labels) in enumerate(word):
        if u in trm.terminals:
            return Run(tuple(steps), False, i)
        fired = trm_step(trm, u, v, labels, delay, bounds=bounds)
        if fired is None:
            return Run(tuple(steps), False, i)
        t, u2, v2 = fired
        steps.append(RunStep(u, dict(v), delay, labels, t, u2, v2))
        u, v = u2, v2
    return Run(tuple(steps), True)


def accrue_state_reward(delta, d, gamma, semantics):
    """Reward accrued by waiting ``d`` units in a state with reward ``delta``.

    Waiting zero units accrues nothing under either semantics.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0, 1)")
    if d == 0 or delta == 0:
        return 0.0
    if semantics == DIGITAL:
        if d != int(d):
            raise ValueError(f"digital semantics needs integer delays, got {d}")
        return delta * (1.0 - gamma ** int(d)) / (1.0 - gamma)
    if semantics == REALTIME:
        return delta * (1.0 - gamma ** float(d)) / (-math.log(gamma))
    raise ValueError(f"unknown semantics {semantics!r}")


def discounted_return(trajectory, trm, gamma, semantics, bounds=None):
    """Discounted return of a trajectory under the machine (its induced word
    must yield a complete run; otherwise NoMatchError is raised).  Steps after
    a terminal state are ignored.

    Returns (G, run).  Each step contributes
    ``gamma^t_i * (transition reward + accrued state reward)`` where ``t_i``
    is the total time elapsed before the step (sum of d_j + 1).
    """
    u = trm.initial
    v = trm.initial_valuation()
    states = trajectory.states()
    total = 0.0
    t_elapsed = 0.0
    steps = []
    for i, step in enumerate(trajectory.steps):
        if u in trm.terminals:
            break
        word_delay = step.delay + 1
        fired = trm_step(trm, u, v, step.labels, word_delay, bounds=bounds)
        if fired is None:
            elapsed = {c: val + word_delay for c, val in v.items()}
            raise NoMatchError(u, step.labels, elapsed, i)
        t, u2, v2 = fired
        r_state = accrue_state_reward(
            trm.state_reward_at(u, states[i]), step.delay, gamma, semantics
        )
        total += gamma ** float(t_elapsed) * (t.reward + r_state)
        steps.append(RunStep(u, dict(v), word_delay, step.labels, t, u2, v2))
        t_elapsed += float(word_delay)
        u, v = u2, v2
    return total, Run(tuple(steps), True)


def bound_delays(trajectory, m):
    """Clamp trajectory delays at ``m`` (values beyond the largest guard
    constant are indistinguishable to every guard)."""
    steps = tuple(
        TrajStep(min(s.delay, m), s.action, s.next_state, s.labels)
        for s in trajectory.steps
    )
    return Trajectory(trajectory.start, steps)


def bound_word_delays(word, m):
    return [(min(d, m), labels) for d, labels in word]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TRANS_SPLIT = re.compile(r"\|(?=\s*(?:label|guard|reset|reward)\s*=)")


def parse_trm(text, name="trm", strict=True):
    """Parse the line-oriented machine format.

    Sections: ``states:``, ``initial:``, ``terminal:``, ``clocks:`` (optional),
    ``props:``, ``state_reward: <state> <value>`` (repeatable) and ``trans:``
    lines of the form::

        trans: u0 -> u1 | label=p & !q | guard=x<=14 | reset=x,y | reward=500

    ``label=`` may use ``any``/``empty``; ``|`` inside a label formula is OR
    (the field separator is only recognized before a field keyword).  With
    ``strict`` the parse fails on determinism violations; otherwise they are
    collected into ``TRM.warnings``.
    """
    states = None
    initial = None
    terminals = []
    clocks = []
    props = None
    state_rewards = {}
    raw_transitions = []
    meta_name = name

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise TrmParseError(f"expected 'key: value', got {line!r}", lineno)
        key, _, rest = line.partition(":")
        key = key.strip()
        rest = rest.strip()
        try:
            if key == "name":
                meta_name = rest
            elif key == "description":
                pass
            elif key == "states":
                states = rest.split()
            elif key == "initial":
                initial = rest
            elif key == "terminal":
                terminals = rest.split()
            elif key == "clocks":
                clocks = rest.split()
            elif key == "props":
                props = tuple(rest.split())
            elif key == "state_reward":
                parts = rest.split()
                if len(parts) != 2:
                    raise TrmParseError("expected 'state_reward: <state> <value>'")
                state_rewards[parts[0]] = float(parts[1])
            elif key == "trans":
                raw_transitions.append((lineno, rest))
            else:
                raise TrmParseError(f"unknown section {key!r}")
        except TrmParseError as e:
            if e.line is None:
                raise TrmParseError(str(e), lineno) from None
            raise

    if not states:
        raise TrmParseError("missing 'states:' line")
    if initial is None:
        raise TrmParseError("missing 'initial:' line")
    if props is None:
        props = ()
    known = set(states)
    if initial not in known:
        raise TrmParseError(f"initial state {initial!r} not declared")
    for u in terminals:
        if u not in known:
            raise TrmParseError(f"terminal state {u!r} not declared")
    for u in state_rewards:
        if u not in known:
            raise TrmParseError(f"state_reward for undeclared state {u!r}")
    clock_set = set(clocks)

    transitions = []
    for lineno, rest in raw_transitions:
        try:
            transitions.append(
                _parse_transition(rest, known, clock_set, props)
            )
        except TrmParseError as e:
            raise TrmParseError(str(e).split(": ", 1)[-1], lineno) from None

    trm = TRM(states, initial, terminals, clocks, props, state_rewards,
              transitions, name=meta_name)

    warnings = []
    reachable = {initial}
    frontier = [initial]
    while frontier:
        u = frontier.pop()
        for t in trm.transitions_from(u):
            if t.target not in reachable:
                reachable.add(t.target)
                frontier.append(t.target)
    for u in trm.terminals:
        if u not in reachable:
            warnings.append(f"terminal state {u} is unreachable")

    violations = check_deterministic(trm)
    if violations:
        msgs = [
            f"nondeterministic: {u}: [{t1}] and [{t2}] both enabled on "
            f"{set(w) or '{}'}"
            for u, t1, t2, w in violations
        ]
        if strict:
            raise TrmParseError("; ".join(msgs))
        warnings.extend(msgs)
    trm.warnings.extend(warnings)
    return trm


def _parse_transition(rest, states, clocks, props):
    fields = _TRANS_SPLIT.split(rest)
    head = fields[0].strip()
    m = re.fullmatch(r"(\S+)\s*->\s*(\S+)", head)
    if not m:
        raise TrmParseError(f"expected 'u -> v', got {head!r}")
    source, target = m.group(1), m.group(2)
    if source not in states:
        raise TrmParseError(f"undeclared source state {source!r}")
    if target not in states:
        raise TrmParseError(f"undeclared target state {target!r}")
    label_src = None
    guard = Guard()
    resets = frozenset()
    reward = 0.0
    for f in fields[1:]:
        key, _, value = f.strip().partition("=")
        key = key.strip()
        value = value.strip()
        if key == "label":
            label_src = value
        elif key == "guard":
            guard = parse_guard(value)
            for clock, _, _ in guard.atoms:
                if clock not in clocks:
                    raise TrmParseError(f"undeclared clock {clock!r} in guard")
        elif key == "reset":
            names = [x.strip() for x in value.split(",") if x.strip()]
            for n in names:
                if n not in clocks:
                    raise TrmParseError(f"undeclared clock {n!r} in reset")
            resets = frozenset(names)
        elif key == "reward":
            reward = float(value)
        else:
            raise TrmParseError(f"unknown transition field {key!r}")
    if label_src is None:
        raise TrmParseError("transition missing label=")
    label = parse_label_formula(label_src, props)
    if not guard.satisfiable():
        raise TrmParseError(f"unsatisfiable guard {guard}")
    return Transition(source, target, label, guard, resets, reward, label_src)
