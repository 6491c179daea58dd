"""Clock regions and the corner-point abstraction.

A region groups clock valuations that no guard can tell apart *now or at any
point in the future*: the integer part of every clock (up to its maximum
relevant constant), which clocks sit exactly on an integer, and the relative
order of the fractional parts.  Values past a clock's maximum constant are
collapsed into a saturated marker — they behave like infinity for every
guard.

A region is stored as

* ``h`` — integer part per clock (pinned to the bound for saturated clocks),
* ``partition`` — an ordered tuple of clock classes: class 0 holds the
  integral clocks (possibly empty), classes 1..p hold clocks with equal
  fractional parts, ordered by increasing fraction,
* ``saturated`` — the clocks past their bound (always members of class 0).

Corner points are the integral valuations in a region's closure, obtained by
rounding fractional classes up suffix-first (largest fractions are closest to
the next integer).  A corner configuration pairs a region with one of its
corners and is advanced by ``(delay, boundary-crossing count)`` tuples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

_SATURATION_EXCESS = 0.5  # representative overshoot used when concretizing


@dataclass(frozen=True)
class Region:
    clocks: tuple
    h: tuple
    saturated: frozenset
    partition: tuple  # tuple of frozensets; partition[0] = integral clocks

    def integer_part(self, clock):
        return self.h[self.clocks.index(clock)]

    def is_saturated(self, clock):
        return clock in self.saturated

    def is_integral(self, clock):
        return clock in self.partition[0]

    def fractional_classes(self):
        return self.partition[1:]

    def fully_saturated(self):
        return len(self.saturated) == len(self.clocks)

    def h_map(self):
        return dict(zip(self.clocks, self.h))

    def __str__(self):
        hs = ",".join(
            f"{c}:{'inf' if c in self.saturated else v}"
            for c, v in zip(self.clocks, self.h)
        )
        frac = " < ".join(
            "{" + ",".join(sorted(cls)) + "}" for cls in self.partition
        )
        return f"h={{{hs}}}; frac=[{frac}]"


@dataclass(frozen=True)
class CornerConfiguration:
    region: Region
    corner: tuple  # integral valuation aligned with region.clocks

    def __str__(self):
        return f"({self.region}; corner={self.corner})"


def _check_bounds(region, bounds):
    missing = [c for c in region.clocks if c not in bounds]
    if missing:
        raise ValueError(f"bounds missing clocks {missing}")


def region_of(valuation, bounds):
    """The region of a concrete valuation.

    Values above a clock's bound (or ``math.inf``) map to the saturated
    marker.  Fractional parts are compared exactly, so pass Fractions (or
    floats that are exact, e.g. multiples of 2^-k) when the distinction
    matters.
    """
    clocks = tuple(sorted(valuation))
    h = []
    saturated = set()
    integral = set()
    frac_of = {}
    for c in clocks:
        v = valuation[c]
        m = bounds[c]
        if v == math.inf or v > m:
            saturated.add(c)
            h.append(m)
            continue
        ip = math.floor(v)
        frac = v - ip
        h.append(int(ip))
        if frac == 0:
            integral.add(c)
        else:
            frac_of[c] = frac
    classes = []
    for c in sorted(frac_of, key=lambda c: (frac_of[c], c)):
        if classes and frac_of[classes[-1][0]] == frac_of[c]:
            classes[-1].append(c)
        else:
            classes.append([c])
    partition = (frozenset(saturated | integral),) + tuple(
        frozenset(cls) for cls in classes
    )
    return Region(clocks, tuple(h), frozenset(saturated), partition)


def region_invariants_ok(region, bounds):
    """Structural sanity: classes partition the clocks, saturated clocks are
    integral and pinned to their bound, and no fractional clock sits at its
    bound."""
    seen = set()
    for i, cls in enumerate(region.partition):
        if i > 0 and not cls:
            return False
        if cls & seen:
            return False
        seen |= cls
    if seen != set(region.clocks):
        return False
    if not region.saturated <= region.partition[0]:
        return False
    for c, h in zip(region.clocks, region.h):
        if not 0 <= h <= bounds[c]:
            return False
        if c in region.saturated and h != bounds[c]:
            return False
        if h == bounds[c] and not region.is_integral(c):
            return False
    return True


def region_satisfies(region, guard, bounds=None):
    """Whether every valuation in the region satisfies the guard.

    Regions answer guards uniformly, so this is also "whether any valuation
    does".  Guard constants must not exceed the bounds the region was built
    with (otherwise saturation would be ambiguous).
    """
    for clock, (lo, lo_s, hi, hi_s) in guard.intervals.items():
        if clock not in region.clocks:
            raise ValueError(f"guard mentions unknown clock {clock}")
        if bounds is not None:
            m = bounds[clock]
            for bound in (lo, hi):
                if bound is not None and bound > m:
                    raise ValueError(
                        f"guard constant {bound} on {clock} exceeds bound {m}"
                    )
        h = region.integer_part(clock)
        if region.is_saturated(clock):
            value_lo = math.inf  # behaves above every constant
            value_hi = math.inf
        elif region.is_integral(clock):
            value_lo = value_hi = h
        else:
            # strictly between h and h+1
            value_lo = h + 0.5
            value_hi = h + 0.5
        if value_lo < lo or (value_lo == lo and lo_s):
            return False
        if hi is not None and (value_hi > hi or (value_hi == hi and hi_s)):
            return False
    return True


def corners(region):
    """The region's corner points: round fractional classes up, largest
    fractions first.  A region with p fractional classes has p + 1 corners."""
    idx = {c: i for i, c in enumerate(region.clocks)}
    base = list(region.h)
    out = [tuple(base)]
    for cls in reversed(region.fractional_classes()):
        for c in cls:
            base[idx[c]] += 1
        out.append(tuple(base))
    return tuple(out)


def time_successor(region, bounds):
    """The next region reached by letting time elapse.

    Integral, non-saturated clocks immediately pick up a fraction (or
    saturate, if already at their bound); otherwise the largest fractional
    class reaches the next integer.  A fully saturated region is a fixed
    point.
    """
    _check_bounds(region, bounds)
    c0 = region.partition[0]
    active = c0 - region.saturated
    if active:
        newly_sat = frozenset(
            c for c in active if region.integer_part(c) == bounds[c]
        )
        moving = active - newly_sat
        partition = (region.saturated | newly_sat,)
        if moving:
            partition += (moving,)
        partition += region.fractional_classes()
        return Region(
            region.clocks, region.h, region.saturated | newly_sat, partition
        )
    if region.fractional_classes():
        last = region.partition[-1]
        idx = {c: i for i, c in enumerate(region.clocks)}
        h = list(region.h)
        for c in last:
            h[idx[c]] += 1
        partition = (c0 | last,) + region.partition[1:-1]
        return Region(region.clocks, tuple(h), region.saturated, partition)
    return region  # fully saturated (or clockless)


def time_predecessor(region, bounds):
    """Inverse of time_successor, or None where no unique inverse exists.

    Saturation is never unwound (all values past the bound are collapsed, so
    the pre-saturation integer part is unknowable), and nothing precedes a
    region with an integral clock at zero.
    """
    _check_bounds(region, bounds)
    c0 = region.partition[0]
    active = c0 - region.saturated
    if active:
        # these clocks just crossed an integer from the largest fractional class
        if any(region.integer_part(c) == 0 for c in active):
            return None
        idx = {c: i for i, c in enumerate(region.clocks)}
        h = list(region.h)
        for c in active:
            h[idx[c]] -= 1
        partition = (region.saturated,) + region.fractional_classes() + (active,)
        return Region(region.clocks, tuple(h), region.saturated, partition)
    if region.fractional_classes():
        # the smallest fractional class was integral a moment ago
        first = region.partition[1]
        partition = (c0 | first,) + region.partition[2:]
        return Region(region.clocks, region.h, region.saturated, partition)
    return None  # fully saturated: ambiguous


def reset_region(region, resets):
    """Set the given clocks to zero (integral, unsaturated)."""
    resets = frozenset(resets)
    unknown = resets - set(region.clocks)
    if unknown:
        raise ValueError(f"reset of unknown clocks {sorted(unknown)}")
    idx = {c: i for i, c in enumerate(region.clocks)}
    h = list(region.h)
    for c in resets:
        h[idx[c]] = 0
    partition = [region.partition[0] - resets | resets]
    for cls in region.fractional_classes():
        cls = cls - resets
        if cls:
            partition.append(cls)
    return Region(
        region.clocks, tuple(h), region.saturated - resets, tuple(partition)
    )


def reset_corner(region, corner, resets):
    idx = {c: i for i, c in enumerate(region.clocks)}
    out = list(corner)
    for c in resets:
        out[idx[c]] = 0
    return tuple(out)


def shift_region(region, delta, bounds):
    """Elapse an integral amount of time: integer parts shift, clocks passing
    their bound saturate (a fractional clock reaching its bound exactly also
    saturates — its true value is already beyond it)."""
    if delta < 0 or delta != int(delta):
        raise ValueError("shift must be a non-negative integer")
    _check_bounds(region, bounds)
    if delta == 0:
        return region
    idx = {c: i for i, c in enumerate(region.clocks)}
    h = list(region.h)
    newly_sat = set()
    for c in region.clocks:
        if c in region.saturated:
            continue
        m = bounds[c]
        nh = region.integer_part(c) + delta
        if nh > m or (nh == m and not region.is_integral(c)):
            newly_sat.add(c)
            h[idx[c]] = m
        else:
            h[idx[c]] = nh
    saturated = region.saturated | newly_sat
    partition = [region.partition[0] | newly_sat]
    for cls in region.fractional_classes():
        cls = cls - newly_sat
        if cls:
            partition.append(cls)
    return Region(region.clocks, tuple(h), frozenset(saturated), tuple(partition))


def shift_corner(corner, region, delta, bounds):
    return tuple(
        min(v + delta, bounds[c]) for v, c in zip(corner, region.clocks)
    )


def advance(config, delta, sigma, bounds):
    """Advance a corner configuration by ``delta`` whole time units and
    ``sigma`` region-boundary crossings (negative: crossings undone).

    Returns the successor configuration, or None when the combination is
    invalid: the boundary walk runs off the region graph, or the shifted
    corner is not a corner of the resulting region.
    """
    region = shift_region(config.region, delta, bounds)
    corner = shift_corner(config.corner, config.region, delta, bounds)
    steps = abs(int(sigma))
    for _ in range(steps):
        if sigma > 0:
            nxt = time_successor(region, bounds)
            if nxt == region:
                return None  # no boundary left to cross
        else:
            nxt = time_predecessor(region, bounds)
            if nxt is None:
                return None
        region = nxt
    if corner not in corners(region):
        return None
    return CornerConfiguration(region, corner)


def initial_region(clocks, bounds):
    clocks = tuple(sorted(clocks))
    return Region(
        clocks, (0,) * len(clocks), frozenset(), (frozenset(clocks),)
    )


def initial_configuration(clocks, bounds):
    r = initial_region(clocks, bounds)
    return CornerConfiguration(r, (0,) * len(r.clocks))


def _ordered_partitions(items):
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for tail in _ordered_partitions(rest):
        # first joins an existing class or forms a new one at any position
        for i, cls in enumerate(tail):
            yield tail[:i] + (cls | {first},) + tail[i + 1:]
        for i in range(len(tail) + 1):
            yield tail[:i] + (frozenset({first}),) + tail[i:]


def enumerate_regions(clocks, bounds):
    """All regions over the given clocks and per-clock bounds."""
    clocks = tuple(sorted(clocks))
    for c in clocks:
        if c not in bounds:
            raise ValueError(f"bounds missing clock {c}")
    pos = {c: i for i, c in enumerate(clocks)}

    def rec(i, h, saturated, unsat):
        if i == len(clocks):
            mandatory = frozenset(
                c for c in unsat if h[pos[c]] == bounds[c]
            )
            free = tuple(sorted(set(unsat) - mandatory))
            for split in _integral_splits(free):
                integral, fractional = split
                for classes in _ordered_partitions(fractional):
                    yield Region(
                        clocks,
                        tuple(h),
                        frozenset(saturated),
                        (frozenset(saturated) | mandatory | integral,)
                        + classes,
                    )
            return
        c = clocks[i]
        # saturated
        yield from rec(i + 1, h + [bounds[c]], saturated | {c}, unsat)
        for v in range(bounds[c] + 1):
            yield from rec(i + 1, h + [v], saturated, unsat | {c})

    yield from rec(0, [], set(), set())


def _integral_splits(free):
    n = len(free)
    for mask in range(2 ** n):
        integral = frozenset(free[i] for i in range(n) if mask >> i & 1)
        fractional = tuple(c for c in free if c not in integral)
        yield integral, fractional


def concretize(config, eps):
    """A concrete valuation inside ``config.region`` within ``eps`` of the
    corner (an ε-corner).  Down-rounded fractional classes sit just above
    their integer part, up-rounded ones just below the next integer, order
    preserved.  Values come back as Fractions so that equal fractional parts
    stay exactly equal."""
    region, corner = config.region, config.corner
    n = len(region.clocks)
    if not 0 < eps < Fraction(1, 2 * (n + 1)):
        raise ValueError("eps must be in (0, 1/(2(|X|+1)))")
    if corner not in corners(region):
        raise ValueError(f"{corner} is not a corner of {region}")
    eps = Fraction(eps)
    idx = {c: i for i, c in enumerate(region.clocks)}
    p = len(region.fractional_classes())
    out = {}
    for c in region.saturated:
        out[c] = region.integer_part(c) + eps * Fraction(_SATURATION_EXCESS)
    for c in region.partition[0] - region.saturated:
        out[c] = Fraction(region.integer_part(c))
    for i, cls in enumerate(region.fractional_classes(), start=1):
        probe = next(iter(cls))
        rounded_up = corner[idx[probe]] == region.integer_part(probe) + 1
        for c in cls:
            h = region.integer_part(c)
            if rounded_up:
                out[c] = h + 1 - (p + 1 - i) * eps / (p + 1)
            else:
                out[c] = h + i * eps / (p + 1)
    return out
