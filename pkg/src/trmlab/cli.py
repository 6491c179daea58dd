"""Command-line front end for the bundled machines and environments.

Subcommands::

    trm-lab train     seeded Q-learning runs; per-seed metrics CSVs + aggregate
    trm-lab eval      train, then report greedy-policy statistics per seed
    trm-lab return    exact discounted return of a recorded trajectory file
    trm-lab compare   several interpretations / imagining settings, one table
    trm-lab validate  audit a machine file (determinism, completeness, bounds)

Configuration precedence is command-line flags over ``--config`` JSON over
built-in defaults.  Every run directory receives the fully resolved spec as
``config.json`` (machine/map files are embedded verbatim), so a run can be
reproduced exactly from the snapshot alone.

Exit codes: 0 ok, 1 configuration or validation error, 2 semantic error
(a trajectory step no machine edge matches).
"""

import argparse
import csv
import json
import math
import os
import random
import sys
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .bundled import BUNDLED, DEFAULT_ENV, bundled_source, bundled_trm
from .envs import make_env
from .learning import LearnerConfig, evaluate, train
from .machine import (
    DIGITAL,
    REALTIME,
    NoMatchError,
    TrajStep,
    Trajectory,
    TrmError,
    accrue_state_reward,
    check_deterministic,
    completeness_gaps,
    discounted_return,
    max_constants,
    parse_trm,
)
from .product import make_product
from .regions import enumerate_regions

# episodes per aggregation bucket (learning curves are reported as the mean
# over each window, across seeds)
BUCKET_EPISODES = 100

_INTERP_ALIASES = {
    "digital": "digital",
    "discretized": "discretized",
    "disc": "discretized",
    "corner": "corner",
    "rm": "reward-machine",
    "reward-machine": "reward-machine",
}


class CliError(Exception):
    """Configuration mistakes reported to the user (exit code 1)."""


# ---------------------------------------------------------------------------
# experiment specs
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce a training run bit for bit."""

    env: str = None
    trm: str = None
    interp: str = "digital"
    kappa: int = 1
    gamma: float = 0.999
    steps: int = 100_000
    seeds: int = 10
    ci: bool = True
    r_crm: int = 3
    top_k: int = 15
    horizon: int = 200
    episodes: int = 20          # greedy episodes per seed (eval command)
    out: str = None
    map: str = None             # lake map override (path, display only)
    map_text: str = None        # embedded map contents
    trm_text: str = None        # embedded machine source when trm is a file
    alpha0: float = 0.9
    epsilon0: float = 0.9
    decay: float = 0.999
    alpha_floor: float = 0.01
    epsilon_floor: float = 0.01
    q_init: float = 10.0
    no_match_penalty: float = 0.0

    def validate(self):
        if self.trm is None:
            raise CliError("--trm is required (bundled id or a .trm file)")
        if self.env is None:
            raise CliError(
                "--env is required when --trm is not a bundled machine"
            )
        interp = _INTERP_ALIASES.get(self.interp)
        if interp is None:
            raise CliError(
                f"unknown interpretation {self.interp!r} "
                f"(expected digital, discretized, corner or rm)"
            )
        self.interp = interp
        if interp == "discretized":
            if self.kappa < 2:
                raise CliError("--interp discretized needs --kappa >= 2")
        elif self.kappa != 1:
            raise CliError("--kappa only applies to --interp discretized")
        if self.seeds < 1:
            raise CliError("--seeds must be at least 1")
        if self.steps < 0:
            raise CliError("--steps must be non-negative")
        if self.episodes < 1:
            raise CliError("--episodes must be at least 1")
        if self.map_text is not None and self.env != "frozen_lake":
            raise CliError("--map only applies to --env frozen_lake")
        try:
            self.learner_config()      # gamma/decay/horizon range checks
            self.load_trm()
            make_env(self.env, self.map_text)
        except (ValueError, TrmError, OSError) as exc:
            raise CliError(str(exc)) from exc
        return self

    def learner_config(self):
        return LearnerConfig(
            gamma=self.gamma,
            alpha0=self.alpha0,
            epsilon0=self.epsilon0,
            decay=self.decay,
            alpha_floor=self.alpha_floor,
            epsilon_floor=self.epsilon_floor,
            q_init=self.q_init,
            max_global_steps=self.steps,
            horizon=self.horizon,
            counterfactual=self.ci,
            r_crm=self.r_crm,
            top_k=self.top_k,
            no_match_penalty=self.no_match_penalty,
        ).validate()

    def trm_name(self):
        return self.trm if self.trm in BUNDLED else Path(self.trm).stem

    def load_trm(self):
        if self.trm_text is not None:
            return parse_trm(self.trm_text, name=self.trm_name())
        if self.trm in BUNDLED:
            return bundled_trm(self.trm)
        return parse_trm(Path(self.trm).read_text(), name=self.trm_name())

    def build_product(self):
        trm = self.load_trm()
        env = make_env(self.env, self.map_text)
        return make_product(
            trm, env, self.interp, gamma=self.gamma, kappa=self.kappa,
            no_match_penalty=self.no_match_penalty,
        )

    def label(self):
        """Short human name: interpretation + imagining toggle."""
        name = {"reward-machine": "rm", "discretized": f"disc{self.kappa}"}
        base = name.get(self.interp, self.interp)
        return base + ("+ci" if self.ci else "-ci")


_SPEC_FIELDS = {f.name for f in fields(ExperimentSpec)}

# flag destination -> spec field (flags whose names differ)
_FLAG_FIELDS = {"rcrm": "r_crm", "topk": "top_k"}


def resolve_spec(args):
    """Merge defaults, an optional --config JSON file, and flags."""
    merged = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"--config {args.config}: {exc}") from exc
        unknown = set(loaded) - _SPEC_FIELDS
        if unknown:
            raise CliError(
                f"--config {args.config}: unknown keys {sorted(unknown)}"
            )
        merged.update(loaded)
    for dest in ("env", "trm", "interp", "kappa", "gamma", "steps", "seeds",
                 "rcrm", "topk", "out", "map", "horizon", "episodes"):
        value = getattr(args, dest, None)
        if value is not None:
            merged[_FLAG_FIELDS.get(dest, dest)] = value
    if getattr(args, "ci", None) is not None:
        merged["ci"] = args.ci == "on"
    elif isinstance(merged.get("ci"), str):
        merged["ci"] = merged["ci"] == "on"
    if merged.get("map") and "map_text" not in merged:
        try:
            merged["map_text"] = Path(merged["map"]).read_text()
        except OSError as exc:
            raise CliError(f"--map {merged['map']}: {exc}") from exc
    spec = ExperimentSpec(**merged)
    if spec.env is None and spec.trm in DEFAULT_ENV:
        spec.env = DEFAULT_ENV[spec.trm]
    if spec.trm is not None and spec.trm not in BUNDLED \
            and spec.trm_text is None:
        path = Path(spec.trm)
        if not path.exists():
            raise CliError(
                f"--trm {spec.trm}: not a bundled machine "
                f"(have {', '.join(BUNDLED)}) and no such file"
            )
        spec.trm_text = path.read_text()
    return spec.validate()


# ---------------------------------------------------------------------------
# training runs and artifacts
# ---------------------------------------------------------------------------

RunArtifact = namedtuple(
    "RunArtifact",
    "outdir config_path metrics_paths aggregate_path summary buckets seeds",
)


def _train_seed(payload, seed, metrics_path):
    spec = ExperimentSpec(**payload)
    product = spec.build_product()
    result = train(product, spec.learner_config(), seed,
                   metrics_path=metrics_path)
    return seed, result.metrics


def _eval_seed(payload, seed):
    spec = ExperimentSpec(**payload)
    product = spec.build_product()
    result = train(product, spec.learner_config(), seed)
    # evaluation episodes draw from a stream disjoint from training seeds
    summary = evaluate(product, result.qtable, episodes=spec.episodes,
                       seed=seed + 10_000, horizon=spec.horizon)
    summary["seed"] = seed
    return seed, summary


def _run_seeds(worker, spec, extra_args):
    """Run one worker call per seed, merged back in seed order.

    Each seed owns its environment, product and RNG; seeds only run in
    parallel when the machine actually has more than one CPU.
    """
    payload = asdict(spec)
    jobs = [(payload, seed) + extra_args(seed) for seed in range(spec.seeds)]
    workers = min(spec.seeds, os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, *zip(*jobs)))
    else:
        results = [worker(*job) for job in jobs]
    return [r for _, r in sorted(results, key=lambda pair: pair[0])]


def _csv_float(x):
    """The value a reader of the per-seed CSVs recovers (6-decimal prints)."""
    return float(f"{x:.6f}")


def aggregate_metrics(per_seed, width=BUCKET_EPISODES):
    """Pool per-seed episode rows into fixed-width episode buckets.

    Returns rows (bucket, n, mean/std return, mean/std episode time,
    terminal rate).  Values are rounded exactly as the per-seed CSVs print
    them, so recomputing the aggregate from those files reproduces it.
    """
    buckets = {}
    for metrics in per_seed:
        for row in metrics:
            buckets.setdefault(row["episode"] // width, []).append((
                _csv_float(row["return"]),
                _csv_float(row["episode_time"]),
                float(row["terminal_reached"]),
            ))
    out = []
    for b in sorted(buckets):
        arr = np.asarray(buckets[b])
        out.append((
            b, len(arr),
            float(arr[:, 0].mean()), float(arr[:, 0].std()),
            float(arr[:, 1].mean()), float(arr[:, 1].std()),
            float(arr[:, 2].mean()),
        ))
    return out


AGGREGATE_FIELDS = (
    "bucket", "episodes", "mean_return", "std_return",
    "mean_episode_time", "std_episode_time", "terminal_rate",
)


def write_aggregate(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_FIELDS)
        for row in rows:
            # full-precision floats: means must round-trip exactly
            writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


def final_window(metrics, width=BUCKET_EPISODES):
    """Mean return / episode time / terminal rate over the last episodes."""
    rows = metrics[-width:]
    if not rows:
        return None
    return {
        "episodes": len(rows),
        "final_return": sum(r["return"] for r in rows) / len(rows),
        "final_episode_time": sum(r["episode_time"] for r in rows) / len(rows),
        "terminal_rate": sum(r["terminal_reached"] for r in rows) / len(rows),
    }


def summarize(per_seed):
    finals = []
    for seed, metrics in enumerate(per_seed):
        entry = {"seed": seed, "total_episodes": len(metrics)}
        entry.update(final_window(metrics) or {})
        finals.append(entry)
    returns = [f["final_return"] for f in finals if "final_return" in f]
    times = [f["final_episode_time"] for f in finals
             if "final_episode_time" in f]
    summary = {"per_seed": finals}
    if returns:
        summary.update(
            final_mean_return=float(np.mean(returns)),
            final_std_return=float(np.std(returns)),
            final_mean_episode_time=float(np.mean(times)),
            final_std_episode_time=float(np.std(times)),
        )
    return summary


def run_training(spec, outdir=None):
    """Train all seeds of a spec; write CSVs, snapshot and summary."""
    outdir = Path(outdir if outdir is not None else spec.out
                  or f"runs/{spec.env}_{spec.trm_name()}_{spec.label()}")
    outdir.mkdir(parents=True, exist_ok=True)
    config_path = outdir / "config.json"
    config_path.write_text(
        json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n"
    )
    metrics_paths = [
        outdir / f"metrics_seed{seed}.csv" for seed in range(spec.seeds)
    ]
    per_seed = _run_seeds(
        _train_seed, spec, lambda seed: (str(metrics_paths[seed]),)
    )
    buckets = aggregate_metrics(per_seed)
    aggregate_path = outdir / "aggregate.csv"
    write_aggregate(aggregate_path, buckets)
    summary = summarize(per_seed)
    (outdir / "summary.json").write_text(
        json.dumps(summary, indent=2) + "\n"
    )
    return RunArtifact(outdir, config_path, metrics_paths, aggregate_path,
                       summary, buckets, list(range(spec.seeds)))


def _print_run(spec, artifact):
    kappa = f" kappa={spec.kappa}" if spec.interp == "discretized" else ""
    print(f"{spec.env} x {spec.trm_name()}: {spec.interp}{kappa} "
          f"ci={'on' if spec.ci else 'off'} steps={spec.steps} "
          f"seeds={spec.seeds} gamma={spec.gamma}")
    summary = artifact.summary
    if "final_mean_return" in summary:
        print(f"final window (last <= {BUCKET_EPISODES} episodes per seed): "
              f"return {summary['final_mean_return']:.4f} "
              f"+/- {summary['final_std_return']:.4f}, "
              f"episode time {summary['final_mean_episode_time']:.2f} "
              f"+/- {summary['final_std_episode_time']:.2f}")
    else:
        print("no episodes completed (step budget 0?)")
    print(f"wrote {artifact.outdir}/ ({len(artifact.metrics_paths)} seed "
          f"CSVs, aggregate.csv, summary.json, config.json)")


def cmd_train(args):
    spec = resolve_spec(args)
    artifact = run_training(spec)
    _print_run(spec, artifact)
    return 0


def cmd_eval(args):
    spec = resolve_spec(args)
    summaries = _run_seeds(_eval_seed, spec, lambda seed: ())
    print(f"{spec.env} x {spec.trm_name()}: {spec.interp} greedy evaluation, "
          f"{spec.episodes} episodes per seed after {spec.steps} steps")
    print(f"{'seed':>4}  {'mean return':>12}  {'std':>8}  "
          f"{'episode time':>12}  {'success':>7}")
    for s in summaries:
        print(f"{s['seed']:>4}  {s['mean_return']:>12.4f}  "
              f"{s['std_return']:>8.4f}  {s['mean_episode_time']:>12.2f}  "
              f"{s['success_rate']:>7.2f}")
    mean = float(np.mean([s["mean_return"] for s in summaries]))
    std = float(np.std([s["mean_return"] for s in summaries]))
    success = float(np.mean([s["success_rate"] for s in summaries]))
    print(f"across seeds: return {mean:.4f} +/- {std:.4f}, "
          f"success {success:.2f}")
    if spec.out:
        outdir = Path(spec.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.json").write_text(
            json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n"
        )
        with open(outdir / "eval.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("seed", "episodes", "mean_return", "std_return",
                             "mean_episode_time", "success_rate"))
            for s in summaries:
                writer.writerow((s["seed"], s["episodes"],
                                 repr(s["mean_return"]), repr(s["std_return"]),
                                 repr(s["mean_episode_time"]),
                                 repr(s["success_rate"])))
        print(f"wrote {outdir}/ (eval.csv, config.json)")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

_ARM_KEYS = {"name", "interp", "kappa", "ci", "rcrm", "topk", "env", "trm"}


def parse_arm(text):
    """An arm override: ``key=value`` pairs, or bare interpretation names.

    ``--arm corner`` is shorthand for ``--arm interp=corner``.
    """
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            out["interp"] = part
            continue
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in _ARM_KEYS:
            raise CliError(
                f"--arm {text!r}: unknown key {key!r} "
                f"(allowed: {', '.join(sorted(_ARM_KEYS))})"
            )
        if any(ch.isspace() for ch in value):
            # a space in a value is almost always a forgotten comma, and the
            # rest of the field would be swallowed silently
            raise CliError(
                f"--arm {text!r}: value {value!r} contains whitespace "
                "(separate fields with commas)"
            )
        out[key] = value
    return out


def arm_spec(base, overrides):
    name = overrides.pop("name", None)
    for key in ("env", "trm"):
        if key in overrides:
            if overrides[key] != getattr(base, key):
                raise CliError(
                    "compare arms must share the environment and machine "
                    f"(arm sets {key}={overrides[key]!r}, "
                    f"base has {getattr(base, key)!r})"
                )
            overrides.pop(key)
    mapped = {}
    for key, value in overrides.items():
        field = _FLAG_FIELDS.get(key, key)
        if field in ("kappa", "r_crm", "top_k"):
            value = int(value)
        elif field == "ci":
            value = value == "on"
        mapped[field] = value
    interp = mapped.get("interp")
    if interp is not None and "kappa" not in mapped \
            and _INTERP_ALIASES.get(interp) != "discretized":
        mapped["kappa"] = 1  # switching off the grid drops the base kappa
    spec = replace(base, **mapped).validate()
    return name or spec.label(), spec


def cmd_compare(args):
    base = resolve_spec(args)
    arm_texts = args.arm or []
    arms = [arm_spec(base, parse_arm(text)) for text in arm_texts]
    if not arms:
        arms = [(base.label(), base)]
    names = [name for name, _ in arms]
    if len(set(names)) != len(names):
        raise CliError(f"arm names collide: {names} (use name=... to rename)")
    outdir = Path(base.out or f"runs/compare_{base.env}_{base.trm_name()}")
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    all_buckets = []
    for name, spec in arms:
        spec = replace(spec, out=str(outdir / name))
        artifact = run_training(spec)
        _print_run(spec, artifact)
        print()
        rows.append((name, artifact.summary))
        all_buckets.append((name, artifact.buckets))

    with open(outdir / "buckets.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("arm",) + AGGREGATE_FIELDS)
        for name, buckets in all_buckets:
            for row in buckets:
                writer.writerow([name, row[0], row[1]]
                                + [repr(v) for v in row[2:]])
    with open(outdir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("arm", "final_mean_return", "final_std_return",
                         "final_mean_episode_time", "final_std_episode_time"))
        for name, summary in rows:
            writer.writerow([name] + [
                repr(summary.get(k)) for k in
                ("final_mean_return", "final_std_return",
                 "final_mean_episode_time", "final_std_episode_time")
            ])

    width = max(len(name) for name in names)
    print(f"{'arm':<{width}}  {'final return':>20}  {'episode time':>16}")
    for name, summary in rows:
        if "final_mean_return" not in summary:
            print(f"{name:<{width}}  {'(no episodes)':>20}")
            continue
        ret = (f"{summary['final_mean_return']:.4f} "
               f"+/- {summary['final_std_return']:.4f}")
        tim = (f"{summary['final_mean_episode_time']:.2f} "
               f"+/- {summary['final_std_episode_time']:.2f}")
        print(f"{name:<{width}}  {ret:>20}  {tim:>16}")
    print(f"wrote {outdir}/ (per-arm run directories, buckets.csv, "
          f"comparison.csv)")
    return 0


# ---------------------------------------------------------------------------
# exact returns of recorded trajectories
# ---------------------------------------------------------------------------


def read_trajectory(path):
    """Parse a trajectory file: an ``env:`` header, then ``delay action``
    lines.  Delays may be fractions or decimals (kept exact)."""
    env_name = None
    steps = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if env_name is None:
            if not line.startswith("env:"):
                raise CliError(
                    f"{path}:{lineno}: expected an 'env: <name>' header"
                )
            env_name = line[len("env:"):].strip()
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CliError(
                f"{path}:{lineno}: expected '<delay> <action>', got {line!r}"
            )
        try:
            delay = Fraction(parts[0])
        except (ValueError, ZeroDivisionError) as exc:
            raise CliError(f"{path}:{lineno}: bad delay {parts[0]!r}") from exc
        if delay < 0:
            raise CliError(f"{path}:{lineno}: negative delay {parts[0]}")
        steps.append((lineno, delay, parts[1]))
    if env_name is None:
        raise CliError(f"{path}: missing 'env: <name>' header")
    return env_name, steps


def _resolve_action(env, token, path, lineno):
    if token in env.action_names:
        return env.action_names.index(token)
    try:
        action = int(token)
    except ValueError:
        action = -1
    if not 0 <= action < env.n_actions:
        raise CliError(
            f"{path}:{lineno}: unknown action {token!r} for {env.name} "
            f"(have {', '.join(env.action_names)})"
        )
    return action


def replay_trajectory(env, steps, path):
    """Feed the recorded (delay, action) choices through the environment.

    Stochastic environments are replayed on a fixed seed-0 stream so the
    printed return is reproducible; the trajectory records choices, not
    outcomes.
    """
    rng = random.Random(0)
    state = env.initial_state()
    out = []
    for i, (lineno, delay, token) in enumerate(steps):
        action = _resolve_action(env, token, path, lineno)
        next_state, env_done = env.step(state, action, rng)
        labels = env.labels(state, action, next_state)
        out.append(TrajStep(_as_number(delay), action, next_state, labels))
        state = next_state
        if env_done and i + 1 < len(steps):
            print(f"note: environment episode ended at step {i}; "
                  f"{len(steps) - i - 1} remaining lines ignored",
                  file=sys.stderr)
            break
    return Trajectory(env.initial_state(), tuple(out))


def _as_number(delay):
    return int(delay) if delay.denominator == 1 else delay


def _fmt_labels(labels):
    return "{" + ",".join(sorted(labels)) + "}"


def _fmt_valuation(valuation):
    if not valuation:
        return "-"
    return " ".join(f"{c}={v}" for c, v in sorted(valuation.items()))


def print_run_detail(traj, trm, run, gamma, semantics):
    states = traj.states()
    t = 0.0
    total = 0.0
    for i, rs in enumerate(run.steps):
        waited = rs.delay - 1
        accrued = accrue_state_reward(
            trm.state_reward_at(rs.state, states[i]), waited, gamma, semantics
        )
        disc = gamma ** t
        contribution = disc * (rs.transition.reward + accrued)
        total += contribution
        print(f"step {i}: ({rs.state}, {_fmt_valuation(rs.valuation)}) "
              f"--wait {waited}, {_fmt_labels(rs.labels)}--> "
              f"({rs.next_state}, {_fmt_valuation(rs.next_valuation)})")
        print(f"        fires [{rs.transition}]  edge "
              f"{rs.transition.reward:+g}  accrued {accrued:+.4f}  "
              f"discount {disc:.6f}  contributes {contribution:+.4f}")
        t += float(rs.delay)
    return total


def cmd_return(args):
    if args.trm is None:
        raise CliError("--trm is required")
    semantics = {"digital": DIGITAL, "realtime": REALTIME,
                 "real-time": REALTIME}.get(args.interp or "digital")
    if semantics is None:
        raise CliError(
            f"--interp for 'return' selects the reward semantics: "
            f"digital or realtime (got {args.interp!r})"
        )
    gamma = args.gamma if args.gamma is not None else 0.9
    if not 0.0 < gamma < 1.0:
        raise CliError("--gamma must be in (0, 1)")
    if args.trm in BUNDLED:
        trm = bundled_trm(args.trm)
    else:
        path = Path(args.trm)
        if not path.exists():
            raise CliError(f"--trm {args.trm}: no such bundled machine "
                           f"or file (have {', '.join(BUNDLED)})")
        trm = parse_trm(path.read_text(), name=path.stem)
    env_name, raw_steps = read_trajectory(args.trajectory)
    map_text = Path(args.map).read_text() if args.map else None
    env = make_env(env_name, map_text)
    traj = replay_trajectory(env, raw_steps, args.trajectory)
    print(f"trajectory: {env_name}, {len(traj.steps)} steps, "
          f"{semantics} semantics, gamma = {gamma}")
    try:
        g, run = discounted_return(traj, trm, gamma, semantics)
    except NoMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    detail_total = print_run_detail(traj, trm, run, gamma, semantics)
    assert abs(detail_total - g) < 1e-9
    print(f"G = {g:.4f}")
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

# beyond this many prospective regions the exact enumeration is skipped
_REGION_ENUM_LIMIT = 200_000


def _region_report(trm):
    if not trm.clocks:
        return "1 (no clocks)"
    mx, _ = max_constants(trm)
    bound = math.factorial(len(trm.clocks))
    for c in trm.clocks:
        bound *= 2 * mx[c] + 2
    if bound > _REGION_ENUM_LIMIT:
        return f"<= {bound} (too many to enumerate)"
    count = sum(1 for _ in enumerate_regions(trm.clocks, mx))
    return f"{count} over clocks ({', '.join(trm.clocks)})"


def cmd_validate(args):
    if args.trm is None:
        raise CliError("--trm is required")
    if args.trm == "pq":
        trm = bundled_trm("pq")
    else:
        if args.trm in BUNDLED:
            text, name = bundled_source(args.trm), args.trm
        else:
            path = Path(args.trm)
            if not path.exists():
                raise CliError(f"--trm {args.trm}: no such bundled machine "
                               f"or file (have {', '.join(BUNDLED)})")
            text, name = path.read_text(), path.stem
        trm = parse_trm(text, name=name, strict=False)

    print(f"machine {trm.name}: states={len(trm.states)} "
          f"transitions={len(trm.transitions)} clocks={len(trm.clocks)} "
          f"props={len(trm.props)}")

    violations = check_deterministic(trm)
    if violations:
        print(f"determinism: {len(violations)} violations")
        for u, t1, t2, witness in violations:
            print(f"  {u}: [{t1}] and [{t2}] both enabled on "
                  f"{_fmt_labels(witness)}")
    else:
        print("determinism: ok")

    gaps = completeness_gaps(trm)
    if gaps:
        print(f"completeness: {len(gaps)} gaps (unmatched steps end the "
              f"episode with the configured penalty)")
        for u, labels, valuation in gaps[:5]:
            print(f"  {u} on {_fmt_labels(labels)} with "
                  f"{_fmt_valuation(valuation)}")
        if len(gaps) > 5:
            print(f"  ... and {len(gaps) - 5} more")
    else:
        print("completeness: ok")

    mx, md = max_constants(trm)
    if mx:
        bounds = "; ".join(f"M_{c} = {mx[c]}" for c in trm.clocks)
        print(f"clock bounds: {bounds}; max useful delay M_d = {md}")
    else:
        print("clock bounds: none (no clocks)")
    print(f"regions: {_region_report(trm)}")
    return 1 if violations else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_spec_flags(p, eval_episodes=False):
    p.add_argument("--env", help="grid2x2 | line3 | taxi | frozen_lake "
                   "(defaults to the bundled machine's usual pairing)")
    p.add_argument("--trm", help="bundled machine id "
                   f"({', '.join(BUNDLED)}) or a .trm file")
    p.add_argument("--interp",
                   help="digital | discretized | corner | rm")
    p.add_argument("--kappa", type=int, help="grid refinement (discretized)")
    p.add_argument("--gamma", type=float, help="discount (default 0.999)")
    p.add_argument("--steps", type=int,
                   help="global training step budget (default 100000)")
    p.add_argument("--seeds", type=int,
                   help="independent runs, seeds 0..N-1 (default 10)")
    p.add_argument("--ci", choices=("on", "off"),
                   help="counterfactual imagining (default on)")
    p.add_argument("--rcrm", type=int, help="imagining radius (default 3)")
    p.add_argument("--topk", type=int,
                   help="imagined experiences kept per step (default 15)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--map", help="frozen-lake map file override")
    p.add_argument("--horizon", type=int,
                   help="decision points per episode (default 200)")
    if eval_episodes:
        p.add_argument("--episodes", type=int,
                       help="greedy episodes per seed (default 20)")
    p.add_argument("--config", help="JSON file with spec fields; flags win")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trm-lab",
        description="Timed reward machines: train delay-aware policies, "
                    "compute exact returns, compare time interpretations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run seeded training experiments")
    _add_spec_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="train, then report greedy statistics")
    _add_spec_flags(p, eval_episodes=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "return",
        help="exact discounted return of a trajectory file",
        description="The file holds an 'env: <name>' header and one "
                    "'<delay> <action>' step per line; actions may be names "
                    "or indices.  Stochastic environments replay on a fixed "
                    "seed-0 stream.",
    )
    p.add_argument("trajectory", help="trajectory file")
    p.add_argument("--trm", help="bundled machine id or .trm file")
    p.add_argument("--gamma", type=float, help="discount (default 0.9)")
    p.add_argument("--interp", help="digital | realtime (default digital)")
    p.add_argument("--map", help="frozen-lake map file override")
    p.set_defaults(fn=cmd_return)

    p = sub.add_parser("compare",
                       help="train several arms over one env/machine pair")
    _add_spec_flags(p)
    p.add_argument("--arm", action="append",
                   help="arm overrides, e.g. --arm corner --arm "
                        "interp=digital,ci=off,name=plain (repeatable)")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("validate", help="audit a machine file")
    p.add_argument("--trm", help="bundled machine id or .trm file")
    p.set_defaults(fn=cmd_validate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrmError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
