"""Experiment front end: configs, seeded runs, CSV metrics, SVG plots.

A run is fully determined by (config, seed): the environment draws its
layout from the seed itself and the agent/algorithm streams are spawned
from per-purpose child sequences, so re-running a config reproduces every
metric byte except the wall-clock ms column.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .algorithms import (
    DdqnConfig,
    DdqnRun,
    Dr3Run,
    PhaseEvent,
    PpoRun,
    R3Run,
    RunRecord,
    SuccessTracker,
    TrainerConfig,
    WeakR3Run,
    build_policy,
    clone_params,
    ddqn_baseline_episode,
    dr3_episode,
    make_r3_roster,
    ppo_baseline_episode,
    r3_episode,
    weak_r3_episode,
)
from .envs import ENV_KINDS, GRID_SIZES, make_env
from .nets import NetConfig
from .ppo import PpoConfig
from .replay import CyclicBuffer

ALGORITHMS = ("ppo", "ddqn", "weak_r3", "r3", "dr3")
SPARSE_ONLY = ("weak_r3", "r3")
CSV_COLUMNS = ["episode", "steps", "reward", "success", "smoothed", "phase",
               "buf_b", "buf_blarge", "ms"]


class ConfigError(Exception):
    """Bad experiment config: unknown keys, invalid ranges, missing file."""


class SchemaError(Exception):
    """Metrics CSV does not match the fixed column schema."""


class PlotError(Exception):
    """Plot inputs unusable (no runs, empty metric column, unknown column)."""


@dataclass
class ExperimentConfig:
    algorithm: str = "ppo"
    env: str = "doorkey"
    size: int | None = 6
    seeds: list[int] = field(default_factory=lambda: [0])
    max_steps: int = 100_000
    max_episodes: int | None = None
    out_dir: str = "runs"
    smoothing_alpha: float = 0.05
    randomize_layout: bool = False
    env_max_steps: int | None = None  # per-episode cap; default 4*size^2 / 3000
    ppo: PpoConfig = field(default_factory=PpoConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ddqn: DdqnConfig = field(default_factory=DdqnConfig)

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.env not in ENV_KINDS:
            raise ConfigError(f"unknown env {self.env!r}")
        if self.env in ("crossing", "doorkey"):
            if self.size not in GRID_SIZES:
                raise ConfigError(f"size must be one of {GRID_SIZES}, got {self.size}")
            if self.algorithm == "dr3":
                raise ConfigError("dr3 targets dense-reward envs; use cartpole")
        else:
            if self.algorithm in SPARSE_ONLY:
                raise ConfigError(f"{self.algorithm} targets sparse-reward gridworlds")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not 0.0 < self.smoothing_alpha <= 1.0:
            raise ConfigError("smoothing_alpha must lie in (0, 1]")
        self.ppo.validate()
        self.trainer.validate()

    @property
    def env_tag(self) -> str:
        return f"{self.env}{self.size}" if self.env in ("crossing", "doorkey") else self.env

    def run_stem(self, seed: int) -> str:
        return f"{self.algorithm}_{self.env_tag}_seed{seed}"


_SECTION_TYPES = {"ppo": PpoConfig, "trainer": TrainerConfig, "net": NetConfig,
                  "ddqn": DdqnConfig}
_TUPLE_FIELDS = {"conv_channels", "mlp_hidden"}


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    coerced = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
               for k, v in data.items()}
    return cls(**coerced)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key == "seeds":
            kwargs[key] = [int(s) for s in value]
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = asdict(cfg)
    for name in _TUPLE_FIELDS:
        if name in data["net"]:
            data["net"][name] = list(data["net"][name])
    return data


def parse_config(path) -> ExperimentConfig:
    """Load and validate a YAML (or JSON) experiment config."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def serialize_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


# -- run construction ----------------------------------------------------------


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """(init, act, algo) generator streams for one run seed."""
    ss = np.random.SeedSequence(seed)
    init_ss, act_ss, algo_ss = ss.spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(act_ss),
            np.random.default_rng(algo_ss))


def make_run(cfg: ExperimentConfig, seed: int):
    """Build the env, agents and loop state for one seed.

    Returns (run_state, episode_fn).  The env draws its layout from the run
    seed itself; init/act/algo streams are spawned children of it.
    """
    env = make_env(cfg.env, cfg.size, seed, max_steps=cfg.env_max_steps,
                   randomize_layout=cfg.randomize_layout)
    init_rng, act_rng, algo_rng = _streams(seed)
    tr = cfg.trainer
    lr = tr.learning_rate
    tr.max_steps = cfg.max_steps
    tr.max_episodes = cfg.max_episodes
    tr.smoothing_alpha = cfg.smoothing_alpha

    if cfg.algorithm == "ppo":
        agent = build_policy(env, True, cfg.ppo.entropy_coef, init_rng, cfg.net, lr)
        return PpoRun(agent, env, tr, cfg.ppo, act_rng, algo_rng), ppo_baseline_episode
    if cfg.algorithm == "weak_r3":
        agent = build_policy(env, True, cfg.ppo.entropy_coef, init_rng, cfg.net, lr)
        run = WeakR3Run(agent, env, tr, cfg.ppo, act_rng, algo_rng,
                        buffer=CyclicBuffer(tr.buffer_capacity))
        return run, weak_r3_episode
    if cfg.algorithm == "r3":
        roster = make_r3_roster(env, init_rng, cfg.net, lr)
        run = R3Run(roster, env, tr, cfg.ppo, act_rng, algo_rng,
                    buffer=CyclicBuffer(tr.buffer_capacity),
                    large_buffer=CyclicBuffer(tr.large_buffer_capacity),
                    tracker=SuccessTracker(tr.success_rate_window))
        return run, r3_episode
    if cfg.algorithm == "dr3":
        agent = build_policy(env, True, cfg.ppo.entropy_coef, init_rng, cfg.net, lr)
        run = Dr3Run(agent, env, tr, cfg.ppo, act_rng, algo_rng,
                     buffer=CyclicBuffer(tr.dr3_buffer_capacity),
                     tracker=SuccessTracker(tr.success_rate_window))
        return run, dr3_episode
    if cfg.algorithm == "ddqn":
        from collections import deque

        agent = build_policy(env, False, 0.0, init_rng, cfg.net, cfg.ddqn.learning_rate)
        target = clone_params(agent.net)
        run = DdqnRun(agent, target, env, tr, cfg.ddqn, act_rng, algo_rng,
                      buffer=deque(maxlen=cfg.ddqn.buffer_capacity))
        return run, ddqn_baseline_episode
    raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")


def run_single(cfg: ExperimentConfig, seed: int, csv_path=None):
    """Execute one seeded run until the step (or episode) budget is spent.

    Rows are flushed to csv_path as they are produced so a crashed run still
    leaves partial output.  Returns (records, events).
    """
    run, episode_fn = make_run(cfg, seed)
    records: list[RunRecord] = []
    writer = None
    fh = None
    try:
        if csv_path is not None:
            fh = open(csv_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
        while run.cum_steps < cfg.max_steps and (
            cfg.max_episodes is None or run.episode < cfg.max_episodes
        ):
            rec = episode_fn(run)
            records.append(rec)
            if writer is not None:
                writer.writerow(record_to_row(rec))
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    events = getattr(run, "events", [])
    return records, events


def run_experiment(cfg: ExperimentConfig):
    """Run every seed of the config; one CSV (plus events sidecar) per seed.

    Returns (records_per_seed, csv_paths).
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_records = []
    paths = []
    for seed in cfg.seeds:
        stem = cfg.run_stem(seed)
        csv_path = out / f"{stem}.csv"
        records, events = run_single(cfg, seed, csv_path)
        if events:
            with open(out / f"{stem}.events.jsonl", "w", encoding="utf-8") as fh:
                for ev in events:
                    fh.write(json.dumps(asdict(ev)) + "\n")
        all_records.append(records)
        paths.append(csv_path)
    return all_records, paths


# -- CSV schema -----------------------------------------------------------------


def record_to_row(rec: RunRecord) -> list:
    return [rec.episode, rec.steps, repr(rec.reward), int(rec.success),
            repr(rec.smoothed), rec.phase, rec.buf_b, rec.buf_blarge, rec.ms]


def read_records(path) -> list[RunRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise SchemaError(f"{path}: header {header} != {CSV_COLUMNS}")
        records = []
        for row in reader:
            if len(row) != len(CSV_COLUMNS):
                raise SchemaError(f"{path}: row width {len(row)}")
            records.append(RunRecord(
                episode=int(row[0]), steps=int(row[1]), reward=float(row[2]),
                success=bool(int(row[3])), smoothed=float(row[4]), phase=row[5],
                buf_b=int(row[6]), buf_blarge=int(row[7]), ms=int(row[8]),
            ))
    return records


def smooth(series, alpha: float) -> np.ndarray:
    """Exponential moving average: y_t = alpha*x_t + (1-alpha)*y_{t-1}."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x = np.asarray(series, dtype=np.float64)
    out = np.empty_like(x)
    acc = 0.0
    for i, v in enumerate(x):
        acc = v if i == 0 else alpha * v + (1.0 - alpha) * acc
        out[i] = acc
    return out


# -- SVG plotting -----------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
_W, _H = 720, 480
_ML, _MR, _MT, _MB = 70, 20, 30, 50


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def emit_plot(runs, metric: str, path, x_field: str = "episode") -> None:
    """Deterministic SVG line chart, one polyline per (label, records) run."""
    if not runs:
        raise PlotError("no runs to plot")
    series = []
    for label, records in runs:
        if not records:
            raise PlotError(f"run {label!r} has no rows")
        try:
            xs = np.array([float(getattr(r, x_field)) for r in records])
            ys = np.array([float(getattr(r, metric)) for r in records])
        except (AttributeError, TypeError, ValueError) as exc:
            raise PlotError(f"cannot read metric {metric!r}/{x_field!r}: {exc}") from exc
        if len(ys) == 0 or not np.isfinite(ys).all():
            raise PlotError(f"metric column {metric!r} empty or non-finite")
        series.append((label, xs, ys))

    x_lo = min(s[1].min() for s in series)
    x_hi = max(s[1].max() for s in series)
    y_lo = min(s[2].min() for s in series)
    y_hi = max(s[2].max() for s in series)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return _MT + ph - (y - y_lo) / (y_hi - y_lo) * ph

    buf = io.StringIO()
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
              f'viewBox="0 0 {_W} {_H}">\n')
    buf.write(f'<rect width="{_W}" height="{_H}" fill="white"/>\n')
    buf.write(f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" '
              'stroke="black"/>\n')
    buf.write(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="black"/>\n')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        buf.write(f'<text x="{_fmt(sx(xv))}" y="{_MT + ph + 18}" font-size="11" '
                  f'text-anchor="middle">{_fmt(xv)}</text>\n')
        buf.write(f'<text x="{_ML - 6}" y="{_fmt(sy(yv) + 4)}" font-size="11" '
                  f'text-anchor="end">{_fmt(yv)}</text>\n')
    buf.write(f'<text x="{_ML + pw / 2}" y="{_H - 12}" font-size="13" '
              f'text-anchor="middle">{x_field}</text>\n')
    buf.write(f'<text x="16" y="{_MT + ph / 2}" font-size="13" text-anchor="middle" '
              f'transform="rotate(-90 16 {_MT + ph / 2})">{metric}</text>\n')
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        buf.write(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                  f'points="{points}"/>\n')
        ly = _MT + 14 + 16 * i
        buf.write(f'<line x1="{_ML + pw - 150}" y1="{ly - 4}" x2="{_ML + pw - 125}" '
                  f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>\n')
        buf.write(f'<text x="{_ML + pw - 120}" y="{ly}" font-size="11">{label}</text>\n')
    buf.write("</svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


# -- run comparison ----------------------------------------------------------------


@dataclass
class ComparisonReport:
    finals: dict  # (algorithm, seed) -> final-window mean smoothed metric
    wins: dict  # (algo_a, algo_b) -> seeds where a strictly beats b
    window: int
    plots: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"final-window (last {self.window} episodes) mean smoothed reward:"]
        for (algo, seed), val in sorted(self.finals.items()):
            lines.append(f"  {algo} seed {seed}: {val:.4f}")
        for (a, b), count in sorted(self.wins.items()):
            lines.append(f"{a} beats {b} on {count} seed(s)")
        return "\n".join(lines)


def _parse_run_name(path) -> tuple[str, int | None]:
    stem = Path(path).stem
    for algo in sorted(ALGORITHMS, key=len, reverse=True):
        if stem.startswith(algo + "_"):
            rest = stem[len(algo) + 1 :]
            if "_seed" in rest:
                try:
                    return algo, int(rest.rsplit("_seed", 1)[1])
                except ValueError:
                    pass
            return algo, None
    return stem, None


def final_window_mean(records: list[RunRecord], window: int) -> float:
    tail = records[-window:] if window > 0 else records
    if not tail:
        raise SchemaError("run has no rows to compare")
    return float(np.mean([r.smoothed for r in tail]))


def compare_runs(paths, window: int) -> ComparisonReport:
    """Final-window means per run and per-algorithm-pair win counts."""
    finals: dict = {}
    by_algo: dict = {}
    for path in paths:
        algo, seed = _parse_run_name(path)
        records = read_records(path)
        value = final_window_mean(records, window)
        finals[(algo, seed)] = value
        by_algo.setdefault(algo, {})[seed] = value
    wins: dict = {}
    algos = sorted(by_algo)
    for a in algos:
        for b in algos:
            if a == b:
                continue
            shared = set(by_algo[a]) & set(by_algo[b])
            wins[(a, b)] = sum(1 for s in shared if by_algo[a][s] > by_algo[b][s])
    return ComparisonReport(finals=finals, wins=wins, window=window)
