"""Experiment runner: configs, seed streams, metrics files, sweeps and summaries."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .envs import ENVS, Env, make_env
from .errors import CheckpointError, ConfigError
from .metrics import COLUMNS, EPISODE_COLUMNS, EpisodeRecord, MetricsRow
from .nn import params_from_dict, params_to_dict
from .policy import GaussianPolicy, SigmaSchedule, act
from .ppo import ALGOS, STREAMS, AlgoState, PpoConfig, ValueFunction, make_algo_state, train_iteration

log = logging.getLogger(__name__)

# (reward_low, reward_high) anchors of the sigma schedule per task
REWARD_ANCHORS = {
    "pendulum": (-1400.0, -200.0),
    "mountaincar": (-40.0, 90.0),
    "pointtrap": (-1500.0, 300.0),
}
DEFAULT_C1 = 0.05
DEFAULT_BETA = 0.2
FINAL_WINDOW = 100
CHECKPOINT_FORMAT = "iemppo-checkpoint/1"


@dataclass
class RunConfig:
    env: str = "pendulum"
    algo: str = "ppo"
    seed: int = 0
    total_env_steps: int = 300_000
    steps_per_iteration: int = 4000
    # PPO
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    epochs: int = 80
    minibatch_size: int = 64
    policy_lr: float = 0.0003
    value_lr: float = 0.001
    kl_limit: float = 0.015
    normalize_advantages: bool = True
    hidden_dims: tuple[int, ...] = (64, 64)
    # exploration noise schedule; anchors default per environment
    sigma_init: float = 0.6
    sigma_min: float = 0.1
    reward_low: float | None = None
    reward_high: float | None = None
    # bonus modules; None means "algorithm default"
    c1: float | None = None
    beta: float | None = None
    n_max: int = 16
    bonus_offset: float = 0.0
    intrinsic_lr: float = 0.001
    standardize_intrinsic: bool = False
    # bookkeeping
    out_dir: str | None = None
    checkpoint_every: int = 50
    record_time: bool = True
    label: str | None = None

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(self.clip_epsilon, self.gamma, self.epochs, self.minibatch_size,
                         self.policy_lr, self.value_lr, self.kl_limit, self.normalize_advantages)

    def anchors(self) -> tuple[float, float]:
        low, high = REWARD_ANCHORS.get(self.env, (None, None))
        low = self.reward_low if self.reward_low is not None else low
        high = self.reward_high if self.reward_high is not None else high
        return float(low), float(high)

    def sigma_schedule(self) -> SigmaSchedule:
        low, high = self.anchors()
        return SigmaSchedule(self.sigma_init, self.sigma_min, low, high)

    @property
    def setting(self) -> str:
        return self.label if self.label is not None else f"sigma={self.sigma_init:g}"

    def validate(self) -> None:
        """Raise :class:`ConfigError` on bad values; warn on ignored bonus settings."""
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {sorted(ENVS)}")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; choose from {ALGOS}")
        if self.steps_per_iteration < 1 or self.total_env_steps < self.steps_per_iteration:
            raise ConfigError("need total_env_steps >= steps_per_iteration >= 1")
        if self.intrinsic_lr <= 0 or self.n_max < 1 or self.checkpoint_every < 1:
            raise ConfigError("intrinsic_lr, n_max and checkpoint_every must be positive")
        for name in ("c1", "beta"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.env not in REWARD_ANCHORS and (self.reward_low is None or self.reward_high is None):
            raise ConfigError("reward_low/reward_high are required for this env")
        self.ppo_config()
        self.sigma_schedule()
        ignored = {"ppo": ("c1", "beta"), "icm-ppo": ("c1",), "iem-ppo": ("beta",)}[self.algo]
        for name in ignored:
            if getattr(self, name) is not None:
                warnings.warn(f"{name} has no effect with algo {self.algo!r}; ignoring it", stacklevel=2)

    def resolved_c1(self) -> float:
        return DEFAULT_C1 if self.c1 is None else float(self.c1)

    def resolved_beta(self) -> float:
        return DEFAULT_BETA if self.beta is None else float(self.beta)


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent counter-based generators, one per component.

    Each stream is keyed by a hash of its name, so adding or reordering
    components never shifts the random numbers another component sees.
    """
    return {
        name: np.random.Generator(np.random.Philox(
            np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))))
        for name in STREAMS
    }


def init_state(cfg: RunConfig, env: Env | None = None) -> tuple[AlgoState, Env]:
    env = make_env(cfg.env) if env is None else env
    state = make_algo_state(
        env, cfg.algo, seed_streams(cfg.seed), cfg.ppo_config(), cfg.sigma_schedule(),
        hidden=cfg.hidden_dims, c1=cfg.resolved_c1(), beta=cfg.resolved_beta(), n_max=cfg.n_max,
        bonus_offset=cfg.bonus_offset, intrinsic_lr=cfg.intrinsic_lr,
        standardize_intrinsic=cfg.standardize_intrinsic,
    )
    return state, env


# -- checkpoints -----------------------------------------------------------------


def checkpoint_dict(state: AlgoState, cfg: RunConfig) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "env": cfg.env,
        "algo": state.algo,
        "seed": cfg.seed,
        "iteration": state.iteration,
        "env_steps": state.env_steps,
        "current_sigma": state.schedule.current_sigma,
        "current_sigma_hex": float(state.schedule.current_sigma).hex(),
        "running_reward": state.schedule.running_reward,
        "running_reward_hex": float(state.schedule.running_reward).hex(),
        "policy": params_to_dict(state.policy.theta, state.policy.spec),
        "value": params_to_dict(state.value.phi, state.value.spec),
    }
    if state.curiosity is not None:
        doc["curiosity"] = params_to_dict(state.curiosity.psi, state.curiosity.spec)
    if state.uncertainty is not None:
        doc["uncertainty"] = params_to_dict(state.uncertainty.xi, state.uncertainty.spec)
    return doc


def save_checkpoint(path, state: AlgoState, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(state, cfg), indent=1))


@dataclass
class Checkpoint:
    env: str
    algo: str
    policy: GaussianPolicy
    value: ValueFunction
    current_sigma: float
    running_reward: float
    iteration: int
    env_steps: int


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
        env = make_env(doc["env"])
        pspec, theta = params_from_dict(doc["policy"])
        vspec, phi = params_from_dict(doc["value"])
        if pspec.input_dim != env.state_dim or pspec.output_dim != env.action_dim:
            raise CheckpointError("policy network does not fit the checkpoint's environment")
        return Checkpoint(
            doc["env"], doc["algo"],
            GaussianPolicy(pspec, theta, env.action_low, env.action_high),
            ValueFunction(vspec, phi),
            float.fromhex(doc["current_sigma_hex"]), float.fromhex(doc["running_reward_hex"]),
            int(doc["iteration"]), int(doc["env_steps"]),
        )
    except CheckpointError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


def evaluate(policy: GaussianPolicy, env: Env, episodes: int, seed: int = 0) -> list[float]:
    """Noise-free (sigma = 0) episode returns."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        s = env.reset(rng)
        total = 0.0
        while True:
            res = env.step(act(policy, s, 0.0, rng).action)
            total += res.reward
            s = res.next_state
            if res.terminated or res.truncated:
                break
        out.append(total)
    return out


# -- runs --------------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    rows: list[MetricsRow]
    episodes: list[EpisodeRecord]
    final_sigma: float
    state: AlgoState | None = None
    out_dir: Path | None = None

    @property
    def final_window(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes[-FINAL_WINDOW:]])

    @property
    def final_mean(self) -> float:
        return float(self.final_window.mean())

    @property
    def first_goal_step(self) -> float:
        """Env steps when an episode first terminated; inf if none did."""
        for e in self.episodes:
            if e.terminated:
                return float(e.end_step)
        return math.inf

    @property
    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.rows))


def write_episodes(path, episodes: Iterable[EpisodeRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for e in episodes:
            w.writerow([e.episode, e.end_step, e.length, repr(float(e.ret)), int(e.terminated)])


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow.from_csv_fields(r) for r in reader]


def run(cfg: RunConfig, keep_state: bool = False) -> RunResult:
    """Train until ``total_env_steps`` and write metrics/checkpoints to ``out_dir``.

    With ``record_time=False`` the ``seconds`` column is written as 0 so that
    metrics files are byte-for-byte reproducible.
    """
    cfg.validate()
    state, env = init_state(cfg)
    pcfg = cfg.ppo_config()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
    clock = time.perf_counter if cfg.record_time else (lambda: 0.0)
    rows: list[MetricsRow] = []
    try:
        while state.env_steps < cfg.total_env_steps:
            row = train_iteration(state, env, pcfg, cfg.steps_per_iteration, clock=clock)
            rows.append(row)
            log.info("iter %d steps %d ret %.2f sigma %.3f epochs %d kl %.4f", row.iteration,
                     row.env_steps, row.ret_mean, row.sigma, row.epochs_run, row.kl)
            if writer is not None:
                writer.writerow(row.csv_fields())
                fh.flush()
                if row.iteration % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{row.iteration:05d}.json", state, cfg)
    finally:
        if fh is not None:
            fh.close()
        if out is not None:
            write_episodes(out / "episodes.csv", state.episodes)
    if out is not None:
        save_checkpoint(out / "checkpoint.json", state, cfg)
    return RunResult(cfg, rows, state.episodes, state.schedule.current_sigma,
                     state if keep_state else None, out)


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SummaryRow:
    env: str
    algo: str
    setting: str
    runs: int
    mean: float
    variance: float
    seconds: float
    failures: list[str] = field(default_factory=list)


def _run_quiet(cfg: RunConfig):
    try:
        return run(cfg)
    except Exception as exc:  # a failed run is recorded and the sweep goes on
        return f"{type(exc).__name__}: {exc}"


def run_many(configs: Sequence[RunConfig], workers: int = 1) -> list[RunResult | str]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_quiet, configs))
    return [_run_quiet(c) for c in configs]


def summarize(configs: Sequence[RunConfig], results: Sequence[RunResult | str]) -> list[SummaryRow]:
    """Mean and population variance, across runs, of each run's final-window mean return."""
    groups: dict[tuple[str, str, str], list] = {}
    for cfg, res in zip(configs, results):
        groups.setdefault((cfg.env, cfg.algo, cfg.setting), []).append((cfg, res))
    table = []
    for (env, algo, setting), members in groups.items():
        ok = [r for _, r in members if isinstance(r, RunResult)]
        failed = [f"seed {c.seed}: {r}" for c, r in members if not isinstance(r, RunResult)]
        finals = np.array([r.final_mean for r in ok])
        table.append(SummaryRow(
            env, algo, setting, len(ok),
            float(finals.mean()) if len(ok) else math.nan,
            float(finals.var()) if len(ok) else math.nan,
            float(sum(r.total_seconds for r in ok)),
            failed,
        ))
    return table


def sweep(configs: Sequence[RunConfig], workers: int = 1) -> list[SummaryRow]:
    if not configs:
        raise ConfigError("sweep needs at least one config")
    for c in configs:
        c.validate()
    return summarize(configs, run_many(configs, workers))


def write_summary(path, table: Sequence[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "algo", "setting", "runs", "mean", "variance", "seconds", "failures"])
        for r in table:
            w.writerow([r.env, r.algo, r.setting, r.runs, repr(r.mean), repr(r.variance),
                        repr(r.seconds), " | ".join(r.failures)])


@dataclass
class SigmaCurve:
    sigma_init: float
    steps: np.ndarray
    returns: np.ndarray
    sigmas: np.ndarray
    final_sigma: float


def sigma_sweep(base: RunConfig, sigma_inits: Sequence[float], workers: int = 1) -> dict[float, SigmaCurve]:
    """One run per initial sigma; returns per-setting return and sigma traces."""
    configs = []
    for s in sigma_inits:
        if s < base.sigma_min:
            raise ConfigError(f"sigma_init {s} is below sigma_min {base.sigma_min}")
        out = None if base.out_dir is None else str(Path(base.out_dir) / f"sigma_{s:g}")
        configs.append(base.replace(sigma_init=float(s), out_dir=out, label=f"sigma={s:g}"))
    curves = {}
    for cfg, res in zip(configs, run_many(configs, workers)):
        if not isinstance(res, RunResult):
            raise RuntimeError(f"sigma_init {cfg.sigma_init}: {res}")
        steps = np.array([r.env_steps for r in res.rows])
        curves[cfg.sigma_init] = SigmaCurve(
            cfg.sigma_init, steps, np.array([r.ret_mean for r in res.rows]),
            np.array([r.sigma for r in res.rows]),
            res.final_sigma,
        )
    return curves


def expand_sweep(doc: dict) -> list[RunConfig]:
    """Turn a sweep document into run configs.

    ``base`` holds shared fields, ``runs`` an optional list of per-run
    overrides, ``grid`` a mapping of field -> list crossed with every run.
    Output directories default to ``<out>/<env>_<algo>_<setting>_s<seed>``.
    """
    base = dict(doc.get("base", {}))
    runs = doc.get("runs") or [{}]
    grid = doc.get("grid", {})
    keys = list(grid)
    configs = []
    for r in runs:
        for combo in itertools.product(*(grid[k] for k in keys)):
            d = {**base, **r, **dict(zip(keys, combo))}
            cfg = RunConfig.from_dict(d)
            if doc.get("out") and "out_dir" not in r:
                name = f"{cfg.env}_{cfg.algo}_{cfg.setting}_s{cfg.seed}".replace("=", "")
                cfg.out_dir = str(Path(doc["out"]) / name)
            configs.append(cfg)
    return configs
