"""Training loops: success-replay PPO variants, plain PPO, and a DDQN baseline.

Each loop is a state dataclass plus an episode function that advances it by
one collected episode and returns a RunRecord row.  All randomness flows
through two named generator streams - `act` for action sampling and `algo`
for buffer draws, explorer coin flips and epsilon-greedy - so disabling the
replay path leaves the policy stream untouched.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .envs import EnvSpec
from .nets import (
    AdamState,
    NetConfig,
    PolicyNet,
    action_distribution,
    clone_params,
    copy_actor_weights,
    make_adam,
)
from .ppo import (
    PpoConfig,
    Trajectory,
    Transition,
    ddqn_update,
    train_on_trajectory,
)
from .replay import (
    CyclicBuffer,
    RewardStats,
    dr3_admit,
    dr3_select,
    dr3_threshold_update,
    r3_fit_threshold,
    replay_train,
    DR3_BASE_THRESHOLD,
)

PHASE_STARTING = "starting"
PHASE_EXPLOITING = "exploiting"
PHASE_EXPLORING = "exploring"

# Fixed entropy coefficients of the agent roster.
INITIATOR_ENTROPY = 0.5
EXPLORER1_ENTROPY = 0.03
EXPLORER2_ENTROPY = 0.02
EXPLOITER_ENTROPY = 0.01


@dataclass
class TrainerConfig:
    max_steps: int = 100_000
    max_episodes: int | None = None
    success_rate_window: int = 20
    degenerate_cutoff: float | None = None  # None: 0.5 success rate / half max reward
    random_initiator: bool = False
    sigma: float = 2.0
    buffer_capacity: int = 10
    large_buffer_capacity: int = 20
    dr3_buffer_capacity: int = 20
    replay_enabled: bool = True
    fast_agent_epochs: int = 1  # initiator/explorer updates per trajectory
    learning_rate: float = 3e-4
    smoothing_alpha: float = 0.05

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.success_rate_window < 1:
            raise ValueError("success_rate_window must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for cap in (self.buffer_capacity, self.large_buffer_capacity, self.dr3_buffer_capacity):
            if cap < 1:
                raise ValueError("buffer capacities must be positive")
        if not 0.0 < self.smoothing_alpha <= 1.0:
            raise ValueError("smoothing_alpha must lie in (0, 1]")


@dataclass
class DdqnConfig:
    buffer_capacity: int = 100_000
    batch_size: int = 64
    learning_starts: int = 1_000
    target_sync_interval: int = 1_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 30_000
    learning_rate: float = 1e-3
    gamma: float = 0.99


@dataclass
class RunRecord:
    """One episode's metrics row."""

    episode: int
    steps: int  # cumulative env steps
    reward: float
    success: bool
    smoothed: float
    phase: str
    buf_b: int
    buf_blarge: int
    ms: int


@dataclass
class PhaseEvent:
    episode: int
    old_phase: str
    new_phase: str
    buf_b: int
    buf_blarge: int


@dataclass
class SuccessTracker:
    """Ring of recent per-episode outcomes (success flags or total rewards)."""

    window: int
    values: deque = field(default_factory=deque)

    def __post_init__(self):
        self.values = deque(self.values, maxlen=self.window)

    def add(self, value: float) -> None:
        self.values.append(float(value))

    def average(self) -> float:
        if not self.values:
            return 0.0
        return float(np.mean(self.values))

    def __len__(self) -> int:
        return len(self.values)


def degenerate_check(tracker: SuccessTracker, cutoff: float, strict: bool = False) -> bool:
    """Replay shut-off rule over the recent-episode window.

    Success-rate loops disable replay at or above the cutoff (a 50% rate
    fires); reward loops pass strict=True and fire only strictly above half
    the maximum total reward.  Zero completed episodes never fire.
    """
    if len(tracker) == 0:
        return False
    avg = tracker.average()
    return avg > cutoff if strict else avg >= cutoff


@dataclass
class AgentRoster:
    initiator: "Agent"
    explorer1: "Agent"
    explorer2: "Agent"
    exploiter: "Agent"


@dataclass
class Agent:
    net: PolicyNet
    opt: AdamState
    role: str


@dataclass
class PhaseState:
    any_reward_seen: bool = False
    explorer_sync_pending: bool = True

    def current(self, buffer_len: int) -> str:
        if not self.any_reward_seen:
            return PHASE_STARTING
        return PHASE_EXPLOITING if buffer_len > 0 else PHASE_EXPLORING


def random_initiator_action(action_count: int, rng: np.random.Generator) -> tuple[int, float]:
    """Uniform action with its recorded probability 1/action_count."""
    if action_count < 1:
        raise ValueError("action_count must be >= 1")
    return int(rng.integers(action_count)), 1.0 / action_count


def collect_trajectory(env, net: PolicyNet | None, act_rng: np.random.Generator,
                       source_agent: str, episode_index: int) -> Trajectory:
    """Run one episode; net=None collects with the uniform-random policy."""
    obs = env.reset()
    transitions = []
    success = False
    while True:
        if net is None:
            action, prob = random_initiator_action(env.action_count, act_rng)
        else:
            logits, _ = net.forward(obs)
            dist = action_distribution(logits)
            action, prob = nets.sample_action(dist, act_rng)
        result = env.step(action)
        transitions.append(Transition(obs, action, prob, result.reward, result.done))
        obs = result.observation
        if result.done:
            success = result.success
            break
    return Trajectory.from_transitions(transitions, success, source_agent, episode_index)


def build_policy(env, has_critic: bool, entropy_coef: float, rng: np.random.Generator,
                 net_cfg: NetConfig | None = None, lr: float = 3e-4) -> Agent:
    """Conv net for gridworlds, dense net for cart-pole, with its optimizer."""
    if env.kind in ("crossing", "doorkey"):
        net = nets.make_grid_net(env.size, env.action_count, has_critic, entropy_coef,
                                 rng, net_cfg)
    else:
        net = nets.make_mlp_net(env.spec.obs_length, env.action_count, has_critic,
                                entropy_coef, rng, net_cfg)
    role = "critic" if has_critic else "actor"
    return Agent(net, make_adam(net, lr=lr), role)


class _EpisodeTimer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = int((time.perf_counter() - self.t0) * 1000)
        return False


# -- plain PPO baseline -------------------------------------------------------


@dataclass
class PpoRun:
    agent: Agent
    env: object
    cfg: TrainerConfig
    ppo: PpoConfig
    act_rng: np.random.Generator
    algo_rng: np.random.Generator
    episode: int = 0
    cum_steps: int = 0
    smoothed: float | None = None

    def _smooth(self, reward: float) -> float:
        a = self.cfg.smoothing_alpha
        self.smoothed = reward if self.smoothed is None else a * reward + (1 - a) * self.smoothed
        return self.smoothed


def _record(run, traj: Trajectory, phase: str, buf_b: int, buf_blarge: int,
            ms: int) -> RunRecord:
    run.episode += 1
    run.cum_steps += len(traj)
    return RunRecord(
        episode=run.episode,
        steps=run.cum_steps,
        reward=traj.total_reward,
        success=traj.success,
        smoothed=run._smooth(traj.total_reward),
        phase=phase,
        buf_b=buf_b,
        buf_blarge=buf_blarge,
        ms=ms,
    )


def ppo_baseline_episode(run: PpoRun) -> RunRecord:
    with _EpisodeTimer() as timer:
        traj = collect_trajectory(run.env, run.agent.net, run.act_rng, "ppo", run.episode)
        train_on_trajectory(run.agent.net, run.agent.opt, traj, run.ppo)
    return _record(run, traj, "ppo", 0, 0, timer.ms)


# -- replay variant of the single-agent loop ----------------------------------


@dataclass
class WeakR3Run(PpoRun):
    buffer: CyclicBuffer = field(default_factory=lambda: CyclicBuffer(10))


def weak_r3_episode(run: WeakR3Run) -> RunRecord:
    """Collect, store on success, train, then replay one stored trajectory."""
    with _EpisodeTimer() as timer:
        traj = collect_trajectory(run.env, run.agent.net, run.act_rng, "weak_r3",
                                  run.episode)
        if traj.success and run.cfg.replay_enabled:
            run.buffer.insert(traj)
        train_on_trajectory(run.agent.net, run.agent.opt, traj, run.ppo)
        if run.cfg.replay_enabled and len(run.buffer) > 0:
            idx, entry = run.buffer.sample_uniform(run.algo_rng)
            fit_value, _ = replay_train(run.agent.net, run.agent.opt,
                                        entry.trajectory, run.cfg.sigma, run.ppo)
            if fit_value < r3_fit_threshold(len(run.buffer)):
                run.buffer.drop(idx)
    return _record(run, traj, "weak_r3", len(run.buffer), 0, timer.ms)


# -- three-phase roster loop ---------------------------------------------------


@dataclass
class R3Run:
    roster: AgentRoster
    env: object
    cfg: TrainerConfig
    ppo: PpoConfig
    act_rng: np.random.Generator
    algo_rng: np.random.Generator
    buffer: CyclicBuffer = field(default_factory=lambda: CyclicBuffer(10))
    large_buffer: CyclicBuffer = field(default_factory=lambda: CyclicBuffer(20))
    phase_state: PhaseState = field(default_factory=PhaseState)
    tracker: SuccessTracker = field(default_factory=lambda: SuccessTracker(20))
    degenerate: bool = False
    events: list = field(default_factory=list)
    last_phase: str | None = None
    episode: int = 0
    cum_steps: int = 0
    smoothed: float | None = None

    _smooth = PpoRun._smooth

    @property
    def degenerate_cutoff(self) -> float:
        return 0.5 if self.cfg.degenerate_cutoff is None else self.cfg.degenerate_cutoff


def r3_episode(run: R3Run) -> RunRecord:
    """One episode of the initiator/explorer/exploiter machine.

    Phase is a pure function of (any reward seen, buffer emptiness) and is
    asserted at every boundary.  Once the windowed success rate reaches the
    cutoff the loop latches into plain PPO on the exploiter: no buffer
    mutation or replay happens afterwards.
    """
    cfg, ppo_cfg = run.cfg, run.ppo
    roster = run.roster
    if not run.degenerate and degenerate_check(run.tracker, run.degenerate_cutoff):
        run.degenerate = True

    phase = run.phase_state.current(len(run.buffer))
    # Phase-machine soundness, checked inline every episode.
    assert (phase == PHASE_STARTING) == (not run.phase_state.any_reward_seen)
    assert (phase == PHASE_EXPLORING) == (
        run.phase_state.any_reward_seen and len(run.buffer) == 0
    )
    if phase != PHASE_EXPLORING:
        run.phase_state.explorer_sync_pending = True

    with _EpisodeTimer() as timer:
        if run.degenerate:
            traj = collect_trajectory(run.env, roster.exploiter.net, run.act_rng,
                                      "exploiter", run.episode)
            train_on_trajectory(roster.exploiter.net, roster.exploiter.opt, traj, ppo_cfg)
        elif phase == PHASE_STARTING:
            if cfg.random_initiator:
                traj = collect_trajectory(run.env, None, run.act_rng, "random",
                                          run.episode)
            else:
                traj = collect_trajectory(run.env, roster.initiator.net, run.act_rng,
                                          "initiator", run.episode)
                train_on_trajectory(roster.initiator.net, roster.initiator.opt, traj,
                                    ppo_cfg, epochs=cfg.fast_agent_epochs)
            train_on_trajectory(roster.exploiter.net, roster.exploiter.opt, traj, ppo_cfg)
            if traj.success:
                run.buffer.insert(traj)
                run.large_buffer.insert(traj)
        elif phase == PHASE_EXPLOITING:
            traj = collect_trajectory(run.env, roster.exploiter.net, run.act_rng,
                                      "exploiter", run.episode)
            train_on_trajectory(roster.exploiter.net, roster.exploiter.opt, traj, ppo_cfg)
            if not traj.success:
                idx, entry = run.buffer.sample_uniform(run.algo_rng)
                fit_value, _ = replay_train(roster.exploiter.net, roster.exploiter.opt,
                                            entry.trajectory, cfg.sigma, ppo_cfg)
                if fit_value < r3_fit_threshold(len(run.buffer)):
                    run.buffer.drop(idx)
            if traj.success:
                run.buffer.insert(traj)
                run.large_buffer.insert(traj)
        else:  # exploring
            if run.phase_state.explorer_sync_pending:
                copy_actor_weights(roster.exploiter.net, roster.explorer1.net)
                copy_actor_weights(roster.exploiter.net, roster.explorer2.net)
                roster.explorer1.opt = make_adam(roster.explorer1.net, lr=cfg.learning_rate)
                roster.explorer2.opt = make_adam(roster.explorer2.net, lr=cfg.learning_rate)
                run.phase_state.explorer_sync_pending = False
            explorer = roster.explorer1 if run.algo_rng.random() < 0.5 else roster.explorer2
            traj = collect_trajectory(run.env, explorer.net, run.act_rng,
                                      explorer.role, run.episode)
            train_on_trajectory(explorer.net, explorer.opt, traj, ppo_cfg,
                                epochs=cfg.fast_agent_epochs)
            train_on_trajectory(roster.exploiter.net, roster.exploiter.opt, traj, ppo_cfg)
            if len(run.large_buffer) > 0:
                _, entry = run.large_buffer.sample_uniform(run.algo_rng)
                # B_large never evicts on fit; an empty keep set just skips.
                replay_train(roster.explorer2.net, roster.explorer2.opt,
                             entry.trajectory, cfg.sigma, ppo_cfg)
            if traj.success:
                run.buffer.insert(traj)
                run.large_buffer.insert(traj)

        if traj.success:
            run.phase_state.any_reward_seen = True
        run.tracker.add(1.0 if traj.success else 0.0)

    if run.last_phase is not None and phase != run.last_phase:
        run.events.append(PhaseEvent(run.episode, run.last_phase, phase,
                                     len(run.buffer), len(run.large_buffer)))
    run.last_phase = phase
    return _record(run, traj, phase, len(run.buffer), len(run.large_buffer), timer.ms)


def make_r3_roster(env, rng: np.random.Generator, net_cfg: NetConfig | None = None,
                   lr: float = 3e-4) -> AgentRoster:
    initiator = build_policy(env, False, INITIATOR_ENTROPY, rng, net_cfg, lr)
    initiator.role = "initiator"
    e1 = build_policy(env, False, EXPLORER1_ENTROPY, rng, net_cfg, lr)
    e1.role = "explorer1"
    e2 = build_policy(env, False, EXPLORER2_ENTROPY, rng, net_cfg, lr)
    e2.role = "explorer2"
    x = build_policy(env, True, EXPLOITER_ENTROPY, rng, net_cfg, lr)
    x.role = "exploiter"
    return AgentRoster(initiator, e1, e2, x)


# -- dense-reward replay loop ---------------------------------------------------


@dataclass
class Dr3Run(PpoRun):
    buffer: CyclicBuffer = field(default_factory=lambda: CyclicBuffer(20))
    stats: RewardStats = field(default_factory=RewardStats)
    tracker: SuccessTracker = field(default_factory=lambda: SuccessTracker(20))
    degenerate: bool = False

    @property
    def degenerate_cutoff(self) -> float:
        if self.cfg.degenerate_cutoff is not None:
            return self.cfg.degenerate_cutoff
        return self.env.spec.max_total_reward / 2.0


def dr3_episode(run: Dr3Run) -> RunRecord:
    """Dense-reward replay: admit high-reward episodes, replay higher ones.

    Latches to plain PPO once the windowed mean total reward passes half
    the theoretical maximum.
    """
    cfg, ppo_cfg = run.cfg, run.ppo
    if not run.degenerate and degenerate_check(run.tracker, run.degenerate_cutoff,
                                               strict=True):
        run.degenerate = True
    replay_active = cfg.replay_enabled and not run.degenerate

    with _EpisodeTimer() as timer:
        traj = collect_trajectory(run.env, run.agent.net, run.act_rng, "dr3", run.episode)
        run.stats.record(traj.total_reward)
        if replay_active and dr3_admit(traj, run.buffer, run.stats):
            dr3_threshold_update(run.buffer, "new_admission")
            run.buffer.insert(traj, fit_threshold=DR3_BASE_THRESHOLD)
        train_on_trajectory(run.agent.net, run.agent.opt, traj, ppo_cfg)
        if replay_active:
            selected = dr3_select(run.buffer, traj.total_reward, run.algo_rng)
            if selected is not None:
                idx, entry = selected
                fit_value, _ = replay_train(run.agent.net, run.agent.opt,
                                            entry.trajectory, cfg.sigma, ppo_cfg)
                dr3_threshold_update(run.buffer, "entry_used", idx)
                if fit_value < entry.fit_threshold:
                    run.buffer.drop(idx)
        run.tracker.add(traj.total_reward)
    return _record(run, traj, "dr3", len(run.buffer), 0, timer.ms)


# -- DDQN baseline ---------------------------------------------------------------


@dataclass
class DdqnRun:
    q_agent: Agent
    target_net: PolicyNet
    env: object
    cfg: TrainerConfig
    ddqn: DdqnConfig
    act_rng: np.random.Generator
    algo_rng: np.random.Generator
    buffer: deque = field(default_factory=lambda: deque(maxlen=100_000))
    episode: int = 0
    cum_steps: int = 0
    updates: int = 0
    smoothed: float | None = None

    _smooth = PpoRun._smooth

    def epsilon(self) -> float:
        d = self.ddqn
        frac = min(1.0, self.cum_steps / max(1, d.epsilon_anneal_steps))
        return d.epsilon_start + frac * (d.epsilon_end - d.epsilon_start)


def _ddqn_batch(buffer: deque, batch_size: int, rng: np.random.Generator):
    idxs = rng.integers(len(buffer), size=batch_size)
    rows = [buffer[int(i)] for i in idxs]
    obs = np.stack([r[0] for r in rows])
    actions = np.array([r[1] for r in rows])
    rewards = np.array([r[2] for r in rows], dtype=np.float64)
    next_obs = np.stack([r[3] for r in rows])
    dones = np.array([r[4] for r in rows], dtype=np.float64)
    return obs, actions, rewards, next_obs, dones


def ddqn_baseline_episode(run: DdqnRun) -> RunRecord:
    """Epsilon-greedy collection with a per-step double-Q update."""
    dq = run.ddqn
    env = run.env
    with _EpisodeTimer() as timer:
        obs = env.reset()
        total = 0.0
        success = False
        ep_steps = 0
        while True:
            if run.algo_rng.random() < run.epsilon():
                action = int(run.algo_rng.integers(env.action_count))
            else:
                q, _ = run.q_agent.net.forward(obs)
                action = int(np.argmax(q))
            result = env.step(action)
            run.buffer.append((obs, action, result.reward, result.observation,
                               result.done))
            obs = result.observation
            total += result.reward
            ep_steps += 1
            run.cum_steps += 1
            if len(run.buffer) >= dq.learning_starts:
                batch = _ddqn_batch(run.buffer, dq.batch_size, run.algo_rng)
                ddqn_update(run.q_agent.net, run.target_net, batch, dq.gamma,
                            run.q_agent.opt)
                run.updates += 1
                if run.updates % dq.target_sync_interval == 0:
                    run.target_net.set_flat_params(run.q_agent.net.get_flat_params())
            if result.done:
                success = result.success
                break
        run.episode += 1
    return RunRecord(
        episode=run.episode,
        steps=run.cum_steps,
        reward=total,
        success=success,
        smoothed=run._smooth(total),
        phase="ddqn",
        buf_b=len(run.buffer),
        buf_blarge=0,
        ms=timer.ms,
    )
