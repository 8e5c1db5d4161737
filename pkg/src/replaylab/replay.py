"""Success-filtered trajectory buffers and the truncated replay loss.

Replay reuses a stored trajectory through importance weights ratio_i =
pi_now(a_i|s_i) / p_i against the recorded behavior probabilities.  Indices
whose ratio reaches the truncation threshold sigma are discarded (the keep
set); the surviving fraction |S|/N is the trajectory's fit, and trajectories
whose fit falls below an eviction threshold are dropped from the buffer.
The importance weight is a constant multiplier: gradients flow only through
the clipped surrogate it scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import AdamState, PolicyNet, action_distribution, adam_step
from .ppo import (
    PpoConfig,
    Trajectory,
    TrainDiagnostics,
    policy_loss_and_grads,
    trajectory_advantages,
)

# Eviction-threshold schedule for the success-buffer loops: starts at 0.77
# and reaches exactly 1.0 at a full capacity-10 buffer.
FIT_BASE = 0.77
FIT_PER_ENTRY = 0.023

# Reward-statistics buffer: per-entry thresholds start at 0.6, rise by 0.02
# whenever a newer trajectory is admitted and by 0.01 per replay use.
DR3_BASE_THRESHOLD = 0.6
DR3_ADMISSION_INCREMENT = 0.02
DR3_USAGE_INCREMENT = 0.01


class BufferError(Exception):
    """Sampling from an empty buffer or dropping a bad index."""


class EmptyKeepSetError(Exception):
    """Every index of the replayed trajectory exceeded the ratio threshold."""


@dataclass
class BufferEntry:
    trajectory: Trajectory
    usage_count: int = 0
    fit_threshold: float | None = None  # per-entry threshold; None = schedule-based


class CyclicBuffer:
    """Fixed-capacity FIFO of buffer entries; overflow evicts the oldest."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: list[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, traj: Trajectory, fit_threshold: float | None = None) -> BufferEntry:
        entry = BufferEntry(traj, usage_count=0, fit_threshold=fit_threshold)
        if len(self.entries) >= self.capacity:
            self.entries.pop(0)
        self.entries.append(entry)
        return entry

    def sample_uniform(self, rng: np.random.Generator) -> tuple[int, BufferEntry]:
        if not self.entries:
            raise BufferError("cannot sample from an empty buffer")
        idx = int(rng.integers(len(self.entries)))
        return idx, self.entries[idx]

    def drop(self, index: int) -> BufferEntry:
        if not 0 <= index < len(self.entries):
            raise BufferError(f"drop index {index} out of range for {len(self.entries)} entries")
        return self.entries.pop(index)

    def rewards(self) -> np.ndarray:
        return np.array([e.trajectory.total_reward for e in self.entries])

    def snapshot_jsonl(self, path) -> None:
        """One JSON record per entry, for post-hoc analysis."""
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({
                    "usage_count": e.usage_count,
                    "fit_threshold": e.fit_threshold,
                    "total_reward": e.trajectory.total_reward,
                    "success": e.trajectory.success,
                    "source_agent": e.trajectory.source_agent,
                    "episode_index": e.trajectory.episode_index,
                    "steps": [
                        {
                            "obs": [float(v) for v in t.obs],
                            "action": int(t.action),
                            "prob": float(t.behavior_prob),
                            "reward": float(t.reward),
                            "done": bool(t.done),
                        }
                        for t in e.trajectory.transitions
                    ],
                }))
                fh.write("\n")


@dataclass
class KeepSet:
    """Indices whose importance ratio stays below sigma, plus all ratios."""

    indices: np.ndarray
    ratios: np.ndarray
    sigma: float

    @property
    def size(self) -> int:
        return len(self.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros(len(self.ratios), dtype=bool)
        m[self.indices] = True
        return m


def compute_keep_set(net: PolicyNet, traj: Trajectory, sigma: float) -> KeepSet:
    """Ratios under the net's current parameters; keep those below sigma."""
    logits, _, _ = net.forward_batch(traj.obs_matrix)
    probs = action_distribution(logits)
    pa = probs[np.arange(len(traj)), traj.actions]
    ratios = pa / traj.behavior_probs
    return KeepSet(np.flatnonzero(ratios < sigma), ratios, sigma)


def fit(net: PolicyNet, traj: Trajectory, sigma: float) -> float:
    """Fraction of the trajectory still compatible with the policy: |S|/N."""
    if len(traj) == 0:
        raise ValueError("fit of an empty trajectory is undefined")
    return compute_keep_set(net, traj, sigma).size / len(traj)


def replay_loss_and_grads(net: PolicyNet, traj: Trajectory, sigma: float,
                          cfg: PpoConfig, entropy_coef: float | None = None):
    """Truncated importance-weighted surrogate over the keep set.

    loss = (1/|S|) * sum_{i in S} (ratio_i * clip_term_i - e * H_i); the
    ratio weights are constants.  No value-error term, even for critic nets.
    Raises EmptyKeepSetError when S is empty (caller treats the trajectory
    as fit 0).  Returns (loss, grads, keep_set, fit, diagnostics).
    """
    ks = compute_keep_set(net, traj, sigma)
    fit_value = ks.size / len(traj)
    if ks.size == 0:
        raise EmptyKeepSetError(f"all {len(traj)} ratios at or above sigma={sigma}")
    adv_set = trajectory_advantages(net, traj, cfg)
    e = net.entropy_coef if entropy_coef is None else entropy_coef
    logits, _, _ = net.forward_batch(traj.obs_matrix)
    ref_probs = action_distribution(logits)[np.arange(len(traj)), traj.actions]
    loss, grads, diag = policy_loss_and_grads(
        net, traj.obs_matrix, traj.actions, ref_probs, adv_set.advantages,
        None, cfg.clip_epsilon, e, weights=ks.ratios, keep=ks.mask(),
    )
    return loss, grads, ks, fit_value, diag


def replay_loss(net: PolicyNet, traj: Trajectory, sigma: float,
                entropy_coef: float | None = None, cfg: PpoConfig | None = None) -> float:
    """Scalar value of the truncated replay loss (no parameter update)."""
    loss, _, _, _, _ = replay_loss_and_grads(net, traj, sigma, cfg or PpoConfig(),
                                             entropy_coef)
    return loss


def replay_train(net: PolicyNet, opt: AdamState, traj: Trajectory, sigma: float,
                 cfg: PpoConfig, entropy_coef: float | None = None
                 ) -> tuple[float, TrainDiagnostics | None]:
    """One replay gradient step; returns (fit, diagnostics).

    On an empty keep set no update happens and the fit is reported as 0.0.
    """
    try:
        _, grads, _, fit_value, diag = replay_loss_and_grads(net, traj, sigma, cfg,
                                                             entropy_coef)
    except EmptyKeepSetError:
        return 0.0, None
    adam_step(net, grads, opt)
    return fit_value, diag


def r3_fit_threshold(buffer_len: int) -> float:
    """Eviction threshold as a function of buffer length: 0.77 + 0.023*len."""
    if buffer_len < 0:
        raise ValueError("buffer length cannot be negative")
    return FIT_BASE + FIT_PER_ENTRY * buffer_len


def dr3_threshold_update(buffer: CyclicBuffer, event: str, index: int | None = None) -> None:
    """Threshold bookkeeping for the reward-statistics buffer.

    "new_admission": every pre-existing entry's threshold rises by 0.02
    (call before inserting the newcomer).  "entry_used": that entry's
    threshold rises by 0.01 and its usage count increments.
    """
    if event == "new_admission":
        for entry in buffer.entries:
            entry.fit_threshold += DR3_ADMISSION_INCREMENT
    elif event == "entry_used":
        if index is None or not 0 <= index < len(buffer):
            raise BufferError(f"entry_used index {index} out of range")
        entry = buffer.entries[index]
        entry.fit_threshold += DR3_USAGE_INCREMENT
        entry.usage_count += 1
    else:
        raise ValueError(f"unknown threshold event {event!r}")


@dataclass
class RewardStats:
    """Running record of past episode total rewards (population statistics)."""

    all_rewards: list[float] = field(default_factory=list)

    def record(self, reward: float) -> None:
        self.all_rewards.append(float(reward))

    def __len__(self) -> int:
        return len(self.all_rewards)

    def mean(self) -> float:
        if not self.all_rewards:
            raise ValueError("no rewards recorded yet")
        return float(np.mean(self.all_rewards))

    def std(self) -> float:
        if not self.all_rewards:
            raise ValueError("no rewards recorded yet")
        return float(np.std(self.all_rewards))


def dr3_admit(traj: Trajectory, buffer: CyclicBuffer, stats: RewardStats) -> bool:
    """High-reward admission rule.

    Nonempty buffer: admit iff the episode reward is at least the buffer
    mean.  Empty buffer: admit iff it strictly exceeds mean + std of all
    past episode rewards (the current episode included).
    """
    r = traj.total_reward
    if len(buffer) > 0:
        return r >= float(buffer.rewards().mean())
    return r > stats.mean() + stats.std()


def dr3_select(buffer: CyclicBuffer, episode_reward: float,
               rng: np.random.Generator) -> tuple[int, BufferEntry] | None:
    """Uniform pick among entries with reward above episode_reward + std(buffer)."""
    if len(buffer) == 0:
        return None
    rewards = buffer.rewards()
    cutoff = episode_reward + float(rewards.std())
    qualifying = np.flatnonzero(rewards > cutoff)
    if len(qualifying) == 0:
        return None
    idx = int(qualifying[int(rng.integers(len(qualifying)))])
    return idx, buffer.entries[idx]
