"""Advantage estimation and the clipped-surrogate policy update.

The ratio in the clipped loss is always measured against the network's
parameters at entry to the training call; the behavior probabilities stored
in a trajectory are only used as importance weights by the replay machinery.
Critic-free agents use discounted reward-to-go advantages (zero values,
lambda 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import (
    AdamState,
    PolicyNet,
    action_distribution,
    adam_step,
    entropy_batch,
)


class TrainingError(Exception):
    """Raised on non-finite losses or malformed training inputs."""


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    behavior_prob: float
    reward: float
    done: bool


@dataclass
class Trajectory:
    """One episode of transitions plus bookkeeping for replay."""

    transitions: list[Transition]
    total_reward: float
    success: bool
    source_agent: str = ""
    episode_index: int = -1
    _arrays: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_transitions(cls, transitions, success: bool, source_agent: str = "",
                         episode_index: int = -1) -> "Trajectory":
        total = float(sum(t.reward for t in transitions))
        return cls(list(transitions), total, success, source_agent, episode_index)

    def __len__(self) -> int:
        return len(self.transitions)

    def _cache(self, key, build):
        if key not in self._arrays:
            self._arrays[key] = build()
        return self._arrays[key]

    @property
    def obs_matrix(self) -> np.ndarray:
        return self._cache("obs", lambda: np.stack([t.obs for t in self.transitions]))

    @property
    def actions(self) -> np.ndarray:
        return self._cache("act", lambda: np.array([t.action for t in self.transitions]))

    @property
    def behavior_probs(self) -> np.ndarray:
        return self._cache(
            "prob", lambda: np.array([t.behavior_prob for t in self.transitions])
        )

    @property
    def rewards(self) -> np.ndarray:
        return self._cache("rew", lambda: np.array([t.reward for t in self.transitions]))

    @property
    def dones(self) -> np.ndarray:
        return self._cache("done", lambda: np.array([t.done for t in self.transitions]))


def trajectory_to_jsonl(traj: Trajectory) -> str:
    """One JSON record per step: {obs, action, prob, reward, done}."""
    lines = []
    for t in traj.transitions:
        lines.append(json.dumps({
            "obs": [float(v) for v in t.obs],
            "action": int(t.action),
            "prob": float(t.behavior_prob),
            "reward": float(t.reward),
            "done": bool(t.done),
        }))
    return "\n".join(lines) + "\n"


def trajectory_from_jsonl(text: str, source_agent: str = "",
                          episode_index: int = -1) -> Trajectory:
    transitions = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        transitions.append(Transition(
            obs=np.array(rec["obs"], dtype=np.float64),
            action=int(rec["action"]),
            behavior_prob=float(rec["prob"]),
            reward=float(rec["reward"]),
            done=bool(rec["done"]),
        ))
    success = transitions[-1].reward > 0 if transitions else False
    return Trajectory.from_transitions(transitions, success, source_agent, episode_index)


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    gamma: float = 0.99
    lam: float = 0.95
    value_loss_coef: float = 0.5
    epochs_per_trajectory: int = 4
    advantage_normalization: bool = False

    def validate(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam must lie in (0, 1], got {self.lam}")
        if self.epochs_per_trajectory < 1:
            raise ValueError("epochs_per_trajectory must be >= 1")


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray
    gamma: float
    lam: float


def compute_gae(traj: Trajectory, values: np.ndarray, gamma: float, lam: float) -> AdvantageSet:
    """Exponentially weighted advantage estimates by reverse recursion.

    values has length N+1; values[N] is the bootstrap value (0 when the
    trajectory ended).  delta_t = r_t + gamma*v_{t+1}*(1-done_t) - v_t and
    A_t = sum_l (gamma*lam)^l delta_{t+l}.
    """
    n = len(traj)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n + 1,):
        raise TrainingError(f"values must have length {n + 1}, got {values.shape}")
    rewards = traj.rewards
    dones = traj.dones.astype(np.float64)
    advantages = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * (1.0 - dones[t]) - values[t]
        acc = delta + gamma * lam * acc
        advantages[t] = acc
    return AdvantageSet(advantages, advantages + values[:n], gamma, lam)


def ppo_clip_loss(new_prob, old_prob, advantage, clip_epsilon):
    """-min(ratio*A, clip(ratio, 1-eps, 1+eps)*A); vectorizes elementwise."""
    ratio = np.asarray(new_prob, dtype=np.float64) / np.asarray(old_prob, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    out = -np.minimum(unclipped, clipped)
    return float(out) if out.ndim == 0 else out


def _clip_loss_grad_ratio(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """d/d(ratio) of the clipped loss: -A inside the active branch, else 0."""
    pos = (adv > 0) & (ratio <= 1.0 + eps)
    neg = (adv < 0) & (ratio >= 1.0 - eps)
    return np.where(pos | neg, -adv, 0.0)


@dataclass
class TrainDiagnostics:
    """First-epoch statistics of a training call (CSV diagnostic columns)."""

    loss: float
    mean_ratio: float
    clip_fraction: float
    entropy: float
    value_loss: float


def policy_loss_and_grads(net: PolicyNet, obs: np.ndarray, actions: np.ndarray,
                          ref_probs: np.ndarray, advantages: np.ndarray,
                          value_targets: np.ndarray | None, clip_epsilon: float,
                          entropy_coef: float, value_loss_coef: float = 0.0,
                          weights: np.ndarray | None = None,
                          keep: np.ndarray | None = None):
    """Scalar loss and exact parameter gradients for the surrogate family.

    The loss is mean over kept indices of weights*clip_term - entropy bonus,
    plus a squared value error over all indices when value_targets is given.
    weights are treated as constants (no gradient flows through them).
    """
    n = obs.shape[0]
    logits, values, caches = net.forward_batch(obs)
    probs = action_distribution(logits)
    idx = np.arange(n)
    pa = probs[idx, actions]
    ratios = pa / ref_probs

    mask = np.ones(n, dtype=bool) if keep is None else keep
    m = int(mask.sum())
    if m == 0:
        raise TrainingError("no indices left to average the policy loss over")
    w = np.ones(n) if weights is None else weights

    clip_terms = ppo_clip_loss(pa, ref_probs, advantages, clip_epsilon)
    ent = entropy_batch(probs)
    loss = float((w * clip_terms)[mask].sum() / m - entropy_coef * ent[mask].sum() / m)

    # d loss / d logits
    gr = _clip_loss_grad_ratio(ratios, advantages, clip_epsilon)  # d clip / d ratio
    coef = np.where(mask, w * gr / (ref_probs * m), 0.0)  # d loss / d p_a
    dlogits = coef[:, None] * pa[:, None] * (-probs)
    dlogits[idx, actions] += coef * pa
    logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    dlogits += (entropy_coef / m) * np.where(mask, 1.0, 0.0)[:, None] * probs * (
        logp + ent[:, None]
    )

    value_loss = 0.0
    dvalues = None
    if value_targets is not None:
        if values is None:
            raise TrainingError("value targets supplied for a critic-free net")
        err = values - value_targets
        value_loss = float(np.mean(err**2))
        loss += value_loss_coef * value_loss
        dvalues = 2.0 * value_loss_coef * err / n

    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    grads = net.backprop(caches, dlogits, dvalues if net.has_critic else None)
    diag = TrainDiagnostics(
        loss=loss,
        mean_ratio=float(ratios[mask].mean()),
        clip_fraction=float((np.abs(ratios[mask] - 1.0) > clip_epsilon).mean()),
        entropy=float(ent[mask].mean()),
        value_loss=value_loss,
    )
    return loss, grads, diag


def trajectory_advantages(net: PolicyNet, traj: Trajectory, cfg: PpoConfig) -> AdvantageSet:
    """Advantages under the net's current parameters.

    Critic nets evaluate their value head with a zero bootstrap; critic-free
    nets fall back to discounted reward-to-go (zero values, lambda 1).
    """
    n = len(traj)
    if net.has_critic:
        _, values, _ = net.forward_batch(traj.obs_matrix)
        full = np.concatenate([values, [0.0]])
        adv = compute_gae(traj, full, cfg.gamma, cfg.lam)
    else:
        adv = compute_gae(traj, np.zeros(n + 1), cfg.gamma, 1.0)
    if cfg.advantage_normalization and n > 1:
        a = adv.advantages
        adv = AdvantageSet((a - a.mean()) / (a.std() + 1e-8), adv.returns,
                           adv.gamma, adv.lam)
    return adv


def train_on_trajectory(net: PolicyNet, opt: AdamState, traj: Trajectory,
                        cfg: PpoConfig, epochs: int | None = None) -> TrainDiagnostics:
    """Clipped-surrogate gradient steps on one trajectory.

    Advantages and value targets are frozen at entry; each epoch takes one
    full-trajectory step.  Returns first-epoch diagnostics, so fresh
    on-policy data always reports mean ratio 1 and clip fraction 0.
    """
    if len(traj) == 0:
        raise TrainingError("cannot train on an empty trajectory")
    adv_set = trajectory_advantages(net, traj, cfg)
    logits, _, _ = net.forward_batch(traj.obs_matrix)
    ref_probs = action_distribution(logits)[np.arange(len(traj)), traj.actions]
    value_targets = adv_set.returns if net.has_critic else None

    first: TrainDiagnostics | None = None
    for _ in range(epochs if epochs is not None else cfg.epochs_per_trajectory):
        _, grads, diag = policy_loss_and_grads(
            net, traj.obs_matrix, traj.actions, ref_probs, adv_set.advantages,
            value_targets, cfg.clip_epsilon, net.entropy_coef, cfg.value_loss_coef,
        )
        adam_step(net, grads, opt)
        if first is None:
            first = diag
    return first


def ddqn_update(q_net: PolicyNet, target_net: PolicyNet, batch, gamma: float,
                opt: AdamState) -> float:
    """One double-Q update: actions chosen by q_net, evaluated by target_net.

    batch is (obs, actions, rewards, next_obs, dones) arrays.  Ties in the
    online argmax break toward the lowest action id.
    """
    obs, actions, rewards, next_obs, dones = batch
    n = obs.shape[0]
    q, _, caches = q_net.forward_batch(obs)
    q_next, _, _ = q_net.forward_batch(next_obs)
    best = np.argmax(q_next, axis=1)
    t_next, _, _ = target_net.forward_batch(next_obs)
    targets = rewards + gamma * (1.0 - dones.astype(np.float64)) * t_next[np.arange(n), best]
    taken = q[np.arange(n), actions]
    err = taken - targets
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = 2.0 * err / n
    grads = q_net.backprop(caches, dq)
    adam_step(q_net, grads, opt)
    return loss
