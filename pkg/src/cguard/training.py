"""Minimal clipped-surrogate policy-gradient trainer (PPO-style).

Rollouts are collected from a vectorized environment pool, advantages come
from generalized advantage estimation, and updates use the clipped surrogate
with a quadratic value loss. Everything is hand-rolled numpy: gradients flow
through the action transform and the per-axis networks analytically.

Two modes share the code path: "ppo" trains the raw architecture, "cppo"
projects every axis network back into the contracting weight set after each
minibatch step, so the deployed policy is stability-constrained at all times.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import peg
from .nets import Adam, Mlp, clip_global_norm, global_norm, stacked_backward, stacked_forward
from .policy import AxisNetwork, ConstrainedPolicy
from .transforms import transform_from_plant

CHECKPOINT_SCHEMA = "cguard-checkpoint-v1"

LOG2PI = float(np.log(2.0 * np.pi))

# Weights live in float64; the rollout/update hot path computes in float32
# (the policy-gradient signal is far noisier than single precision).
COMPUTE_DTYPE = np.float32


class NonFiniteLoss(RuntimeError):
    """Raised when an update produced a non-finite loss; weights are restored."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    entropy_coef: float = 0.0
    vf_coef: float = 1.0
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    minibatches: int = 4
    clip_range: float = 0.1
    epochs_per_update: int = 10
    episodes: int = 4000
    steps_per_episode: int = 800
    seed: int = 0
    n_envs: int = 16
    policy_width: int = 32
    policy_depth: int = 3
    value_width: int = 32
    value_depth: int = 3
    projection_epsilon: float = 1e-3
    action_clip: float = 5.0
    log_std_init: float = 0.0
    log_std_floor: float = -5.0
    checkpoint_every: int = 1000
    delta_t: float = peg.DELTA_T
    reward_weights: tuple = peg.REWARD_WEIGHTS
    # Rewards are scaled by this factor before GAE / value regression so the
    # tanh-bounded critic sees targets of order one. Advantage normalization
    # makes the policy update invariant to the choice.
    reward_scale: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.clip_range < 1.0):
            raise ValueError("clip_range must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        for name in ("minibatches", "epochs_per_update", "steps_per_episode", "n_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be nonnegative")


@dataclass
class RolloutBuffer:
    obs: np.ndarray        # (T, N, 2m) policy/value input (s1 | s2)
    actions: np.ndarray    # (T, N, m) sampled (unclipped) actions
    log_probs: np.ndarray  # (T, N)
    rewards: np.ndarray    # (T, N)
    values: np.ndarray     # (T+1, N) including the bootstrap value
    dones: np.ndarray      # (T, N) episode-boundary flags (time-limit truncations)
    errors: np.ndarray     # (T, N, 2) raw tracking errors, for metrics only
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def n_steps(self):
        return self.obs.shape[0]

    @property
    def n_envs(self):
        return self.obs.shape[1]

    def flat(self):
        T, N = self.n_steps, self.n_envs
        return (
            self.obs.reshape(T * N, -1),
            self.actions.reshape(T * N, -1),
            self.log_probs.reshape(T * N),
            self.advantages.reshape(T * N),
            self.returns.reshape(T * N),
        )


def compute_gae(rewards, values, gamma, lam, terminated=None):
    """Generalized advantage estimation with bootstrap at truncation.

    ``values`` has one more row than ``rewards`` (the bootstrap value).
    ``terminated`` marks true terminal states whose successors contribute no
    value; fixed-horizon episode ends are truncations and keep the bootstrap.
    With lam=1 this reduces to discounted returns minus baselines; with lam=0
    it is the one-step temporal-difference residual.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    if terminated is None:
        terminated = np.zeros_like(rewards, dtype=bool)
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - terminated[t].astype(float)
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def gaussian_log_prob(actions, mean, log_std):
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * actions.shape[-1] * LOG2PI


def make_peg_policy(config, rng, constrained, transform=None):
    """Fresh policy for the peg task, transform frozen at the nominal model."""
    if transform is None:
        plant, task = peg.nominal_peg_plant(peg.PegParams(delta_t=config.delta_t))
        transform = transform_from_plant(plant, np.zeros(2), peg.closed_form_equilibrium(peg.PegParams(delta_t=config.delta_t), task))
    axes = [
        AxisNetwork.create(rng, width=config.policy_width, depth=config.policy_depth)
        for _ in range(transform.m)
    ]
    policy = ConstrainedPolicy(
        transform,
        axes,
        config.delta_t,
        epsilon=config.projection_epsilon,
        action_clip=config.action_clip,
        log_std=np.full(transform.m, config.log_std_init),
    )
    if constrained:
        policy.project()
    return policy


def make_value_net(m, config, rng):
    sizes = [2 * m] + [config.value_width] * config.value_depth + [1]
    return Mlp.create(sizes, rng)


def collect_rollouts(policy, value_net, pool, n_steps, rng, deterministic=False):
    """One fixed-length episode per environment, fully seeded.

    The integrator state is owned here (one row per env), reset to zero at
    episode start, and advanced after each action per the running-sum
    convention. Returns a complete buffer with GAE-ready values.
    """
    N = pool.n
    m = policy.m
    Wy = policy.transform.W_y
    dt = policy.delta_t
    s2 = np.zeros((N, m))
    obs = np.zeros((n_steps, N, 2 * m))
    actions = np.zeros((n_steps, N, m))
    log_probs = np.zeros((n_steps, N))
    rewards = np.zeros((n_steps, N))
    values = np.zeros((n_steps + 1, N))
    dones = np.zeros((n_steps, N), dtype=bool)
    errors = np.zeros((n_steps, N, 2))
    std = np.exp(policy.log_std)

    def value_of(ob):
        out, _ = stacked_forward([value_net], ob[None], dtype=COMPUTE_DTYPE)
        return out[0, :, 0].astype(float)

    for t in range(n_steps):
        y = pool.error_state
        s1 = y @ Wy.T
        ob = np.column_stack([s1, s2])
        mu, _ = policy.mean_batch(s1, s2, dtype=COMPUTE_DTYPE)
        if deterministic:
            a = mu
        else:
            a = mu + std * rng.standard_normal(mu.shape)
        obs[t] = ob
        actions[t] = a
        log_probs[t] = gaussian_log_prob(a, mu, policy.log_std)
        values[t] = value_of(ob)
        applied = np.clip(a, -policy.action_clip, policy.action_clip)
        rewards[t] = pool.step(applied)
        errors[t] = pool.error_state
        s2 = s2 + s1 * dt
    dones[-1] = True
    y = pool.error_state
    ob = np.column_stack([y @ Wy.T, s2])
    values[n_steps] = value_of(ob)
    buf = RolloutBuffer(
        obs=obs, actions=actions, log_probs=log_probs, rewards=rewards,
        values=values, dones=dones, errors=errors,
    )
    return buf


def _policy_objective_grads(policy, value_net, obs, actions, logp_old, adv, ret, config, clip_range=None):
    """Loss values and gradients for one minibatch.

    Returns (losses dict, grads list aligned with policy params + log_std +
    value params). Exposed separately so the surrogate gradient can be
    checked against the plain policy gradient when clipping is inactive.
    """
    m = policy.m
    n = obs.shape[0]
    clip = config.clip_range if clip_range is None else clip_range
    s1, s2 = obs[:, :m], obs[:, m:]
    mu, caches = policy.mean_batch(s1, s2, dtype=COMPUTE_DTYPE)
    std = np.exp(policy.log_std)
    logp = gaussian_log_prob(actions, mu, policy.log_std)
    ratio = np.exp(logp - logp_old)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    pg_loss = -np.minimum(surr1, surr2).mean()
    # gradient of the surrogate wrt log-prob: active only on the unclipped branch
    take1 = surr1 <= surr2
    dlogp = np.where(take1, -adv * ratio, 0.0) / n

    z = (actions - mu) / std
    grad_mu = dlogp[:, None] * (z / std)              # d logp / d mu
    grad_logstd = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    grad_logstd -= config.entropy_coef * np.ones(m)   # entropy bonus: dH/dlogstd = 1

    policy_grads = policy.backward_mean(caches, grad_mu)

    v_pred, v_cache = stacked_forward([value_net], obs[None], dtype=COMPUTE_DTYPE)
    v_err = v_pred[0, :, 0].astype(float) - ret
    v_loss = float((v_err**2).mean())
    v_grad_out = ((2.0 * config.vf_coef / n) * v_err)[None, :, None]
    value_grads_nested = stacked_backward([value_net], v_cache, v_grad_out)[0]
    value_grads = []
    for dW, db in value_grads_nested:
        value_grads.append(dW)
        value_grads.append(db)

    entropy = float(policy.log_std.sum() + 0.5 * m * (1.0 + LOG2PI))
    losses = {
        "pg_loss": float(pg_loss),
        "v_loss": v_loss,
        "entropy": entropy,
        "approx_kl": float((logp_old - logp).mean()),
        "clip_frac": float((np.abs(ratio - 1.0) > clip).mean()),
    }
    grads = policy_grads + [grad_logstd] + value_grads
    return losses, grads


def ppo_update(policy, value_net, optimizer, buffer, config, constrained, rng):
    """One full update over a rollout buffer.

    Runs ``epochs_per_update`` passes of ``minibatches`` shuffled slices; in
    constrained mode the axis networks are projected after every minibatch
    step so even the policies used for intermediate ratios stay feasible.
    Raises NonFiniteLoss (restoring the previous weights) if any loss or
    gradient goes non-finite.
    """
    obs, actions, logp_old, adv, ret = buffer.flat()
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    params = policy.parameters() + value_net.parameters()
    snapshot = [p.copy() for p in params]
    B = obs.shape[0]
    stats = {"pg_loss": [], "v_loss": [], "entropy": [], "approx_kl": [], "clip_frac": [], "grad_norm": []}
    projection_delta = 0.0
    try:
        for _ in range(config.epochs_per_update):
            perm = rng.permutation(B)
            for mb in np.array_split(perm, config.minibatches):
                losses, grads = _policy_objective_grads(
                    policy, value_net, obs[mb], actions[mb], logp_old[mb], adv[mb], ret[mb], config
                )
                if not all(np.isfinite(v) for v in losses.values()) or not all(
                    np.all(np.isfinite(g)) for g in grads
                ):
                    raise NonFiniteLoss("non-finite loss or gradient in update")
                norm = clip_global_norm(grads, config.max_grad_norm)
                optimizer.step(params, grads)
                np.maximum(policy.log_std, config.log_std_floor, out=policy.log_std)
                if constrained:
                    before = [W.copy() for ax in policy.axes for W, _ in ax.layers]
                    policy.project()
                    # projection returns fresh arrays: rebind the shared views
                    params = policy.parameters() + value_net.parameters()
                    after = [W for ax in policy.axes for W, _ in ax.layers]
                    projection_delta += global_norm([a - b for a, b in zip(after, before)])
                for key in ("pg_loss", "v_loss", "entropy", "approx_kl", "clip_frac"):
                    stats[key].append(losses[key])
                stats["grad_norm"].append(norm)
    except NonFiniteLoss:
        for p, s in zip(policy.parameters() + value_net.parameters(), snapshot):
            p[:] = s
        raise
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["projection_delta"] = float(projection_delta)
    return out


def save_checkpoint(path, policy, value_net, config, mode, episode):
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "mode": mode,
        "episode": episode,
        "policy": policy.to_dict(),
        "value_net": value_net.to_dict(),
        "config": asdict(config),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return path


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    policy = ConstrainedPolicy.from_dict(payload["policy"])
    value_net = Mlp.from_dict(payload["value_net"])
    cfg = payload["config"]
    cfg["reward_weights"] = tuple(cfg.get("reward_weights", peg.REWARD_WEIGHTS))
    return policy, value_net, TrainConfig(**cfg), payload


@dataclass
class TrainResult:
    mode: str
    curve: list              # rows: (episode, mean_return, success_rate)
    checkpoints: dict        # episode -> path (empty when out_dir is None)
    policy: ConstrainedPolicy
    value_net: Mlp
    update_stats: list = field(default_factory=list)


def train(mode, config, out_dir=None, tag=""):
    """Full training run; returns the curve, the final nets, and checkpoints.

    ``mode`` is "ppo" (unconstrained) or "cppo" (projection after every
    minibatch step). Checkpoints land every ``checkpoint_every`` episodes
    plus at the end; the learning curve is one row per rollout iteration.
    Deterministic for a fixed config.
    """
    if mode not in ("ppo", "cppo"):
        raise ValueError("mode must be 'ppo' or 'cppo'")
    constrained = mode == "cppo"
    rng = np.random.default_rng(config.seed)
    policy = make_peg_policy(config, rng, constrained)
    value_net = make_value_net(policy.m, config, rng)
    optimizer = Adam(policy.parameters() + value_net.parameters(), lr=config.learning_rate)
    pool = peg.PegEnvPool(
        config.n_envs,
        root_seed=config.seed,
        reward_weights=config.reward_weights,
        delta_t=config.delta_t,
    )
    curve = []
    checkpoints = {}
    stats_log = []
    episodes_done = 0
    next_checkpoint = config.checkpoint_every

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    def checkpoint(ep):
        if not out_dir:
            checkpoints[ep] = None
            return
        name = f"ckpt_{mode}{tag}_ep{ep}.json"
        path = os.path.join(out_dir, "checkpoints", name)
        save_checkpoint(path, policy, value_net, config, mode, ep)
        checkpoints[ep] = path

    n_iters = config.episodes // config.n_envs
    for _ in range(n_iters):
        pool.reset_all()
        buf = collect_rollouts(policy, value_net, pool, config.steps_per_episode, rng)
        buf.advantages, buf.returns = compute_gae(
            buf.rewards * config.reward_scale, buf.values, config.gamma, config.gae_lambda
        )
        try:
            stats = ppo_update(policy, value_net, optimizer, buf, config, constrained, rng)
        except NonFiniteLoss:
            stats = {"aborted": True}
        stats_log.append(stats)
        episodes_done += config.n_envs
        ep_returns = buf.rewards.sum(axis=0)
        window = max(1, int(round(peg.ERROR_WINDOW_SECONDS / config.delta_t)))
        tail = buf.errors[-window:]
        final_err = np.abs(tail).max(axis=2).mean(axis=0)
        success = float((final_err <= peg.FAILURE_ERROR).mean())
        curve.append((episodes_done, float(ep_returns.mean()), success))
        while episodes_done >= next_checkpoint:
            checkpoint(next_checkpoint)
            next_checkpoint += config.checkpoint_every
    if episodes_done and episodes_done not in checkpoints:
        checkpoint(episodes_done)

    if out_dir:
        curve_path = os.path.join(out_dir, f"curve_{mode}{tag}.csv")
        with open(curve_path, "w") as fh:
            fh.write("episode,mean_return,success_rate\n")
            for row in curve:
                fh.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f}\n")
    return TrainResult(
        mode=mode, curve=curve, checkpoints=checkpoints,
        policy=policy, value_net=value_net, update_stats=stats_log,
    )
