"""Proximal policy optimisation in plain numpy.

Policy: ReLU MLP trunk -> Gaussian mean, state-independent log-std, tanh
squash onto the environment's action interval. Value: separate ReLU MLP.
Gradients are computed by hand-written backpropagation.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PPOConfig:
    learning_rate: float = 0.005
    n_steps: int = 10
    batch_size: int = 10
    n_epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    normalize_advantage: bool = True
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    reward_scale: float = 1.0
    # treat the end of an episode as a time limit and bootstrap through it
    time_limit_bootstrap: bool = False

    def __post_init__(self):
        if not (0 < self.clip_range < 1):
            raise ValueError("clip_range must lie in (0, 1)")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("learning_rate", "n_steps", "batch_size", "n_epochs", "gae_lambda",
                     "max_grad_norm", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# --- networks ------------------------------------------------------------------

def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def init_mlp(rng, sizes, out_gain):
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if k == len(sizes) - 2 else np.sqrt(2.0)
        layers.append([_orthogonal(rng, n_in, n_out, gain), np.zeros(n_out)])
    return layers


def mlp_forward(layers, x):
    """Returns the output and the per-layer activations needed for backprop."""
    acts = [x]
    h = x
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if k == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, grad_out):
    grads = []
    g = grad_out
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k != len(layers) - 1:
            g = g * (acts[k + 1] > 0)
        grads.append([acts[k].T @ g, g.sum(axis=0)])
        g = g @ W.T
    return grads[::-1]


@dataclass
class PolicyParams:
    pi: list
    log_std: np.ndarray
    vf: list

    @classmethod
    def init(cls, obs_dim: int, act_dim: int = 1, hidden=(64, 64), log_std_init=0.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        sizes = (obs_dim, *hidden)
        return cls(pi=init_mlp(rng, (*sizes, act_dim), 0.01),
                   log_std=np.full(act_dim, float(log_std_init)),
                   vf=init_mlp(rng, (*sizes, 1), 1.0))

    def arrays(self) -> list[np.ndarray]:
        out = [a for layer in self.pi for a in layer]
        out.append(self.log_std)
        out += [a for layer in self.vf for a in layer]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, v: np.ndarray):
        i = 0
        for a in self.arrays():
            a[...] = v[i:i + a.size].reshape(a.shape)
            i += a.size

    def copy(self) -> "PolicyParams":
        return PolicyParams([[W.copy(), b.copy()] for W, b in self.pi], self.log_std.copy(),
                            [[W.copy(), b.copy()] for W, b in self.vf])

    def zeros_like(self) -> "PolicyParams":
        z = self.copy()
        z.set_flat(np.zeros_like(self.flat()))
        return z

    def save(self, path):
        """Write all parameters to an ``.npz`` archive (keys ``pi_W0``, ``log_std``, ...)."""
        data = {"format_version": np.array(1)}
        for k, (W, b) in enumerate(self.pi):
            data[f"pi_W{k}"], data[f"pi_b{k}"] = W, b
        for k, (W, b) in enumerate(self.vf):
            data[f"vf_W{k}"], data[f"vf_b{k}"] = W, b
        data["log_std"] = self.log_std
        np.savez(path, **data)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with np.load(path) as d:
            n_pi = sum(1 for k in d.files if k.startswith("pi_W"))
            n_vf = sum(1 for k in d.files if k.startswith("vf_W"))
            return cls([[d[f"pi_W{k}"], d[f"pi_b{k}"]] for k in range(n_pi)], d["log_std"].copy(),
                       [[d[f"vf_W{k}"], d[f"vf_b{k}"]] for k in range(n_vf)])


def policy_forward(params: PolicyParams, obs):
    """Action mean, clamped log-std and value for one observation or a batch."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    x = np.atleast_2d(obs)
    if x.shape[1] != params.pi[0][0].shape[0]:
        raise ValueError(f"observation size {x.shape[1]} does not match network input "
                         f"{params.pi[0][0].shape[0]}")
    mean, _ = mlp_forward(params.pi, x)
    value, _ = mlp_forward(params.vf, x)
    log_std = np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)
    if single:
        return mean[0], log_std, value[0, 0]
    return mean, log_std, value[:, 0]


# --- squashed Gaussian -----------------------------------------------------------

def squash(u, bounds):
    lo, hi = bounds
    return lo + 0.5 * (hi - lo) * (np.tanh(u) + 1.0)


def unsquash(a, bounds):
    lo, hi = bounds
    return np.arctanh(np.clip(2.0 * (a - lo) / (hi - lo) - 1.0, -1 + 1e-12, 1 - 1e-12))


def log_abs_det_squash(u, bounds):
    """log |d squash / du| computed without cancellation for large |u|."""
    lo, hi = bounds
    u = np.asarray(u, dtype=float)
    # log(1 - tanh^2 u) = 2 (log 2 - |u| - log1p(exp(-2|u|)))
    log_sech2 = 2.0 * (np.log(2.0) - np.abs(u) - np.log1p(np.exp(-2.0 * np.abs(u))))
    return np.log(0.5 * (hi - lo)) + log_sech2


def gaussian_log_prob(u, mean, log_std):
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def squashed_log_prob(u, mean, log_std, bounds):
    """Density of the squashed action, evaluated through its pre-image ``u``."""
    return gaussian_log_prob(u, mean, log_std) - np.sum(log_abs_det_squash(u, bounds), axis=-1)


def sample_action(params: PolicyParams, obs, rng, bounds):
    """Returns ``(raw action, squashed action, log-prob of the squashed action)``."""
    mean, log_std, _ = policy_forward(params, obs)
    u = mean + np.exp(log_std) * rng.standard_normal(np.shape(mean))
    return u, squash(u, bounds), float(squashed_log_prob(u, mean, log_std, bounds))


# --- advantages -------------------------------------------------------------------

def compute_gae(rewards, values, dones, last_value, gamma, gae_lambda):
    """Generalised advantage estimates for one rollout.

    ``dones[t]`` marks that the episode ended after step ``t``; ``last_value``
    is the value of the state following the final step (ignored if it ended).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    next_value, running = last_value, 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * gae_lambda * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Trajectory:
    obs: list = field(default_factory=list)
    raw_actions: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def add(self, obs, raw, action, log_prob, reward, value, done):
        if not np.isfinite(log_prob):
            raise ValueError("non-finite log-probability in trajectory")
        self.obs.append(np.asarray(obs, dtype=float))
        self.raw_actions.append(np.atleast_1d(raw).astype(float))
        self.actions.append(float(np.squeeze(action)))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.rewards)


@dataclass
class Batch:
    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.obs)

    def subset(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.raw_actions[idx], self.log_probs[idx],
                     self.advantages[idx], self.returns[idx])


# --- loss and gradient ---------------------------------------------------------------

def ppo_loss_and_grad(params: PolicyParams, batch: Batch, config: PPOConfig, bounds):
    """Total PPO loss and its gradient with respect to every parameter.

    loss = -mean(min(r A, clip(r) A)) + vf_coef mean((V - R)^2) - ent_coef H
    """
    n = len(batch)
    x = batch.obs
    mean, pi_acts = mlp_forward(params.pi, x)
    value, vf_acts = mlp_forward(params.vf, x)
    value = value[:, 0]
    raw_log_std = params.log_std
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)

    u = batch.raw_actions
    logp = squashed_log_prob(u, mean, log_std, bounds)
    ratio = np.exp(logp - batch.log_probs)

    adv = batch.advantages
    if config.normalize_advantage and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    eps = config.clip_range
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    surrogate = np.minimum(unclipped_term, clipped_term)
    policy_loss = -surrogate.mean()
    value_loss = np.mean((value - batch.returns) ** 2)
    entropy = np.sum(log_std + 0.5 + _HALF_LOG_2PI)
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy

    # d(-surrogate)/dlogp; the clipped branch carries no gradient
    active = unclipped_term <= clipped_term
    dlogp = np.where(active, -ratio * adv, 0.0) / n
    z = (u - mean) / std
    dmean = dlogp[:, None] * z / std
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - config.ent_coef
    dlog_std = dlog_std * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))
    dvalue = config.vf_coef * 2.0 * (value - batch.returns) / n

    grads = PolicyParams(mlp_backward(params.pi, pi_acts, dmean), dlog_std,
                         mlp_backward(params.vf, vf_acts, dvalue[:, None]))
    info = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > eps)),
        "approx_kl": float(np.mean((ratio - 1) - np.log(ratio))),
    }
    return float(loss), grads, info


class Adam:
    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class NonFiniteLoss(FloatingPointError):
    pass


def ppo_update(params: PolicyParams, batch: Batch, config: PPOConfig, bounds, rng,
               optimizer: Adam | None = None):
    """Run ``n_epochs`` passes of shuffled minibatch gradient steps in place.

    Returns ``(params, diagnostics)``; diagnostics hold per-step lists plus
    ``value_loss_before``/``value_loss_after``, the value loss on the whole
    frozen batch before the first and after the last epoch.
    """
    if optimizer is None:
        optimizer = Adam(params.flat().size, config.learning_rate, config.adam_betas, config.adam_eps)
    diag = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl",
                            "grad_norm")}
    n = len(batch)
    diag["value_loss_before"] = _batch_value_loss(params, batch)
    for _ in range(config.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            mb = batch.subset(order[start:start + config.batch_size])
            loss, grads, info = ppo_loss_and_grad(params, mb, config, bounds)
            g = grads.flat()
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite PPO loss {loss}; returns in "
                                    f"[{mb.returns.min():.3g}, {mb.returns.max():.3g}], "
                                    f"advantages in [{mb.advantages.min():.3g}, {mb.advantages.max():.3g}]")
            gnorm = float(np.linalg.norm(g))
            if gnorm > config.max_grad_norm:
                g = g * (config.max_grad_norm / (gnorm + 1e-6))
            params.set_flat(optimizer.step(params.flat(), g))
            for k, v in info.items():
                diag[k].append(v)
            diag["grad_norm"].append(gnorm)
    diag["value_loss_after"] = _batch_value_loss(params, batch)
    return params, diag


def _batch_value_loss(params: PolicyParams, batch: Batch) -> float:
    value = mlp_forward(params.vf, batch.obs)[0][:, 0]
    return float(np.mean((value - batch.returns) ** 2))


# --- training loop ------------------------------------------------------------------

@dataclass
class LearningCurve:
    update: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    mean_action: list = field(default_factory=list)
    std_action: list = field(default_factory=list)
    mean_episode_return: list = field(default_factory=list)
    value_loss_first: list = field(default_factory=list)
    value_loss_last: list = field(default_factory=list)

    COLUMNS = ("update", "steps", "mean_action", "std_action", "mean_episode_return")

    def rows(self):
        return zip(*(getattr(self, c) for c in self.COLUMNS))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0], row[1], *(_fmt(v) for v in row[2:])])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def train(env, config: PPOConfig, total_steps: int, seed: int, callback=None):
    """Interleave ``n_steps`` rollouts with PPO updates.

    Logged per update: the squashed policy mean averaged over the states of
    the rollout just used (the "learned" action), the spread of the squashed
    action distribution there, and the mean return of the episodes completed
    so far.
    Returns ``(LearningCurve, PolicyParams)``.
    """
    if total_steps % config.n_steps:
        raise ValueError("total_steps must be a multiple of n_steps")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    bounds = env.bounds
    params = PolicyParams.init(env.obs_dim, 1, config.hidden, config.log_std_init, rng)
    optimizer = Adam(params.flat().size, config.learning_rate, config.adam_betas, config.adam_eps)
    curve = LearningCurve()

    obs = env.reset(seed=seed)
    ep_return, returns = 0.0, []
    steps = 0
    for update in range(1, total_steps // config.n_steps + 1):
        traj = Trajectory()
        for _ in range(config.n_steps):
            u, a, logp = sample_action(params, obs, rng, bounds)
            _, _, value = policy_forward(params, obs)
            next_obs, reward, done = env.step(a)
            ep_return += reward
            r = reward * config.reward_scale
            if done and config.time_limit_bootstrap:
                r += config.gamma * policy_forward(params, next_obs)[2]
            traj.add(obs, u, a, logp, r, value, done)
            steps += 1
            if done:
                returns.append(ep_return)
                ep_return = 0.0
                next_obs = env.reset()
            obs = next_obs
        _, _, last_value = policy_forward(params, obs)
        adv, ret = compute_gae(traj.rewards, traj.values, traj.dones, last_value,
                               config.gamma, config.gae_lambda)
        batch = Batch(np.array(traj.obs), np.array(traj.raw_actions), np.array(traj.log_probs),
                      adv, ret)
        params, diag = ppo_update(params, batch, config, bounds, rng, optimizer)

        # the learned action: updated policy mean over this rollout's states
        mean, log_std, _ = policy_forward(params, batch.obs)
        curve.update.append(update)
        curve.steps.append(steps)
        curve.mean_action.append(float(np.mean(squash(mean[:, 0], bounds))))
        curve.std_action.append(float(np.mean([_squashed_std(m, log_std[0], bounds)
                                               for m in mean[:, 0]])))
        curve.mean_episode_return.append(float(np.mean(returns)) if returns else float("nan"))
        curve.value_loss_first.append(diag["value_loss_before"])
        curve.value_loss_last.append(diag["value_loss_after"])
        if callback is not None:
            callback(update, curve, params)
    return curve, params


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(32)


def _squashed_std(mean, log_std, bounds):
    # Gauss-Hermite moments of squash(mean + std * z), z ~ N(0, 1)
    a = squash(mean + np.exp(log_std) * _GH_NODES, bounds)
    w = _GH_WEIGHTS / _GH_WEIGHTS.sum()
    m = w @ a
    return np.sqrt(max(w @ (a - m) ** 2, 0.0))


def config_dict(config: PPOConfig) -> dict:
    return asdict(config)
