import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from pathogen_control.envs import QuadraticBandit
from pathogen_control.ppo import (LOG_STD_MAX, LOG_STD_MIN, Adam, Batch, NonFiniteLoss,
                                  PolicyParams, PPOConfig, compute_gae,
                                  init_mlp, mlp_backward, mlp_forward, policy_forward,
                                  ppo_loss_and_grad, ppo_update, sample_action, squash,
                                  squashed_log_prob, train, unsquash)

BOUNDS = (0.5, 7.5)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b))))


# --- networks -------------------------------------------------------------------

def test_zero_network():
    p = PolicyParams.init(5, rng=np.random.default_rng(0))
    p.set_flat(np.zeros_like(p.flat()))
    mean, log_std, value = policy_forward(p, np.arange(5.0))
    assert mean[0] == 0.0 and value == 0.0 and log_std[0] == 0.0


def test_hand_computed_toy_net():
    # 2 inputs -> 2 ReLU units (identity) -> 1 output
    layers = [[np.eye(2), np.array([0.0, -1.0])], [np.array([[2.0], [3.0]]), np.array([0.5])]]
    x = np.array([[1.0, 4.0], [2.0, 0.5]])
    out, _ = mlp_forward(layers, x)
    # unit 2 is max(x2 - 1, 0)
    expected = 2.0 * x[:, 0] + 3.0 * np.maximum(x[:, 1] - 1.0, 0.0) + 0.5
    np.testing.assert_allclose(out[:, 0], expected)


def test_orthogonal_init():
    layers = init_mlp(np.random.default_rng(0), (7, 64, 64, 1), 0.01)
    W0 = layers[0][0]
    np.testing.assert_allclose(W0 @ W0.T, 2.0 * np.eye(7), atol=1e-12)
    assert np.linalg.norm(layers[-1][0]) == pytest.approx(0.01)
    assert all(not b.any() for _, b in layers)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), n_in=st.integers(1, 4), h=st.integers(1, 5))
def test_mlp_gradient_matches_finite_differences(seed, n_in, h):
    rng = np.random.default_rng(seed)
    layers = [[rng.normal(size=(n_in, h)), rng.normal(size=h)],
              [rng.normal(size=(h, h)), rng.normal(size=h)],
              [rng.normal(size=(h, 2)), rng.normal(size=2)]]
    x = rng.normal(size=(3, n_in))
    w = rng.normal(size=(3, 2))  # gradient of sum(w * out) covers every output

    def f():
        return float(np.sum(w * mlp_forward(layers, x)[0]))

    _, acts = mlp_forward(layers, x)
    grads = mlp_backward(layers, acts, w)
    eps = 1e-6
    for layer, glayer in zip(layers, grads):
        for arr, garr in zip(layer, glayer):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = f()
                arr[idx] = old - eps
                fm = f()
                arr[idx] = old
                fd[idx] = (fp - fm) / (2 * eps)
            # skip entries whose ReLU pattern flips inside the stencil
            assert _rel_err(fd, garr) < 1e-5 or np.allclose(fd, garr, atol=1e-7)


# --- squashed Gaussian ------------------------------------------------------------

def test_squash_limits_and_inverse():
    assert squash(np.inf, BOUNDS) == 7.5
    assert squash(-np.inf, BOUNDS) == 0.5
    u = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(unsquash(squash(u, BOUNDS), BOUNDS), u, atol=1e-9)


def test_sample_mean_statistics():
    p = PolicyParams.init(3, rng=np.random.default_rng(1), log_std_init=-0.3)
    p.pi[-1][1][:] = 0.4
    rng = np.random.default_rng(2)
    obs = np.ones(3)
    mean, log_std, _ = policy_forward(p, obs)
    N = 100_000
    u = np.array([sample_action(p, obs, rng, BOUNDS)[0][0] for _ in range(N)])
    sigma = np.exp(log_std[0])
    assert abs(u.mean() - mean[0]) < 3 * sigma / np.sqrt(N)


def test_log_prob_matches_independent_density():
    p = PolicyParams.init(2, rng=np.random.default_rng(3), log_std_init=-0.7)
    rng = np.random.default_rng(4)
    obs = np.array([0.3, 0.9])
    mean, log_std, _ = policy_forward(p, obs)
    for _ in range(20):
        u, a, logp = sample_action(p, obs, rng, BOUNDS)
        # density of a = squash(u): N(u; mean, std) / |da/du|
        dadu = 0.5 * (BOUNDS[1] - BOUNDS[0]) / np.cosh(u[0]) ** 2
        ref = norm.logpdf(u[0], mean[0], np.exp(log_std[0])) - np.log(dadu)
        assert abs(logp - ref) < 1e-10
        assert BOUNDS[0] <= a[0] <= BOUNDS[1]


def test_log_det_stable_for_large_raw_actions():
    u = np.array([[40.0], [-40.0]])
    lp = squashed_log_prob(u, np.zeros((2, 1)), np.zeros(1), BOUNDS)
    assert np.all(np.isfinite(lp))


def test_deterministic_limit():
    p = PolicyParams.init(2, rng=np.random.default_rng(5), log_std_init=-50.0)
    rng = np.random.default_rng(6)
    mean, log_std, _ = policy_forward(p, np.ones(2))
    assert log_std[0] == LOG_STD_MIN
    acts = [sample_action(p, np.ones(2), rng, BOUNDS)[1][0] for _ in range(200)]
    # std is clamped at exp(LOG_STD_MIN); the squash slope is at most half the bound range
    assert np.std(acts) <= 1.2 * 0.5 * (BOUNDS[1] - BOUNDS[0]) * np.exp(LOG_STD_MIN)
    assert np.mean(acts) == pytest.approx(squash(mean[0], BOUNDS), abs=0.01)
    p.log_std[:] = 10.0
    assert policy_forward(p, np.ones(2))[1][0] == LOG_STD_MAX


# --- advantages ---------------------------------------------------------------------

def _brute_gae(r, v, d, last, gamma, lam):
    n = len(r)
    vals = np.append(v, last)
    adv = np.zeros(n)
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            live = 0.0 if d[k] else 1.0
            delta = r[k] + gamma * vals[k + 1] * live - vals[k]
            total += weight * delta
            if d[k]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


def test_gae_monte_carlo_limit():
    r = np.array([1.0, -2.0, 0.5, 3.0])
    v = np.array([0.3, 0.1, -0.4, 2.0])
    d = np.array([False, False, False, True])
    adv, ret = compute_gae(r, v, d, 99.0, 1.0, 1.0)
    np.testing.assert_allclose(adv, np.cumsum(r[::-1])[::-1] - v, atol=1e-14)
    np.testing.assert_allclose(ret, adv + v)


def test_gae_zero():
    adv, ret = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, bool), 0.0, 0.99, 0.95)
    assert not adv.any() and not ret.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_gae_matches_definition(seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=10), rng.normal(size=10)
    d = rng.random(10) < 0.2
    gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
    last = rng.normal()
    adv, _ = compute_gae(r, v, d, last, gamma, lam)
    np.testing.assert_allclose(adv, _brute_gae(r, v, d, last, gamma, lam), rtol=0, atol=1e-12)


# --- PPO loss -------------------------------------------------------------------------

def _tiny(seed, obs_dim=3, n=3):
    rng = np.random.default_rng(seed)
    p = PolicyParams.init(obs_dim, 1, (4, 3), -0.2, rng)
    for layer in p.pi + p.vf:  # move away from the near-zero policy head
        layer[0] += 0.3 * rng.normal(size=layer[0].shape)
        layer[1] += 0.1 * rng.normal(size=layer[1].shape)
    obs = rng.normal(size=(n, obs_dim))
    mean, log_std, _ = policy_forward(p, obs)
    u = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    logp = squashed_log_prob(u, mean, log_std, BOUNDS)
    batch = Batch(obs, u, logp, rng.normal(size=n), rng.normal(size=n))
    return p, batch, rng


def test_ratio_one_identity():
    p, batch, _ = _tiny(0, n=6)
    cfg = PPOConfig(normalize_advantage=False)
    loss, grads, info = ppo_loss_and_grad(p, batch, cfg, BOUNDS)
    assert info["clip_fraction"] == 0.0
    assert info["policy_loss"] == pytest.approx(-batch.advantages.mean())
    # vanilla policy gradient -mean(A grad log pi) by finite differences of log pi
    eps = 1e-6
    flat = p.flat()
    n_pi = sum(W.size + b.size for W, b in p.pi) + p.log_std.size
    g = grads.flat()
    for i in np.random.default_rng(1).choice(n_pi, 15, replace=False):
        def obj(x):
            q = p.copy()
            q.set_flat(x)
            m, ls, _ = policy_forward(q, batch.obs)
            return -np.mean(batch.advantages * squashed_log_prob(batch.raw_actions, m, ls, BOUNDS))
        e = np.zeros_like(flat)
        e[i] = eps
        fd = (obj(flat + e) - obj(flat - e)) / (2 * eps)
        assert fd == pytest.approx(g[i], rel=1e-5, abs=1e-9)


def test_zero_advantages():
    p, batch, _ = _tiny(1)
    batch.advantages[:] = 0.0
    _, grads, info = ppo_loss_and_grad(p, batch, PPOConfig(), BOUNDS)
    assert info["policy_loss"] == 0.0
    assert all(not a.any() for layer in grads.pi for a in layer)
    assert not grads.log_std.any()
    assert any(a.any() for layer in grads.vf for a in layer)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("normalize", [True, False])
def test_full_loss_gradient_matches_finite_differences(seed, normalize):
    p, batch, rng = _tiny(seed)
    # shift the old log-probs so some ratios sit outside the clip range
    batch.log_probs = batch.log_probs + rng.uniform(-0.5, 0.5, size=len(batch))
    cfg = PPOConfig(normalize_advantage=normalize, ent_coef=0.01)
    _, grads, _ = ppo_loss_and_grad(p, batch, cfg, BOUNDS)
    flat, g = p.flat(), grads.flat()
    eps = 1e-6

    def loss_at(x):
        q = p.copy()
        q.set_flat(x)
        return ppo_loss_and_grad(q, batch, cfg, BOUNDS)[0]

    fd = np.zeros_like(flat)
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = eps
        fd[i] = (loss_at(flat + e) - loss_at(flat - e)) / (2 * eps)
    # relative to the gradient scale; single entries near 1e-5 sit at the FD noise floor
    assert np.max(np.abs(fd - g)) < 1e-5 * np.max(np.abs(g))


def test_adam_matches_reference():
    opt = Adam(2, 0.1)
    theta = np.array([1.0, -1.0])
    g = np.array([0.5, -2.0])
    theta = opt.step(theta, g)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(theta, [0.9, -0.9], atol=1e-6)


def test_non_finite_loss_aborts():
    p, batch, rng = _tiny(2)
    batch.returns[0] = np.nan
    with pytest.raises(NonFiniteLoss, match="returns"):
        ppo_update(p, batch, PPOConfig(), BOUNDS, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip_range=1.5)
    with pytest.raises(ValueError):
        PPOConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PPOConfig(learning_rate=-1.0)


def test_checkpoint_roundtrip(tmp_path):
    p = PolicyParams.init(4, rng=np.random.default_rng(7))
    p.save(tmp_path / "ckpt.npz")
    q = PolicyParams.load(tmp_path / "ckpt.npz")
    np.testing.assert_array_equal(p.flat(), q.flat())
    with np.load(tmp_path / "ckpt.npz") as d:
        assert int(d["format_version"]) == 1


# --- training -----------------------------------------------------------------------

BANDIT_CONFIG = PPOConfig(reward_scale=0.1)


@pytest.fixture(scope="module")
def bandit_curve():
    return train(QuadraticBandit(), BANDIT_CONFIG, 2000, seed=0)[0]


def test_bandit_converges(bandit_curve):
    assert abs(bandit_curve.mean_action[-1] - 3.0) < 0.1


def test_bandit_value_loss_decreases_on_frozen_batch(bandit_curve):
    curve = bandit_curve
    improved = np.array(curve.value_loss_last) <= np.array(curve.value_loss_first)
    assert improved.mean() >= 0.9


def test_training_is_deterministic(tmp_path):
    runs = []
    for k in range(2):
        curve, params = train(QuadraticBandit(), BANDIT_CONFIG, 200, seed=11)
        curve.to_csv(tmp_path / f"c{k}.csv")
        runs.append(params.flat())
    assert (tmp_path / "c0.csv").read_bytes() == (tmp_path / "c1.csv").read_bytes()
    np.testing.assert_array_equal(runs[0], runs[1])
    header = (tmp_path / "c0.csv").read_text().splitlines()[0]
    assert header == "update,steps,mean_action,std_action,mean_episode_return"


def test_total_steps_must_divide():
    with pytest.raises(ValueError):
        train(QuadraticBandit(), PPOConfig(), 15, seed=0)
