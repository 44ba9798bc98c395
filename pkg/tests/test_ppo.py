import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeflow.env import BottleneckEnv
from mergeflow.episodes import generate_episode
from mergeflow.nn import load_checkpoint
from mergeflow.policy import build_params, policy_forward
from mergeflow.ppo import (RolloutBuffer, TrainConfig, _collect_worker, _losses,
                           collect_episode, compute_gae, episode_seed, ppo_update,
                           surrogate_terms, train)
from mergeflow.roadnet import build_map

TINY = TrainConfig(
    map_name="lanedrop", map_scale=0.4, demand_level=2200.0, penetration=0.25,
    episode_duration=60.0, rollout_length=120, total_steps=480,
    minibatch_size=60, epochs=2, max_activated=3, embed_width=16, ffn_width=32,
    eval_every=0, checkpoint_every=100, seed=11, sensing_range=60.0)


def gae_bruteforce(rewards, values, next_values, dones, gamma, lam):
    """Double-loop discounted-sum oracle over episode segments."""
    t = len(rewards)
    deltas = [rewards[i] + gamma * next_values[i] - values[i] for i in range(t)]
    adv = np.zeros(t)
    for i in range(t):
        total = 0.0
        factor = 1.0
        for j in range(i, t):
            total += factor * deltas[j]
            if dones[j]:
                break
            factor *= gamma * lam
        adv[i] = total
    return adv


def make_buffer(rng, t=9, dones=None):
    c, n, a = 4, 2, 6
    if dones is None:
        dones = np.zeros(t, dtype=bool)
        dones[-1] = True
    return RolloutBuffer(
        features=rng.standard_normal((t, c, 8)).astype(np.float32),
        state_mask=np.ones((t, c), dtype=bool),
        av_mask=np.ones((t, n), dtype=bool),
        obs_mask=np.ones((t, n, c), dtype=bool),
        action_mask=np.ones((t, n, a), dtype=bool),
        av_slots=np.tile(np.arange(n), (t, 1)),
        actions=rng.integers(0, a, size=(t, n)),
        log_probs=rng.standard_normal(t) * 0.1,
        rewards=rng.standard_normal(t),
        values=rng.standard_normal(t),
        next_values=rng.standard_normal(t),
        dones=dones,
        weights=np.ones(t),
    )


# ---------------------------------------------------------------- GAE

def test_gae_lambda_zero_is_one_step_delta():
    rng = np.random.default_rng(0)
    buf = make_buffer(rng)
    compute_gae(buf, gamma=0.9, lam=1e-12)
    deltas = buf.rewards + 0.9 * buf.next_values - buf.values
    assert np.allclose(buf.advantages, deltas, atol=1e-9)


def test_gae_undiscounted_telescopes():
    rng = np.random.default_rng(1)
    buf = make_buffer(rng)
    buf.next_values[:-1] = buf.values[1:]  # chained successor values
    buf.next_values[-1] = 0.0  # terminal bootstrap 0
    compute_gae(buf, gamma=1.0, lam=1.0)
    t = len(buf)
    for i in range(t):
        expected = buf.rewards[i:].sum() - buf.values[i]
        assert buf.advantages[i] == pytest.approx(expected, abs=1e-9)
    assert np.allclose(buf.returns, buf.advantages + buf.values)


def test_gae_matches_bruteforce_random_segments():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t = int(rng.integers(2, 12))
        dones = rng.random(t) < 0.25
        dones[-1] = True
        buf = make_buffer(rng, t=t, dones=dones)
        gamma = float(rng.uniform(0.8, 1.0))
        lam = float(rng.uniform(0.1, 1.0))
        compute_gae(buf, gamma, lam)
        oracle = gae_bruteforce(buf.rewards, buf.values, buf.next_values,
                                buf.dones, gamma, lam)
        assert np.max(np.abs(buf.advantages - oracle)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=10), st.integers(min_value=0, max_value=9999))
def test_gae_bruteforce_property(t, seed):
    rng = np.random.default_rng(seed)
    dones = rng.random(t) < 0.3
    dones[-1] = True
    buf = make_buffer(rng, t=t, dones=dones)
    compute_gae(buf, 0.97, 0.9)
    oracle = gae_bruteforce(buf.rewards, buf.values, buf.next_values, buf.dones,
                            0.97, 0.9)
    assert np.max(np.abs(buf.advantages - oracle)) <= 1e-12


# ---------------------------------------------------------------- surrogate

def test_surrogate_min_property():
    rng = np.random.default_rng(3)
    ratio = rng.uniform(0.3, 2.0, size=200)
    adv = rng.standard_normal(200)
    unclipped, clipped, surr = surrogate_terms(ratio, adv, 0.2)
    assert np.all(surr <= unclipped + 1e-15)
    assert np.all(surr <= clipped + 1e-15)
    assert np.all((surr == unclipped) | (surr == clipped))


def test_clipped_region_gradient_is_zero():
    """A sample pushed into the flat clipped region contributes no policy
    gradient."""
    rng = np.random.default_rng(4)
    buf = make_buffer(rng, t=1, dones=np.array([True]))
    cfg = dataclasses.replace(TINY, entropy_coef=0.0, value_coef=0.0,
                              adv_norm=False)
    store = build_params(cfg.policy_config(), seed=5, dtype=np.float64)
    params = store.bind(trainable=False)
    out = policy_forward(params, buf.batch(np.array([0])), cfg.policy_config())
    logp_now = out.joint_log_prob(buf.actions[[0]]).data[0]
    eps = cfg.clip_eps
    buf.log_probs[0] = logp_now - np.log(1.0 + 2.0 * eps)  # ratio = 1+2eps
    buf.advantages = np.array([1.5])
    buf.returns = buf.values.copy()  # silence the value term
    params = store.bind(trainable=True)
    total, diag = _losses(params, buf.batch(np.array([0])), buf.actions[[0]],
                          buf.log_probs[[0]], buf.advantages,
                          buf.returns, buf.weights, cfg)
    assert diag["ratio"][0] == pytest.approx(1.0 + 2.0 * eps, rel=1e-6)
    total.backward(np.ones_like(total.data))
    for name, t_ in params.items():
        if t_.grad is not None and name.startswith("pol"):
            assert np.max(np.abs(t_.grad)) == 0.0, name


# ---------------------------------------------------------------- update

def _small_world():
    network = build_map(TINY.map_name, TINY.map_params())
    env = BottleneckEnv(network, TINY.env_config())
    spec = generate_episode(network, TINY.generation_config(), 77)
    return network, env, spec


def test_first_epoch_identity():
    _, env, spec = _small_world()
    store = build_params(TINY.policy_config(), seed=6)
    rng = np.random.default_rng(7)
    buf = collect_episode(env, spec, store, TINY.policy_config(), rng)
    buf.weights = np.ones(len(buf))
    compute_gae(buf, TINY.gamma, TINY.lam)
    cfg = dataclasses.replace(TINY, rollout_length=len(buf),
                              episode_duration=float(len(buf)))
    metrics = ppo_update(store, buf, cfg)
    assert metrics["clip_fraction_pre"] == 0.0
    assert metrics["ratio_pre_max_dev"] < 1e-4


def test_zero_activated_steps_masked_out():
    """Appending zero-weight, zero-activated rows leaves gradients
    bit-identical."""
    rng = np.random.default_rng(8)
    buf = make_buffer(rng, t=6)
    compute_gae(buf, 0.99, 0.95)
    cfg = dataclasses.replace(TINY, adv_norm=False)

    pad = make_buffer(rng, t=3)
    pad.av_mask[:] = False
    pad.obs_mask[:] = False
    pad.action_mask[:] = False
    pad.weights[:] = 0.0
    padded = RolloutBuffer.concatenate([buf, pad])
    padded.advantages = np.concatenate([buf.advantages, np.zeros(3)])
    padded.returns = np.concatenate([buf.returns, np.zeros(3)])

    def grads_of(buffer):
        store = build_params(cfg.policy_config(), seed=9, dtype=np.float64)
        params = store.bind(trainable=True)
        idx = np.arange(len(buffer))
        total, _ = _losses(params, buffer.batch(idx), buffer.actions,
                           buffer.log_probs, buffer.advantages,
                           buffer.returns, buffer.weights, cfg)
        total.backward(np.ones_like(total.data))
        return {n: t.grad.copy() for n, t in params.items() if t.grad is not None}

    g1, g2 = grads_of(buf), grads_of(padded)
    assert set(g1) == set(g2)
    for name in g1:
        assert np.array_equal(g1[name], g2[name]), name


def test_entropy_bonus_never_decreases_objective():
    rng = np.random.default_rng(10)
    buf = make_buffer(rng, t=8)
    compute_gae(buf, 0.99, 0.95)
    store = build_params(TINY.policy_config(), seed=11)
    values = []
    for beta in (0.0, 0.01, 0.1, 1.0):
        cfg = dataclasses.replace(TINY, entropy_coef=beta, value_coef=0.0,
                                  adv_norm=False)
        params = store.bind(trainable=False)
        idx = np.arange(len(buf))
        total, diag = _losses(params, buf.batch(idx), buf.actions, buf.log_probs,
                              buf.advantages, buf.returns, buf.weights, cfg)
        assert diag["entropy"] >= 0.0
        values.append(-float(total.data))  # analytic objective value
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_lr_zero_keeps_parameters():
    rng = np.random.default_rng(12)
    buf = make_buffer(rng, t=6)
    compute_gae(buf, 0.99, 0.95)
    store = build_params(TINY.policy_config(), seed=13)
    before = {k: v.copy() for k, v in store.params.items()}
    ppo_update(store, buf, dataclasses.replace(TINY, minibatch_size=6), lr=0.0)
    for name, arr in store.params.items():
        assert np.array_equal(arr, before[name]), name


# ---------------------------------------------------------------- collection

def test_collect_deterministic():
    a = _collect_worker(TINY, build_params(TINY.policy_config(), seed=14), 0, 0)
    b = _collect_worker(TINY, build_params(TINY.policy_config(), seed=14), 0, 0)
    for name in ("features", "actions", "log_probs", "rewards", "values", "dones"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert len(a) == TINY.rollout_length


def test_zero_activated_steps_still_recorded():
    cfg = dataclasses.replace(TINY, penetration=0.0, rollout_length=60,
                              total_steps=60)
    buf = _collect_worker(cfg, build_params(cfg.policy_config(), seed=15), 0, 0)
    assert len(buf) == 60
    assert not buf.av_mask.any()
    assert np.all(buf.log_probs == 0.0)
    assert buf.rewards.shape == (60,)


def test_uniform_policy_matches_scripted_replay():
    """Rewards under a uniform policy equal an independent replay of the
    recorded action stream."""
    network, env, spec = _small_world()
    store = build_params(TINY.policy_config(), seed=16)
    store.params["pol.head.w"][:] = 0.0  # logits identically zero: uniform
    store.params["pol.head.b"][:] = 0.0
    recorded = []
    rng = np.random.default_rng(17)
    buf = collect_episode(env, spec, store, TINY.policy_config(), rng,
                          record_actions=recorded)
    env2 = BottleneckEnv(network, TINY.env_config())
    env2.reset(spec)
    rewards = []
    for actions in recorded:
        _, r, done, _ = env2.step(actions)
        rewards.append(r)
    assert np.allclose(buf.rewards, np.array(rewards), atol=1e-12)
    assert done


def test_episode_seed_stable():
    assert episode_seed(3, 5) == episode_seed(3, 5)
    assert episode_seed(3, 5) != episode_seed(3, 6)


# ---------------------------------------------------------------- train loop

def test_train_resume_bitwise(tmp_path):
    """Restarting the same run from its mid-run checkpoint reproduces the
    exact parameter trajectory."""
    cfg = dataclasses.replace(TINY, total_steps=480, checkpoint_every=2)
    full = train(cfg, tmp_path / "full")
    store_full, extra_full = load_checkpoint(full)
    assert extra_full["update_idx"] == 4

    resumed = train(cfg, tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "checkpoint_00002.mfck")
    store_res, extra_res = load_checkpoint(resumed)
    assert extra_res["update_idx"] == 4
    for name in store_full.params:
        assert np.array_equal(store_full.params[name], store_res.params[name]), name
        assert np.array_equal(store_full.m[name], store_res.m[name]), name


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    train(TINY, out)
    assert (out / "config.json").exists()
    assert (out / "manifest.json").exists()
    assert (out / "policy_card.json").exists()
    card = json.loads((out / "policy_card.json").read_text())
    assert card["name"] == "DVC-25-60"
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 4
    assert all(rec["clip_fraction_pre"] == 0.0 for rec in log)
    cfg2 = TrainConfig.from_json((out / "config.json").read_text())
    assert cfg2 == TINY
