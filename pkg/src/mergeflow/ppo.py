"""On-policy training: synchronous rollout collection, generalized advantage
estimation, and the clipped surrogate update with an entropy bonus computed
over activated AVs only.

Rollouts are whole episodes (the rollout length is a multiple of the episode
decision horizon), so collection workers are stateless between updates:
every episode seed, action-sampling stream, and minibatch shuffle derives
from (run seed, update index, worker index). Resuming from a checkpoint
therefore reproduces the exact parameter trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoding import RewardParams
from .env import BottleneckEnv, EnvConfig
from .episodes import GenerationConfig, generate_episode
from .nn import (ParameterStore, TrainingNumericsError, adam_update, clip_grads,
                 load_checkpoint, save_checkpoint)
from .policy import (EncodingBatch, PolicyConfig, build_params, critic_forward,
                     policy_forward, act)
from .roadnet import MapParams, build_map, scaled_params


@dataclass(frozen=True)
class TrainConfig:
    map_name: str = "lanedrop"
    variant: str = "DVC"
    demand_level: float = 2500.0
    demand_range: tuple[float, float] = (0.6, 1.4)
    penetration: float = 0.2
    sensing_range: float = 100.0
    max_activated: int = 8
    capacity: int | None = None
    activation_lane_cap: int | None = None
    map_scale: float = 1.0
    episode_duration: float = 600.0
    profile_set: str = "normal"
    eta_a: float = 1.0
    eta_b: float = -0.05
    # optimization
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatch_size: int = 128
    rollout_length: int = 1200  # decision steps per worker per update
    workers: int = 1
    total_steps: int = 120_000
    lr: float = 3e-4
    lr_decay: bool = True
    grad_clip: float = 0.5
    adv_norm: bool = True
    seed: int = 0
    embed_width: int = 64
    ffn_width: int = 128
    episode_pool: int = 512
    checkpoint_every: int = 10  # updates
    eval_every: int = 10
    eval_episodes: int = 4
    eval_demand_level: float | None = None

    def __post_init__(self):
        if not (0 < self.gamma <= 1) or not (0 < self.lam <= 1):
            raise ValueError("gamma and lam must be in (0, 1]")
        if self.clip_eps <= 0 or self.entropy_coef < 0:
            raise ValueError("bad clip_eps or entropy_coef")
        if self.rollout_length % self.steps_per_episode != 0:
            raise ValueError("rollout_length must be a multiple of the episode horizon")

    @property
    def steps_per_episode(self) -> int:
        return int(round(self.episode_duration))  # decision interval is 1 s

    @property
    def episodes_per_rollout(self) -> int:
        return self.rollout_length // self.steps_per_episode

    def map_params(self) -> MapParams:
        return scaled_params(self.map_scale) if self.map_scale != 1.0 else MapParams()

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            sensing_range=self.sensing_range,
            max_activated=self.max_activated,
            capacity=self.capacity,
            activation_lane_cap=self.activation_lane_cap,
            reward=RewardParams(eta_a=self.eta_a, eta_b=self.eta_b),
        )

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(variant=self.variant, embed_width=self.embed_width,
                            ffn_width=self.ffn_width)

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            demand_level=self.demand_level,
            demand_range=self.demand_range,
            penetration=self.penetration,
            profile_set=self.profile_set,
            duration=self.episode_duration,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        doc = json.loads(text)
        for key in ("demand_range",):
            if key in doc and doc[key] is not None:
                doc[key] = tuple(doc[key])
        return TrainConfig(**doc)


def episode_seed(run_seed: int, pool_index: int) -> int:
    """Deterministic seed of the pool_index-th training episode."""
    ss = np.random.SeedSequence((run_seed, 0xEB15, pool_index))
    return int(ss.generate_state(1, np.uint64)[0] % (2 ** 62))


@dataclass
class RolloutBuffer:
    features: np.ndarray  # (T, C, D_V)
    state_mask: np.ndarray  # (T, C)
    av_mask: np.ndarray  # (T, N)
    obs_mask: np.ndarray  # (T, N, C)
    action_mask: np.ndarray  # (T, N, A)
    av_slots: np.ndarray  # (T, N)
    actions: np.ndarray  # (T, N)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    next_values: np.ndarray  # (T,) bootstrap of the successor state
    dones: np.ndarray  # (T,) episode truncation flags
    weights: np.ndarray  # (T,) 1 for real samples, 0 for padding
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def batch(self, idx) -> EncodingBatch:
        return EncodingBatch(
            features=self.features[idx],
            state_mask=self.state_mask[idx],
            av_mask=self.av_mask[idx],
            obs_mask=self.obs_mask[idx],
            action_mask=self.action_mask[idx],
            av_slots=self.av_slots[idx],
        )

    @staticmethod
    def concatenate(parts: list["RolloutBuffer"]) -> "RolloutBuffer":
        fields = {}
        for name in ("features", "state_mask", "av_mask", "obs_mask", "action_mask",
                     "av_slots", "actions", "log_probs", "rewards", "values",
                     "next_values", "dones", "weights"):
            fields[name] = np.concatenate([getattr(p, name) for p in parts])
        return RolloutBuffer(**fields)


def collect_episode(env: BottleneckEnv, spec, store: ParameterStore,
                    policy_config: PolicyConfig, rng: np.random.Generator,
                    record_actions: list | None = None) -> RolloutBuffer:
    """Roll one full episode with the sampling policy; truncation bootstraps
    the final state's value."""
    state, obs = env.reset(spec)
    rows = []
    done = False
    while not done:
        actions, logp, value, _ = act(store, state, obs, policy_config, rng, "sample")
        if record_actions is not None:
            record_actions.append(actions.copy())
        (nstate, nobs), reward, done, _ = env.step(actions)
        rows.append((state, obs, actions, logp, reward, value))
        state, obs = nstate, nobs
    # bootstrap value of the truncated successor state
    _, _, v_last, _ = act(store, state, obs, policy_config,
                          np.random.default_rng(0), "greedy")
    t = len(rows)
    c = rows[0][0].capacity
    n = rows[0][1].max_activated
    buf = RolloutBuffer(
        features=np.stack([r[0].features for r in rows]).astype(np.float32),
        state_mask=np.stack([r[0].mask for r in rows]),
        av_mask=np.stack([r[1].av_mask for r in rows]),
        obs_mask=np.stack([r[1].obs_mask for r in rows]),
        action_mask=np.stack([r[1].action_mask for r in rows]),
        av_slots=np.stack([r[1].av_slots for r in rows]),
        actions=np.stack([r[2] for r in rows]),
        log_probs=np.asarray([r[3] for r in rows], dtype=np.float64),
        rewards=np.asarray([r[4] for r in rows], dtype=np.float64),
        values=np.asarray([r[5] for r in rows], dtype=np.float64),
        next_values=np.zeros(t, dtype=np.float64),
        dones=np.zeros(t, dtype=bool),
        weights=np.ones(t, dtype=np.float64),
    )
    buf.next_values[:-1] = buf.values[1:]
    buf.next_values[-1] = v_last
    buf.dones[-1] = True
    return buf


def _collect_task(payload: bytes) -> bytes:
    config, store, update_idx, worker_id = pickle.loads(payload)
    buf = _collect_worker(config, store, update_idx, worker_id)
    return pickle.dumps(buf, protocol=pickle.HIGHEST_PROTOCOL)


def _collect_worker(config: TrainConfig, store: ParameterStore,
                    update_idx: int, worker_id: int) -> RolloutBuffer:
    network = build_map(config.map_name, config.map_params())
    env = BottleneckEnv(network, config.env_config())
    gen = config.generation_config()
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((config.seed, 0xAC7, update_idx, worker_id))))
    parts = []
    per = config.episodes_per_rollout
    for e in range(per):
        counter = (update_idx * config.workers + worker_id) * per + e
        spec = generate_episode(network, gen,
                                episode_seed(config.seed, counter % config.episode_pool))
        parts.append(collect_episode(env, spec, store, config.policy_config(), rng))
    return RolloutBuffer.concatenate(parts)


def collect_rollouts(store: ParameterStore, config: TrainConfig, update_idx: int,
                     pool: ProcessPoolExecutor | None = None) -> RolloutBuffer:
    """Synchronous data-parallel collection; buffers concatenate in worker
    order so results do not depend on scheduling."""
    if config.workers <= 1 or pool is None:
        parts = [_collect_worker(config, store, update_idx, w)
                 for w in range(max(config.workers, 1))]
    else:
        payloads = [pickle.dumps((config, store, update_idx, w),
                                 protocol=pickle.HIGHEST_PROTOCOL)
                    for w in range(config.workers)]
        parts = [pickle.loads(res) for res in pool.map(_collect_task, payloads)]
    return RolloutBuffer.concatenate(parts)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """A_t = sum_l (gamma*lam)^l delta_{t+l} within each episode segment,
    bootstrapping the stored successor value at truncation."""
    t = len(buffer)
    deltas = buffer.rewards + gamma * buffer.next_values - buffer.values
    adv = np.zeros(t, dtype=np.float64)
    running = 0.0
    for i in range(t - 1, -1, -1):
        if buffer.dones[i]:
            running = 0.0
        running = deltas[i] + gamma * lam * running
        adv[i] = running
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer


def surrogate_terms(ratio: np.ndarray, adv: np.ndarray, clip_eps: float):
    """(unclipped, clipped, surrogate) per-sample terms of the objective."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return unclipped, clipped, np.minimum(unclipped, clipped)


def _losses(params, batch: EncodingBatch, actions, old_logp, adv, returns,
            weights, config: TrainConfig):
    from .nn import ops

    keep = weights > 0
    if not keep.all():
        # zero-weight padding never enters the graph: gradients are
        # bit-identical with or without it
        idx = np.flatnonzero(keep)
        batch = EncodingBatch(
            features=batch.features[idx], state_mask=batch.state_mask[idx],
            av_mask=batch.av_mask[idx], obs_mask=batch.obs_mask[idx],
            action_mask=batch.action_mask[idx], av_slots=batch.av_slots[idx])
        actions = actions[idx]
        old_logp = old_logp[idx]
        adv = adv[idx]
        returns = returns[idx]
        weights = weights[idx]
    out = policy_forward(params, batch, config.policy_config())
    values = critic_forward(params, batch, config.policy_config())
    logp = out.joint_log_prob(actions)
    ratio = ops.exp(ops.sub(logp, ops.Tensor(old_logp.astype(logp.data.dtype))))
    adv_t = adv.astype(ratio.data.dtype)
    unclipped = ops.mul_const(ratio, adv_t)
    clipped = ops.mul_const(ops.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps),
                            adv_t)
    surrogate = ops.minimum(unclipped, clipped)
    active = batch.av_mask.any(axis=1) & (weights > 0)
    pol_w = (active.astype(np.float64) * weights)
    pol_denom = max(pol_w.sum(), 1.0)
    policy_loss = ops.scale(ops.reduce_sum(ops.mul_const(surrogate, pol_w)), -1.0 / pol_denom)
    entropy = ops.scale(ops.reduce_sum(ops.mul_const(out.joint_entropy(), pol_w)),
                        1.0 / pol_denom)
    val_w = weights
    val_denom = max(val_w.sum(), 1.0)
    err = ops.sub(values, ops.Tensor(returns.astype(values.data.dtype)))
    value_loss = ops.scale(ops.reduce_sum(ops.mul_const(ops.square(err), val_w)),
                           1.0 / val_denom)
    total = ops.add(
        ops.add(policy_loss, ops.scale(entropy, -config.entropy_coef)),
        ops.scale(value_loss, config.value_coef),
    )
    diag = {
        "ratio": ratio.data.copy(),
        "logp": logp.data.copy(),
        "policy_loss": float(policy_loss.data),
        "entropy": float(entropy.data),
        "value_loss": float(value_loss.data),
    }
    return total, diag


def ppo_update(store: ParameterStore, buffer: RolloutBuffer, config: TrainConfig,
               lr: float | None = None) -> dict:
    """Optimize the clipped surrogate with entropy bonus over shuffled
    minibatches; returns pre-update identity diagnostics and loss metrics."""
    if buffer.advantages is None:
        raise ValueError("advantages must be computed before updating")
    if lr is None:
        lr = config.lr
    t = len(buffer)
    adv = buffer.advantages.copy()
    if config.adv_norm:
        w = buffer.weights > 0
        mean = adv[w].mean()
        std = adv[w].std()
        adv = (adv - mean) / (std + 1e-8)
    update_counter = store.step  # adam steps so far, used only for shuffling salt
    shuffle_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((config.seed, 0x5F0F, update_counter))))

    # pre-update identity diagnostics at theta == theta_old
    pre_ratio = np.zeros(t)
    clip_hits = 0
    n_mb = 0
    params = store.bind(trainable=False)
    for start in range(0, t, config.minibatch_size):
        idx = np.arange(start, min(start + config.minibatch_size, t))
        out = policy_forward(params, buffer.batch(idx), config.policy_config())
        logp = out.joint_log_prob(buffer.actions[idx]).data
        pre_ratio[idx] = np.exp(logp - buffer.log_probs[idx])
    real = buffer.weights > 0
    clip_fraction_pre = float(np.mean(
        np.abs(pre_ratio[real] - 1.0) > config.clip_eps)) if real.any() else 0.0

    metrics = {
        "clip_fraction_pre": clip_fraction_pre,
        "ratio_pre_max_dev": float(np.abs(pre_ratio[real] - 1.0).max()) if real.any() else 0.0,
    }
    losses = []
    kls = []
    clip_fracs = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(t)
        for start in range(0, t, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            params = store.bind(trainable=True)
            total, diag = _losses(
                params, buffer.batch(idx), buffer.actions[idx],
                buffer.log_probs[idx], adv[idx],
                buffer.returns[idx], buffer.weights[idx], config)
            if not np.isfinite(total.data):
                raise TrainingNumericsError(
                    f"non-finite loss in minibatch starting at {start}")
            total.backward(np.ones_like(total.data))
            grads = {name: tns.grad for name, tns in params.items()
                     if tns.grad is not None}
            grads = clip_grads(grads, config.grad_clip)
            adam_update(store, grads, lr)
            losses.append((diag["policy_loss"], diag["value_loss"], diag["entropy"]))
            wsel = buffer.weights[idx] > 0
            if wsel.any():  # diag arrays cover only non-padded rows
                kls.append(float(np.mean(buffer.log_probs[idx][wsel] - diag["logp"])))
                clip_fracs.append(float(np.mean(
                    np.abs(diag["ratio"] - 1.0) > config.clip_eps)))
            n_mb += 1
    pol, val, ent = (float(np.mean([l[i] for l in losses])) for i in range(3))
    metrics.update({
        "policy_loss": pol, "value_loss": val, "entropy": ent,
        "approx_kl": float(np.mean(kls)) if kls else 0.0,
        "clip_fraction": float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        "minibatches": n_mb,
    })
    return metrics


def greedy_eval(store: ParameterStore, config: TrainConfig, n_episodes: int) -> dict:
    """Deterministic evaluation on a fixed pool of held-out episodes."""
    network = build_map(config.map_name, config.map_params())
    env = BottleneckEnv(network, config.env_config())
    gen = config.generation_config()
    if config.eval_demand_level is not None:
        gen = dataclasses.replace(gen, demand_level=config.eval_demand_level)
    total_reward = 0.0
    released = spawned = 0
    for i in range(n_episodes):
        seed = int(np.random.SeedSequence((config.seed, 0xE7A1, i))
                   .generate_state(1, np.uint64)[0] % 2 ** 62)
        spec = generate_episode(network, gen, seed)
        state, obs = env.reset(spec)
        done = False
        while not done:
            actions, _, _, _ = act(store, state, obs, config.policy_config(),
                                   None, "greedy")
            (state, obs), reward, done, _ = env.step(actions)
            total_reward += reward
        env.sim.run(drain=True)
        released += env.sim.released_total
        spawned += env.sim.spawned_total
    throughput = 100.0 * released / spawned if spawned else float("nan")
    return {"mean_reward": total_reward / n_episodes, "throughput": throughput}


def train(config: TrainConfig, out_dir, resume_from=None,
          progress: bool = False) -> str:
    """Alternate collection and updates; returns the final checkpoint path.

    Writes config.json, manifest.json, train_log.jsonl, and numbered
    checkpoints into out_dir."""
    from .runio import run_manifest, write_json

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(config.to_json())
    write_json(os.path.join(out_dir, "manifest.json"),
               run_manifest("train", json.loads(config.to_json()), [config.seed]))

    if resume_from is not None:
        store, extra = load_checkpoint(resume_from)
        update_idx = int(extra["update_idx"])
    else:
        store = build_params(config.policy_config(), seed=config.seed)
        update_idx = 0

    steps_per_update = config.rollout_length * max(config.workers, 1)
    total_updates = max(1, config.total_steps // steps_per_update)
    pool = None
    if config.workers > 1:
        pool = ProcessPoolExecutor(max_workers=config.workers)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    ckpt_path = os.path.join(out_dir, "checkpoint_final.mfck")
    card = {
        "name": f"{config.variant}-{int(round(config.penetration * 100))}"
                f"-{int(round(config.sensing_range))}",
        "variant": config.variant,
        "penetration": config.penetration,
        "sensing_range": config.sensing_range,
        "map": config.map_name,
    }
    write_json(os.path.join(out_dir, "policy_card.json"), card)
    try:
        with open(log_path, "a") as log:
            while update_idx < total_updates:
                frac = (update_idx * steps_per_update) / max(config.total_steps, 1)
                lr = config.lr * max(0.05, 1.0 - frac) if config.lr_decay else config.lr
                buffer = collect_rollouts(store, config, update_idx, pool)
                compute_gae(buffer, config.gamma, config.lam)
                metrics = ppo_update(store, buffer, config, lr=lr)
                update_idx += 1
                record = {
                    "update": update_idx,
                    "step": update_idx * steps_per_update,
                    "lr": lr,
                    "mean_reward": float(buffer.rewards.mean()),
                    **{k: metrics[k] for k in
                       ("policy_loss", "value_loss", "entropy", "approx_kl",
                        "clip_fraction", "clip_fraction_pre")},
                }
                if config.eval_every and update_idx % config.eval_every == 0:
                    record.update(greedy_eval(store, config, config.eval_episodes))
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
                if progress:
                    print(json.dumps(record, sort_keys=True), flush=True)
                extra = {"update_idx": update_idx, "policy_card": card,
                         "train_config": json.loads(config.to_json())}
                if config.checkpoint_every and update_idx % config.checkpoint_every == 0:
                    save_checkpoint(
                        os.path.join(out_dir, f"checkpoint_{update_idx:05d}.mfck"),
                        store, extra)
                save_checkpoint(ckpt_path, store, extra)
    finally:
        if pool is not None:
            pool.shutdown()
    return ckpt_path
