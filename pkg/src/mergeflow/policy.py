"""Masked-attention actor and critic over fixed-capacity slot encodings.

The policy embeds every vehicle feature row into a token, gathers the
activated-AV tokens as queries, and runs two pre-norm blocks of masked
cross-attention plus feed-forward. In the decentralized variant (DVC) each
query attends only through its own observation mask and keys/values stay the
original embedded tokens, so controlled vehicles share no information. The
centralized variant (CVC) attends over the full existence mask and writes
updated query tokens back into the key/value set after each layer. The
critic embeds with the same input embedding, self-attends over existing
vehicles, sum-pools, and projects to a scalar state value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import D_A, D_V, ObservationEncoding, StateEncoding
from .nn import ParameterStore, Tensor, ops

VARIANTS = ("DVC", "CVC")
N_LAYERS = 2  # two identical attention layers in both networks


@dataclass(frozen=True)
class PolicyConfig:
    variant: str = "DVC"
    embed_width: int = 64
    ffn_width: int = 128
    n_actions: int = D_A

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.n_actions != D_A:
            raise ValueError("action width is fixed by the action space")


@dataclass
class EncodingBatch:
    """Stacked encodings; all masks are plain numpy bool arrays."""

    features: np.ndarray  # (B, C, D_V)
    state_mask: np.ndarray  # (B, C)
    av_mask: np.ndarray  # (B, N)
    obs_mask: np.ndarray  # (B, N, C)
    action_mask: np.ndarray  # (B, N, D_A)
    av_slots: np.ndarray  # (B, N) int64, -1 when inactive

    @property
    def size(self) -> int:
        return self.features.shape[0]


def stack_encodings(pairs: list[tuple[StateEncoding, ObservationEncoding]],
                    dtype=np.float32) -> EncodingBatch:
    return EncodingBatch(
        features=np.stack([s.features for s, _ in pairs]).astype(dtype),
        state_mask=np.stack([s.mask for s, _ in pairs]),
        av_mask=np.stack([o.av_mask for _, o in pairs]),
        obs_mask=np.stack([o.obs_mask for _, o in pairs]),
        action_mask=np.stack([o.action_mask for _, o in pairs]),
        av_slots=np.stack([o.av_slots for _, o in pairs]),
    )


def build_params(config: PolicyConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    d, h = config.embed_width, config.ffn_width
    store = ParameterStore(seed=seed, dtype=dtype)
    store.add("embed.w", (D_V, d))
    store.add("embed.b", (d,), init="zeros")
    for net in ("pol", "cri"):
        for layer in range(N_LAYERS):
            p = f"{net}.{layer}"
            store.add(f"{p}.att.ln.g", (d,), init="ones")
            store.add(f"{p}.att.ln.b", (d,), init="zeros")
            for proj in ("wq", "wk", "wv", "wo"):
                store.add(f"{p}.att.{proj}", (d, d))
            store.add(f"{p}.ffn.ln.g", (d,), init="ones")
            store.add(f"{p}.ffn.ln.b", (d,), init="zeros")
            store.add(f"{p}.ffn.w1", (d, h))
            store.add(f"{p}.ffn.b1", (h,), init="zeros")
            store.add(f"{p}.ffn.w2", (h, d))
            store.add(f"{p}.ffn.b2", (d,), init="zeros")
    store.add("pol.head.w", (d, config.n_actions), scale=0.01)
    store.add("pol.head.b", (config.n_actions,), init="zeros")
    store.add("cri.head.w", (d, 1), scale=0.01)
    store.add("cri.head.b", (1,), init="zeros")
    return store


def _ffn_block(params, prefix: str, x: Tensor) -> Tensor:
    normed = ops.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    hidden = ops.relu(ops.affine(normed, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ops.residual_add(x, ops.affine(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def _attention_block(params, prefix: str, queries: Tensor, kv: Tensor,
                     mask: np.ndarray) -> Tensor:
    normed = ops.layer_norm(queries, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    q = ops.matmul(normed, params[f"{prefix}.wq"])
    k = ops.matmul(kv, params[f"{prefix}.wk"])
    v = ops.matmul(kv, params[f"{prefix}.wv"])
    att = ops.matmul(ops.masked_attention(q, k, v, mask), params[f"{prefix}.wo"])
    return ops.residual_add(queries, att)


def _embed(params, batch: EncodingBatch) -> Tensor:
    feats = Tensor(batch.features.astype(params["embed.w"].dtype, copy=False))
    return ops.affine(feats, params["embed.w"], params["embed.b"])


@dataclass
class PolicyOutput:
    logits: Tensor  # (B, N, A)
    probs: Tensor  # (B, N, A); inactive rows all-zero
    av_mask: np.ndarray  # (B, N)

    def joint_log_prob(self, actions: np.ndarray) -> Tensor:
        """Sum of per-AV log-probabilities over activated slots; (B,)."""
        active = self.av_mask.astype(self.probs.data.dtype)
        picked = ops.gather_last(self.probs, actions)
        safe = ops.add(ops.mul_const(picked, active), Tensor(1.0 - active))
        return ops.reduce_sum(ops.mul_const(ops.log(safe), active), axis=-1)

    def joint_entropy(self) -> Tensor:
        """Sum of per-AV distribution entropies over activated slots; (B,)."""
        ent = ops.entropy_rows(self.probs)
        return ops.reduce_sum(
            ops.mul_const(ent, self.av_mask.astype(ent.data.dtype)), axis=-1)


def policy_forward(params: dict[str, Tensor], batch: EncodingBatch,
                   config: PolicyConfig) -> PolicyOutput:
    tokens = _embed(params, batch)  # (B, C, d)
    safe_slots = np.maximum(batch.av_slots, 0)
    queries = ops.gather_rows(tokens, safe_slots)  # (B, N, d)
    if config.variant == "DVC":
        att_mask = batch.obs_mask
    else:
        att_mask = batch.state_mask[:, None, :] & batch.av_mask[:, :, None]
    kv = tokens
    for layer in range(N_LAYERS):
        queries = _attention_block(params, f"pol.{layer}.att", queries, kv, att_mask)
        queries = _ffn_block(params, f"pol.{layer}.ffn", queries)
        if config.variant == "CVC":
            # activated-AV tokens are updated along with the query stream
            kv = ops.scatter_rows(kv, safe_slots, queries, batch.av_mask)
    logits = ops.affine(queries, params["pol.head.w"], params["pol.head.b"])
    probs = ops.masked_softmax(logits, batch.action_mask)
    return PolicyOutput(logits=logits, probs=probs, av_mask=batch.av_mask)


def critic_forward(params: dict[str, Tensor], batch: EncodingBatch,
                   config: PolicyConfig) -> Tensor:
    """State value; (B,). Existing vehicles attend to each other only."""
    tokens = _embed(params, batch)
    mask = batch.state_mask[:, :, None] & batch.state_mask[:, None, :]
    for layer in range(N_LAYERS):
        tokens = _attention_block(params, f"cri.{layer}.att", tokens, tokens, mask)
        tokens = _ffn_block(params, f"cri.{layer}.ffn", tokens)
    pooled = ops.sum_pool(tokens, batch.state_mask)  # (B, d)
    value = ops.affine(pooled, params["cri.head.w"], params["cri.head.b"])
    return ops.reduce_sum(value, axis=-1)  # squeeze


def act(store: ParameterStore, state: StateEncoding, obs: ObservationEncoding,
        config: PolicyConfig, rng: np.random.Generator | None = None,
        mode: str = "sample"):
    """One vectorized inference for every activated AV.

    Returns (actions (N,), joint_log_prob, value, probs (N, A))."""
    if mode not in ("sample", "greedy"):
        raise ValueError("mode must be 'sample' or 'greedy'")
    batch = stack_encodings([(state, obs)], dtype=store.dtype)
    params = store.bind(trainable=False)
    out = policy_forward(params, batch, config)
    value = float(critic_forward(params, batch, config).data[0])
    probs = out.probs.data[0]
    n = obs.av_mask.shape[0]
    actions = np.zeros(n, dtype=np.int64)
    joint_logp = 0.0
    for i in range(n):
        if not obs.av_mask[i]:
            continue
        if mode == "greedy":
            actions[i] = int(np.argmax(probs[i]))
        else:
            actions[i] = ops.categorical_sample(probs[i], rng)
        joint_logp += ops.categorical_log_prob(probs[i], actions[i])
    return actions, joint_logp, value, probs
