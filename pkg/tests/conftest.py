import numpy as np
import pytest

from mergeflow.encoding import D_A, D_V, ObservationEncoding, StateEncoding
from mergeflow.roadnet import build_map


@pytest.fixture(scope="session")
def networks():
    return {name: build_map(name) for name in
            ("onramp", "threeway", "fourway", "lanedrop")}


def fd_gradient(fn, tensors, h=1e-6, loss_weights=None):
    """Central finite differences of sum(fn()) w.r.t. each tensor's entries.

    Returns the worst relative error against the tape gradients. `fn` must
    rebuild the graph from the tensors' current data on every call."""
    for t in tensors:
        t.grad = None
    out = fn()
    seed = np.ones_like(out.data) if loss_weights is None else loss_weights
    out.backward(seed)

    def scalar():
        val = fn().data
        return float((val * seed).sum()) if loss_weights is not None else float(val.sum())

    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, rel)
    return worst


def random_encodings(rng, capacity=8, max_activated=3, n_vehicles=None,
                     n_activated=None, sensing_all=False):
    """Synthetic encodings satisfying the documented mask invariants."""
    c, n = capacity, max_activated
    if n_vehicles is None:
        n_vehicles = int(rng.integers(0, c + 1))
    occupied = rng.permutation(c)[:n_vehicles]
    mask = np.zeros(c, dtype=bool)
    mask[occupied] = True
    features = np.zeros((c, D_V))
    heading = rng.uniform(0, 2 * np.pi, size=c)
    features[:, 0] = rng.random(c)
    features[:, 1] = rng.random(c)
    features[:, 2] = np.sin(heading)
    features[:, 3] = np.cos(heading)
    features[:, 4] = rng.random(c)
    features[:, 5] = rng.integers(-1, 2, size=c)
    features[:, 6] = rng.integers(-1, 2, size=c)
    features[:, 7] = np.where(features[:, 6] < 0, -1.0, rng.random(c))
    features[~mask] = 0.0
    slot_vehicle = np.where(mask, np.arange(c), -1).astype(np.int64)

    av_candidates = [s for s in occupied if features[s, 6] >= 0]
    if n_activated is None:
        n_activated = int(rng.integers(0, min(n, len(av_candidates)) + 1))
    chosen = av_candidates[:n_activated]
    av_mask = np.zeros(n, dtype=bool)
    obs_mask = np.zeros((n, c), dtype=bool)
    action_mask = np.zeros((n, D_A), dtype=bool)
    av_slots = np.full(n, -1, dtype=np.int64)
    for i, slot in enumerate(chosen):
        features[slot, 6] = 1.0
        av_mask[i] = True
        av_slots[i] = slot
        row = mask & (rng.random(c) < 0.6) if not sensing_all else mask.copy()
        row[slot] = True
        obs_mask[i] = row
        action_mask[i, 2:] = True
        action_mask[i, 0] = rng.random() < 0.8
        action_mask[i, 1] = rng.random() < 0.8
    return (StateEncoding(mask, features, slot_vehicle),
            ObservationEncoding(av_mask, obs_mask, action_mask, av_slots))
