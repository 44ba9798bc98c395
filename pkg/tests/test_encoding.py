import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeflow.encoding import (CapacityExceeded, RewardParams, StateEncoder,
                                compute_reward, encodings_from_bytes,
                                encodings_to_bytes, select_activated)
from mergeflow.engine import Simulation
from mergeflow.env import BottleneckEnv, EnvConfig
from mergeflow.episodes import GenerationConfig, empty_episode, generate_episode


# ---------------------------------------------------------------- reward

def test_reward_no_releases_is_bias():
    assert compute_reward([], RewardParams(eta_a=1.0, eta_b=-0.05)) == -0.05


def test_reward_normalizer_identity():
    assert compute_reward([300.0], RewardParams(eta_a=1.0, eta_b=0.0)) == pytest.approx(1.0)


def test_reward_hand_arithmetic():
    # 0.5 * (150/300 + 450/300) - 0.1 = 0.5 * 2.0 - 0.1 = 0.9
    r = compute_reward([150.0, 450.0], RewardParams(eta_a=0.5, eta_b=-0.1))
    assert r == pytest.approx(0.9, abs=1e-12)


def test_reward_rejects_negative_travel_time():
    with pytest.raises(ValueError):
        compute_reward([-1.0], RewardParams())


# ---------------------------------------------------------------- state rows

def test_hv_row_uses_sentinel(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net))
    sim.inject_vehicle("fw_up|fw_merge|fw_down", lane_id=0, pos=50.0, speed=12.5)
    enc = StateEncoder(net)
    state, _ = enc.encode(sim)
    row = state.features[state.mask][0]
    assert row[7] == -1.0  # HV time sentinel
    assert row[6] == -1.0  # HV category
    assert row[4] == pytest.approx(12.5 / net.lane(0).speed_limit)
    assert row[2] ** 2 + row[3] ** 2 == pytest.approx(1.0, abs=1e-9)


def test_activated_av_travel_time_normalized(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net, duration=600.0))
    # inside the bottleneck zone so the AV activates
    veh = sim.inject_vehicle("fw_up|fw_merge|fw_down",
                             lane_id=net.edges["fw_merge"][0], pos=50.0,
                             speed=20.0, is_av=True)
    veh.entry_time = 0.0
    sim.clock.now = 300.0
    enc = StateEncoder(net)
    state, obs = enc.encode(sim)
    slot = enc._slot_of[veh.vid]
    assert state.features[slot, 6] == 1.0
    assert state.features[slot, 7] == pytest.approx(1.0)
    assert obs.av_mask.sum() == 1


def test_inactive_av_keeps_travel_time(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net, duration=600.0))
    veh = sim.inject_vehicle("fw_up|fw_merge|fw_down", lane_id=0, pos=20.0,
                             speed=20.0, is_av=True)  # far upstream of the zone
    veh.entry_time = 0.0
    sim.clock.now = 150.0
    enc = StateEncoder(net)
    state, obs = enc.encode(sim)
    slot = enc._slot_of[veh.vid]
    assert state.features[slot, 6] == 0.0
    assert state.features[slot, 7] == pytest.approx(0.5)
    assert obs.av_mask.sum() == 0


def test_empty_map_encoding(networks):
    net = networks["lanedrop"]
    sim = Simulation(net, empty_episode(net))
    state, obs = StateEncoder(net).encode(sim)
    assert not state.mask.any()
    assert np.all(state.features == 0.0)
    assert not obs.av_mask.any() and not obs.obs_mask.any()


def test_capacity_exceeded_raises(networks):
    net = networks["lanedrop"]
    sim = Simulation(net, empty_episode(net))
    for k in range(4):
        sim.inject_vehicle("e1|e2|e3", lane_id=0, pos=10.0 + 10 * k)
    enc = StateEncoder(net, capacity=3)
    with pytest.raises(CapacityExceeded):
        enc.encode(sim)


# ---------------------------------------------------------------- activation

def test_no_av_in_zone_empty_set(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net))
    sim.inject_vehicle("fw_up|fw_merge|fw_down", lane_id=0, pos=10.0)
    assert select_activated(sim, net, 8) == []


def test_activation_truncates_to_nearest(networks):
    net = networks["lanedrop"]
    sim = Simulation(net, empty_episode(net))
    n = 4
    lane = net.edges["e2"][0]
    vehicles = [sim.inject_vehicle("e1|e2|e3", lane_id=lane, pos=10.0 + 15.0 * k,
                                   speed=5.0, is_av=True) for k in range(n + 3)]
    px, py = net.bottleneck_point
    dists = {}
    for veh in vehicles:
        x, y, _ = net.lane(veh.lane).pose_at(veh.pos)
        dists[veh.vid] = math.hypot(x - px, y - py)
    expected = sorted(dists, key=lambda vid: (dists[vid], vid))[:n]
    chosen = [v.vid for v in select_activated(sim, net, n)]
    assert chosen == expected


def test_av_leaving_zone_deactivates(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net, duration=600.0))
    veh = sim.inject_vehicle("fw_up|fw_merge|fw_down",
                             lane_id=net.edges["fw_merge"][0], pos=100.0,
                             speed=20.0, is_av=True)
    enc = StateEncoder(net)
    _, obs = enc.encode(sim)
    assert obs.av_mask.sum() == 1
    veh.cmd_speed = 5.0
    # drive it out of the zone
    for _ in range(60):
        sim.substep()
        if veh.vid not in sim.vehicles:
            break
    _, obs2 = enc.encode(sim)
    if veh.vid in sim.vehicles:
        x, _, _ = net.lane(veh.lane).pose_at(veh.pos)
        assert x > net.bottleneck_zone[2]
    assert obs2.av_mask.sum() == 0
    assert veh.vid not in enc._av_slot_of


# ---------------------------------------------------------------- observation

def test_isolated_av_sees_only_itself(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net))
    veh = sim.inject_vehicle("fw_up|fw_merge|fw_down",
                             lane_id=net.edges["fw_merge"][0], pos=100.0,
                             speed=20.0, is_av=True)
    sim.inject_vehicle("fw_up|fw_merge|fw_down", lane_id=0, pos=5.0)  # 345+ m away
    enc = StateEncoder(net, sensing_range=100.0)
    state, obs = enc.encode(sim)
    row = obs.obs_mask[0]
    assert row.sum() == 1
    assert row[enc._slot_of[veh.vid]]


def test_rightmost_lane_masks_right_change(networks):
    net = networks["onramp"]
    sim = Simulation(net, empty_episode(net))
    accel = net.edges["fw_merge"][2]  # rightmost: no lane further right
    sim.inject_vehicle("ramp|fw_merge|fw_down", lane_id=accel, pos=50.0,
                       speed=10.0, is_av=True)
    enc = StateEncoder(net)
    _, obs = enc.encode(sim)
    assert obs.av_mask[0]
    assert not obs.action_mask[0, 1]  # a_right masked
    assert obs.action_mask[0, 0]  # left neighbor exists
    assert obs.action_mask[0, 2:].all()


def test_sensing_monotonic_in_range(networks):
    net = networks["lanedrop"]
    spec = generate_episode(net, GenerationConfig(demand_level=2500.0,
                                                  penetration=0.5), seed=3)
    sim = Simulation(net, spec)
    sim.run(until=120.0)
    small = StateEncoder(net, sensing_range=50.0)
    large = StateEncoder(net, sensing_range=100.0)
    _, obs_s = small.encode(sim)
    _, obs_l = large.encode(sim)
    assert np.all(obs_l.obs_mask | ~obs_s.obs_mask)  # small set subset of large


# ---------------------------------------------------------------- invariants

def test_encoding_idempotent(networks):
    net = networks["lanedrop"]
    spec = generate_episode(net, GenerationConfig(demand_level=2500.0,
                                                  penetration=0.3), seed=7)
    sim = Simulation(net, spec)
    sim.run(until=90.0)
    enc = StateEncoder(net)
    s1, o1 = enc.encode(sim)
    s2, o2 = enc.encode(sim)
    assert np.array_equal(s1.features, s2.features)
    assert np.array_equal(s1.mask, s2.mask)
    assert np.array_equal(o1.obs_mask, o2.obs_mask)
    assert np.array_equal(o1.av_slots, o2.av_slots)


def test_slot_stability_over_episode(networks):
    net = networks["onramp"]
    spec = generate_episode(net, GenerationConfig(demand_level=4000.0,
                                                  penetration=0.2), seed=5)
    env = BottleneckEnv(net, EnvConfig(max_activated=8))
    state, obs = env.reset(spec)
    seen: dict[int, int] = {}
    for _ in range(180):
        for slot, vid in enumerate(state.slot_vehicle):
            if vid >= 0:
                assert seen.setdefault(int(vid), slot) == slot
        (state, obs), _, done, _ = env.step(None)
        if done:
            break


def test_mask_consistency_on_random_episode(networks):
    net = networks["onramp"]
    spec = generate_episode(net, GenerationConfig(demand_level=4200.0,
                                                  penetration=0.4), seed=21)
    env = BottleneckEnv(net, EnvConfig(max_activated=8))
    state, obs = env.reset(spec)
    for _ in range(150):
        n, c = obs.obs_mask.shape
        for i in range(n):
            if obs.av_mask[i]:
                slot = obs.av_slots[i]
                assert slot >= 0 and state.mask[slot]
                assert obs.obs_mask[i, slot]  # self-observation
                assert obs.action_mask[i].any()
            else:
                assert not obs.obs_mask[i].any()
                assert not obs.action_mask[i].any()
        assert np.all(state.mask[np.newaxis, :] | ~obs.obs_mask)
        (state, obs), _, done, _ = env.step(None)
        if done:
            break


def test_reward_decomposition_exact(networks):
    net = networks["lanedrop"]
    spec = generate_episode(net, GenerationConfig(demand_level=2200.0), seed=2)
    params = RewardParams(eta_a=1.0, eta_b=-0.05)
    env = BottleneckEnv(net, EnvConfig(reward=params))
    env.reset(spec)
    total = 0.0
    steps = 0
    done = False
    while not done:
        _, r, done, _ = env.step(None)
        total += r
        steps += 1
    tau_sum = sum(rec["travel_time"] for rec in env.sim.release_log)
    expected = params.eta_b * steps + params.eta_a * tau_sum / params.travel_norm
    assert total == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------- serialization

def test_binary_roundtrip(networks):
    net = networks["onramp"]
    spec = generate_episode(net, GenerationConfig(demand_level=4000.0,
                                                  penetration=0.5), seed=13)
    sim = Simulation(net, spec)
    sim.run(until=150.0)
    state, obs = StateEncoder(net, max_activated=8).encode(sim)
    blob = encodings_to_bytes(state, obs)
    state2, obs2 = encodings_from_bytes(blob)
    assert np.array_equal(state2.mask, state.mask)
    assert np.array_equal(state2.slot_vehicle, state.slot_vehicle)
    # features round through the documented float32 payload
    assert np.array_equal(state2.features,
                          state.features.astype(np.float32).astype(np.float64))
    assert np.array_equal(obs2.obs_mask, obs.obs_mask)
    assert np.array_equal(obs2.action_mask, obs.action_mask)
    assert np.array_equal(obs2.av_slots, obs.av_slots)
    assert encodings_to_bytes(state2, obs2)[:20] == blob[:20]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=3000.0), max_size=12),
       st.floats(min_value=0.1, max_value=5.0),
       st.floats(min_value=-1.0, max_value=1.0))
def test_reward_linear_in_travel_times(taus, eta_a, eta_b):
    params = RewardParams(eta_a=eta_a, eta_b=eta_b)
    expected = eta_b + eta_a * sum(t / 300.0 for t in taus)
    assert compute_reward(taus, params) == pytest.approx(expected, rel=1e-12)
