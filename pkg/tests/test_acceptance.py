"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the pytest
terminal summary. Criteria 5 to 8 train models and take minutes; all are marked
slow so ``pytest -m "not slow"`` skips them.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_states, report_criterion
from rawgrl import seeding
from rawgrl.actorcritic import (
    actor_loss_grad,
    critic_forward,
    critic_grad_W,
    critic_loss_grad,
    inference_loss_grad,
    init_all,
    init_omega,
    preprocess,
)
from rawgrl.desim import MacConfig, Simulator, run_sim
from rawgrl.maxcut import GW_RATIO, brute_force_maxcut, cut_value, do_graph_cut
from rawgrl.netmodel import (
    ScenarioConfig,
    build_realization,
    generate_realization,
    observe_states,
    sensing_matrix,
)
from rawgrl.nnkernel import ParamStore, finite_diff_check, sigmoid
from rawgrl.online import OnlineConfig, OnlineState, run_paired
from rawgrl.training import (
    TrainConfig,
    evaluate,
    make_policy,
    pretrain_inference,
    score_inference,
    train_actor_critic,
)

pytestmark = pytest.mark.slow

DEFAULT = ScenarioConfig()  # A=4, K=20, Z=4


@pytest.fixture(scope="session")
def pretrained_omega():
    """Inference network after the default 1000-step pre-training, with its held-out scores."""
    store = ParamStore()
    init_omega(store, DEFAULT.num_aps, seeding.rng(0, seeding.INIT, 0))
    t0 = time.perf_counter()
    before = score_inference(store, DEFAULT, 200, 1)
    pretrain_inference(TrainConfig(steps=1000, lr=1e-4), DEFAULT, store)
    after = score_inference(store, DEFAULT, 200, 1)
    return store, before, after, time.perf_counter() - t0


def _with_fresh_actor_critic(omega: ParamStore, seed: int) -> ParamStore:
    store = init_all(DEFAULT.num_aps, seed)
    for n in omega.names():
        store.set(n, omega[n])
    return store


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    cfg = ScenarioConfig(num_users=5)
    worst, worst_clean = 0.0, 0.0
    for seed in range(3):
        store = init_all(4, seed)
        rng = np.random.default_rng(seed)
        real = generate_realization(cfg, seed)
        S, O_hat = observe_states(real, cfg), sensing_matrix(real, cfg)
        pre = preprocess(store, S)
        W = rng.uniform(size=(5, 5))
        np.fill_diagonal(W, 0.0)
        r = rng.uniform(0.0, 0.5, 5)
        off = ~np.eye(5, dtype=bool)

        checks = []
        _, g, _ = inference_loss_grad(store, S, O_hat)
        checks.append(finite_diff_check(lambda: inference_loss_grad(store, S, O_hat)[0],
                                        store.values, g, rng=seed))
        _, g, _ = critic_loss_grad(store, S, W, r, pre=pre)
        checks.append(finite_diff_check(lambda: critic_loss_grad(store, S, W, r, pre=pre)[0],
                                        store.values, g, rng=seed))
        step = actor_loss_grad(store, S, pre=pre)
        checks.append(finite_diff_check(lambda: actor_loss_grad(store, S, pre=pre).loss,
                                        {n: store[n] for n in step.grads}, step.grads, rng=seed))
        # online path: ascent direction on the logits of W
        k = int(rng.integers(5))
        V = OnlineState.from_weights(W, S, np.ones(5, dtype=int), OnlineConfig()).V
        _, dQ = critic_grad_W(store, pre, W, k)
        s = sigmoid(V)
        gV = np.where(off, -dQ * s * (1 - s), 0.0)
        checks.append(finite_diff_check(
            lambda: -critic_forward(store, pre, np.where(off, sigmoid(V), 0.0))[0][k],
            {"V": V}, {"V": gV}, max_per_entry=None))
        for c in checks:
            worst = max(worst, c.max_rel_err)
            worst_clean = max(worst_clean, c.max_rel_err_clean)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and worst_clean < 1e-4 and elapsed < 60
    report_criterion(1, ok, f"max rel err {worst:.2e}, away from kinks {worst_clean:.2e}, "
                            f"{elapsed:.0f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------

def test_criterion_2_maxcut_quality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ratios = []
    for _ in range(200):
        K = int(rng.integers(4, 9))
        W = rng.uniform(size=(K, K))
        np.fill_diagonal(W, 0.0)
        z = do_graph_cut(2, W, rng=rng, trials=20)
        ratios.append(cut_value(W, z) / brute_force_maxcut(W, 2)[1])
    ratios = np.array(ratios)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(ratios >= GW_RATIO)) and ratios.mean() >= 0.97 and elapsed < 120
    report_criterion(2, ok, f"min ratio {ratios.min():.4f}, mean {ratios.mean():.4f}, "
                            f"{elapsed:.0f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_indicator_graphs():
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(50):
        K = int(rng.integers(2, 7))
        target = rng.integers(1, 3, size=K)
        W = (target[:, None] != target[None, :]).astype(float)
        z = do_graph_cut(2, W, exact=True)
        hits += np.array_equal(z[:, None] == z[None, :], target[:, None] == target[None, :])
    ok = hits == 50
    report_criterion(3, ok, f"{hits}/50 targets recovered up to relabeling")
    assert ok


# -- 4 -------------------------------------------------------------------------

@st.composite
def sim_cases(draw):
    K = draw(st.integers(1, 12))
    Z = draw(st.sampled_from([1, 2, 4]))
    cfg = ScenarioConfig(num_users=K, num_groups=Z,
                         arrival_interval=draw(st.sampled_from([2e-3, 20e-3])),
                         queue_capacity=draw(st.integers(1, 6)))
    z = np.array(draw(st.lists(st.integers(1, Z), min_size=K, max_size=K)), dtype=np.int64)
    return cfg, draw(st.integers(0, 2**31 - 1)), z, MacConfig(allow_straddle=draw(st.booleans()))


def _simulator_invariants(case):
    cfg, seed, z, mac = case
    real = generate_realization(cfg, seed)
    T = 3 * cfg.num_groups + 5
    sim = Simulator(real, cfg, mac, seed=seed)
    u = []
    for _ in range(T):
        u.append(sim.run(z, 1))
        held = sim.delivered + sim.q + sim.dropped_overflow + sim.dropped_retry
        assert np.array_equal(held, sim.arrived), "conservation"
    u = np.concatenate(u, axis=1)
    owner = np.arange(T) % cfg.num_groups + 1
    assert np.all(u[owner[None, :] != z[:, None]] == 0), "off-slot silence"
    assert np.array_equal(Simulator(real, cfg, mac, seed=seed).run(z, T), u), "determinism"


def test_criterion_4_simulator():
    n_cases = []

    @settings(max_examples=100, database=None)
    @given(sim_cases())
    def prop(case):
        n_cases.append(1)
        _simulator_invariants(case)

    try:
        prop()
        inv_ok, inv_msg = True, "invariants held"
    except AssertionError as exc:
        inv_ok, inv_msg = False, f"invariant broken: {exc}"

    cfg = ScenarioConfig(num_users=1, num_groups=1, arrival_interval=1e-5, queue_capacity=50)
    mac = MacConfig()
    real = build_realization([[400.0, 400.0]], None, cfg)
    r = run_sim(real, np.ones(1, dtype=np.int64), 2000, cfg, mac, seed=1).r[0]
    cycle = (mac.difs + mac.cw_min / 2 * mac.mac_slot + real.packet_duration[0] + mac.sifs
             + mac.ack_duration)
    bound = cfg.raw_slot / cycle
    sat_ok = abs(r - bound) <= 0.10 * bound
    ok = inv_ok and sat_ok
    report_criterion(4, ok, f"{inv_msg} on {len(n_cases)} cases; saturated r = {r:.3f} vs "
                            f"bound {bound:.3f} ({r / bound:.3f})")
    assert ok


# -- 5 -------------------------------------------------------------------------

def test_criterion_5_pretraining(pretrained_omega):
    _, before, after, elapsed = pretrained_omega
    ratio = after.loss / before.loss
    ok = ratio <= 0.5 and after.acc_sensed >= 0.7 and after.acc_hidden >= 0.7 and elapsed < 600
    report_criterion(5, ok, f"held-out loss ratio {ratio:.3f}, accuracy sensed "
                            f"{after.acc_sensed:.3f} hidden {after.acc_hidden:.3f}, "
                            f"{elapsed:.0f}s")
    assert ok


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_directional_gain(pretrained_omega):
    t0 = time.perf_counter()
    scfg = ScenarioConfig(num_users=10, num_groups=4)
    store = _with_fresh_actor_critic(pretrained_omega[0], 6)
    train_actor_critic(TrainConfig(steps=200, sim_slots=500), scfg, store)
    res = {name: evaluate(make_policy(name, store, scfg), scfg, 50, 500, seed=123)
           for name in ("proposed", "rand", "unif")}
    beats = float((res["proposed"].worst > res["rand"].worst).mean())
    unif_gap = res["proposed"].mean_worst / res["unif"].mean_worst
    elapsed = time.perf_counter() - t0
    ok = beats >= 0.8 and unif_gap >= 0.9 and elapsed < 3600
    report_criterion(6, ok, f"beats RAND on {beats:.0%} of 50, mean worst-case "
                            f"{res['proposed'].mean_worst:.3f} vs UNIF "
                            f"{res['unif'].mean_worst:.3f} ({unif_gap:.3f}), {elapsed:.0f}s")
    assert ok


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_online(pretrained_omega):
    t0 = time.perf_counter()
    store = _with_fresh_actor_critic(pretrained_omega[0], 7)
    train_actor_critic(TrainConfig(), DEFAULT, store)
    ocfg = OnlineConfig()
    total = 100 * ocfg.window
    static, mobile = [], []
    mobile_cfg = DEFAULT.with_(mobility_speed=2.0)
    for seed in range(20):
        for cfg, is_mobile, out in ((DEFAULT, False, static), (mobile_cfg, True, mobile)):
            real = generate_realization(cfg, seeding.derive(seed, seeding.REALIZATION))
            pair = run_paired(real, store, cfg, ocfg, total, seed, mobile=is_mobile)
            out.append((pair.tuned.trailing_worst(10), pair.control.trailing_worst(10)))
    static, mobile = np.array(static), np.array(mobile)
    at_least = static[:, 0] >= static[:, 1]
    worst_rel = float(np.min(static[:, 0] / np.maximum(static[:, 1], 1e-12)))
    mobile_wins = float((mobile[:, 0] > mobile[:, 1]).mean())
    elapsed = time.perf_counter() - t0
    ok = (at_least.mean() >= 0.6 and worst_rel >= 0.9 and mobile_wins >= 0.8
          and elapsed < 2700)
    report_criterion(7, ok, f"static tuned >= control on {at_least.mean():.0%} of 20 "
                            f"(worst ratio {worst_rel:.3f}); mobile wins {mobile_wins:.0%}; "
                            f"{elapsed:.0f}s")
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_criterion_8_step_time():
    times = {}
    for K in (10, 20, 40):
        scfg = ScenarioConfig(num_users=K, num_groups=4)
        store = init_all(scfg.num_aps, 0)
        train_actor_critic(TrainConfig(steps=1), scfg, store)  # warm the compiled kernels
        per_step = []
        for s in range(5):
            t = time.perf_counter()
            train_actor_critic(TrainConfig(steps=1, seed=s + 1), scfg, store)
            per_step.append(time.perf_counter() - t)
        times[K] = float(np.median(per_step))
    Ks = np.array(sorted(times))
    slope = float(np.polyfit(np.log(Ks), np.log([times[k] for k in Ks]), 1)[0])
    ok = times[20] < 2.0 and slope <= 3.5
    detail = ", ".join(f"K={k} {times[k]:.3f}s" for k in Ks)
    report_criterion(8, ok, f"{detail}; log-log slope {slope:.2f}")
    assert ok


# -- 9 -------------------------------------------------------------------------

def test_criterion_9_checkpoint_round_trip(tmp_path):
    scfg = ScenarioConfig(num_users=5, num_groups=2)
    store = init_all(scfg.num_aps, 9)
    train_actor_critic(TrainConfig(steps=5, sim_slots=20, lr=1e-3), scfg, store)
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    store.save(first)
    loaded = ParamStore.load(first)
    loaded.save(second)
    same_bytes = first.read_bytes() == second.read_bytes()
    a = evaluate(make_policy("proposed", store, scfg), scfg, 5, 50, seed=9)
    b = evaluate(make_policy("proposed", loaded, scfg), scfg, 5, 50, seed=9)
    same_eval = np.array_equal(a.per_user, b.per_user) and np.array_equal(a.groupings, b.groupings)
    ok = same_bytes and same_eval
    report_criterion(9, ok, f"byte-identical resave {same_bytes}, identical eval {same_eval}")
    assert ok
