"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line."""

import filecmp
import os
import time
import zlib

import numpy as np
import pytest

from stirfry import tensor as T
from stirfry.cli import main
from stirfry.demo_gen import DemoSpec, gen_leader, min_jerk
from stirfry.dmp import PhaseChainDMP, fit_weights, rollout
from stirfry.tensor import Tensor, gradcheck
from stirfry.trajectory import PoseSeq, apply_norm
from stirfry.training import TrainConfig, dtw, normalized_dtw, rollout_ndtw, soft_dtw_divergence, split_pairs, train
from stirfry.transducer import ModelConfig, TransducerModel, shift_right
from stirfry.wok_sim import (
    ContentPhysics,
    ContentState,
    LoopConfig,
    WokGeom,
    WokKinematics,
    closed_loop,
    step_dynamics,
)

from oracles import brute_force_dtw
from test_tensor import PRIMITIVES


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def test_dtw_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, path_mismatch = 0.0, 0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        a = rng.standard_normal((int(rng.integers(1, 7)), d))
        b = rng.standard_normal((int(rng.integers(1, 7)), d))
        cost, path = dtw(a, b)
        ref_cost, ref_path = brute_force_dtw(a, b)
        worst = max(worst, abs(cost - ref_cost))
        path_mismatch += path != ref_path
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and path_mismatch == 0 and elapsed < 10
    verdict("DTW oracle equivalence", ok,
            f"max cost error {worst:.2e}, path mismatches {path_mismatch}/200, {elapsed:.2f} s")


def test_gradient_integrity(verdict):
    start = time.perf_counter()
    prim_worst = 0.0
    for name in sorted(PRIMITIVES):
        fn, shapes = PRIMITIVES[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [Tensor(rng.standard_normal(s) + (0.3 if name == "relu" else 0.0)) for s in shapes]
        if name == "relu":
            inputs[0].data[np.abs(inputs[0].data) < 1e-3] = 0.5
        prim_worst = max(prim_worst, gradcheck(lambda xs: fn(*xs), inputs))
    # soft-DTW is a primitive of the loss
    rng = np.random.default_rng(5)
    a, b = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((4, 3)))
    prim_worst = max(prim_worst, gradcheck(lambda xs: soft_dtw_divergence(xs[0], xs[1], 0.1), [a, b]))

    model = TransducerModel(ModelConfig(h_em=12, n_layers=2, heads=2, d_ff=8, gcn_hidden=4, dropout=0.0, seed=2))
    left, right = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    dec = shift_right(right)

    def loss(xs):
        return soft_dtw_divergence(model.forward(left, dec)[0], Tensor(right), 0.1) * (1.0 / 24)

    full = gradcheck(loss, [model.params[k] for k in sorted(model.params)])
    elapsed = time.perf_counter() - start
    ok = prim_worst < 1e-4 and full < 1e-3 and elapsed < 60
    verdict("Gradient integrity", ok,
            f"primitives {prim_worst:.2e} (<1e-4), transducer {full:.2e} (<1e-3), {elapsed:.1f} s")


def _min_jerk_demo(y0, goal, tau=1.0, dt=0.01):
    u = np.arange(int(round(tau / dt)) + 1) * dt / tau
    return PoseSeq.from_poses(y0 + min_jerk(u)[:, None] * (goal - y0), dt=dt)


def test_dmp_fidelity(verdict):
    start = time.perf_counter()
    y0 = np.array([0.4, 0.3, 0.2, 0.0, 0.1, -0.1])
    g = np.array([0.5, 0.28, 0.25, 0.05, 0.4, -0.12])
    demo = _min_jerk_demo(y0, g)
    params = fit_weights(demo, 30)
    out = rollout(params)
    rel_rmse = (np.sqrt(((out.poses - demo.poses) ** 2).mean(axis=0)) / np.ptp(demo.poses, axis=0)).max()

    rng = np.random.default_rng(11)
    worst_goal = 0.0
    for _ in range(50):
        a, b = rng.uniform(-0.5, 0.5, 6), rng.uniform(-0.5, 0.5, 6)
        tau = rng.uniform(0.3, 2.0)
        end = rollout(params, y0=a, goal=b, tau=tau, duration=1.5 * tau).poses[-1]
        eps = 1e-2 * np.linalg.norm(b - a) + 1e-4
        worst_goal = max(worst_goal, np.linalg.norm(end - b) / eps)

    dt = 0.01
    base = rollout(params, tau=1.0, dt=dt)
    vmax = np.abs(np.diff(base.poses, axis=0)).max(axis=0) / dt
    worst_time = 0.0
    for k in (0.5, 2.0):
        scaled = rollout(params, tau=k, dt=k * dt)
        worst_time = max(worst_time, (np.abs(base.poses - scaled.poses).max(axis=0) / (10 * dt * vmax)).max())
    elapsed = time.perf_counter() - start
    ok = rel_rmse < 0.01 and worst_goal < 1 and worst_time <= 1 and elapsed < 30
    verdict("DMP fidelity", ok,
            f"rmse/range {rel_rmse:.2e} (<1e-2), goal error/eps {worst_goal:.3f} (<1), "
            f"time-scaling error/(10 dt vmax) {worst_time:.3f} (<=1), {elapsed:.1f} s")


@pytest.mark.slow
def test_coordination_learning(verdict, dataset_dir):
    start = time.perf_counter()
    splits = split_pairs(str(dataset_dir / "manifest.json"))
    pairs = {k: [(l, r) for l, r, _ in v] for k, v in splits.items()}
    res = train(TransducerModel(ModelConfig()), pairs["train"], TrainConfig(epochs=60), val_pairs=pairs["val"])
    sl, sr = res.stats_left, res.stats_right
    test = float(np.mean([normalized_dtw(_rollout(res.model, l, sl, sr), r, sr) for l, r in pairs["test"]]))
    train_metric = rollout_ndtw(res.model, [(apply_norm(l.poses, sl), apply_norm(r.poses, sr))
                                            for l, r in pairs["train"]], sr)
    best_val = res.report.val_ndtw[res.report.best_epoch - 1]
    elapsed = time.perf_counter() - start
    ok = test < 0.05 and best_val < 2 * train_metric and elapsed < 1800
    verdict("Coordination learning", ok,
            f"test NDTW {test:.4f} (<0.05), best val NDTW {best_val:.4f} at epoch {res.report.best_epoch} "
            f"vs 2 x train NDTW {2 * train_metric:.4f}, {elapsed:.0f} s")


def _rollout(model, left, sl, sr):
    from stirfry.transducer import rollout_autoregressive

    return rollout_autoregressive(left, model, sl, sr)


def test_causality_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    model = TransducerModel(ModelConfig(seed=7))
    failures = 0
    for _ in range(100):
        L = int(rng.integers(2, 24))
        left, right = rng.standard_normal((L, 6)), rng.standard_normal((L, 6))
        t = int(rng.integers(0, L))
        l2, r2 = left.copy(), right.copy()
        which = rng.integers(0, 3)
        if which in (0, 2):
            l2[t + 1:] += rng.standard_normal(l2[t + 1:].shape) * 5
        if which in (1, 2):
            r2[t:] += rng.standard_normal(r2[t:].shape) * 5
        with T.no_grad():
            a = model.forward(left, shift_right(right)).data[0, t]
            b = model.forward(l2, shift_right(r2)).data[0, t]
        failures += not np.array_equal(a, b)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 30
    verdict("Causality suite", ok, f"{100 - failures}/100 bit-identical, {elapsed:.1f} s")


def test_closed_loop(verdict):
    start = time.perf_counter()
    chain = PhaseChainDMP().fit(gen_leader(DemoSpec()))
    runs = {}
    for amp in (0.7, 1.3):
        res = closed_loop(chain, None, LoopConfig(initial_amplitude=amp))
        last = res.log[-1]
        in_band = abs(last["mean_max_d"] - last["target"]) <= 0.1 * last["target"]
        runs[amp] = (res.converged and in_band and len(res.log) <= 10, len(res.log))

    geom, phys = WokGeom(), ContentPhysics()
    state = ContentState.resting(geom, 0.03)
    r = [state.pos[0]]
    for _ in range(5000):
        state = step_dynamics(WokKinematics(), state, 1e-3, geom, phys)
        r.append(abs(state.pos[0]))
    r = np.array(r)
    peaks = [r[i] for i in range(1, len(r) - 1) if r[i] >= r[i - 1] and r[i] > r[i + 1]]
    envelope_ok = all(b <= a for a, b in zip(peaks, peaks[1:]))
    elapsed = time.perf_counter() - start
    ok = all(v[0] for v in runs.values()) and envelope_ok and elapsed < 120
    verdict("Closed loop", ok,
            f"-30% converged in {runs[0.7][1]} iters, +30% in {runs[1.3][1]} iters, "
            f"static envelope nonincreasing over {len(peaks)} peaks: {envelope_ok}, {elapsed:.1f} s")


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(os.path.join(a, d), os.path.join(b, d))
                                               for d in cmp.common_dirs)


@pytest.mark.slow
def test_determinism(verdict, tmp_path):
    results = {}
    roots = [tmp_path / "run0", tmp_path / "run1"]
    for root in roots:
        data = root / "data"
        assert main(["gen", "--seed", "3", "--out", str(data)]) == 0
        assert main(["train", "--manifest", str(data / "manifest.json"), "--epochs", "5", "--seed", "3",
                     "--out", str(root / "train")]) == 0
        ckpt = str(root / "train" / "model.ckpt")
        assert main(["rollout", "--checkpoint", ckpt, "--left", str(data / "test_s0.85_left.csv"),
                     "--right", str(data / "test_s0.85_right.csv"), "--out", str(root / "rollout")]) == 0
        assert main(["fit-dmp", "--left", str(data / "train_s1.00_left.csv"), "--out", str(root / "dmp")]) == 0
        code = main(["loop", "--dmp", str(root / "dmp" / "dmp.json"), "--checkpoint", ckpt, "--seed", "3",
                     "--set", "initial_amplitude=0.7", "--out", str(root / "loop")])
        assert code in (0, 3)
    for step in ("data", "train", "rollout", "loop"):
        results[step] = _tree_equal(str(roots[0] / step), str(roots[1] / step))
    ok = all(results.values())
    verdict("Determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items()))
