"""Movement primitives: canonical system, basis, fitting, rollout and chaining."""

import math

import numpy as np
import pytest

from stirfry.demo_gen import DemoSpec, gen_leader, min_jerk
from stirfry.dmp import (
    ALPHA_X,
    DMP,
    DmpParams,
    PhaseChainDMP,
    adjust_amplitude,
    basis_activations,
    canonical_rollout,
    chain_rollout,
    default_centers,
    fit_weights,
    forcing,
    rollout,
)
from stirfry.exceptions import ContractError
from stirfry.trajectory import PoseSeq, segment_phases


def min_jerk_demo(y0, goal, tau=1.0, dt=0.01):
    u = np.arange(int(round(tau / dt)) + 1) * dt / tau
    s = min_jerk(u)[:, None]
    return PoseSeq.from_poses(np.asarray(y0) + s * (np.asarray(goal) - np.asarray(y0)), dt=dt)


Y0 = np.array([0.4, 0.3, 0.2, 0.0, 0.1, -0.1])
G = np.array([0.5, 0.28, 0.25, 0.05, 0.4, -0.12])


def _range(seq):
    return np.ptp(seq.poses, axis=0)


# -- canonical system ----------------------------------------------------------------


def test_canonical_initial_and_monotone():
    x = canonical_rollout(ALPHA_X, 1.0, 0.01, 1.0)
    assert x[0] == 1.0
    assert np.all(np.diff(x) < 0) and np.all(x > 0)


def test_canonical_analytic_error_first_order():
    errs = []
    for dt in (0.01, 0.005):
        x = canonical_rollout(ALPHA_X, 1.0, dt, 1.0)
        t = np.arange(len(x)) * dt
        errs.append(np.abs(x - np.exp(-ALPHA_X * t)).max())
    assert errs[0] < 0.01
    assert 1.7 < errs[0] / errs[1] < 2.3


def test_canonical_time_scaling():
    a = canonical_rollout(ALPHA_X, 1.0, 0.01, 1.0)
    b = canonical_rollout(ALPHA_X, 2.0, 0.02, 2.0)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_canonical_errors():
    with pytest.raises(ContractError):
        canonical_rollout(ALPHA_X, 1.0, 0.0, 1.0)
    with pytest.raises(ContractError):
        canonical_rollout(ALPHA_X, 1.0, 0.1, 0.05)


# -- basis and forcing -------------------------------------------------------------------


def test_basis_values():
    assert basis_activations(0.3, np.array([0.3]), np.array([5.0]))[0] == 1.0
    np.testing.assert_allclose(basis_activations(0.5, np.array([0.3]), np.array([10.0])), [math.exp(-0.4)])
    assert math.isclose(math.exp(-0.4), 0.6703, abs_tol=5e-5)
    assert basis_activations(0.5, np.array([0.3]), np.array([1e6]))[0] < 1e-300
    c, h = default_centers(30)
    assert c[0] == 1.0 and math.isclose(c[-1], 0.01) and h[-1] == h[-2]


def test_forcing_identities():
    c, h = default_centers(10)
    psi = basis_activations(0.4, c, h)
    w = np.random.default_rng(0).standard_normal((6, 10))
    assert np.all(forcing(0.0, psi, w, G, Y0) == 0)
    assert np.all(forcing(0.4, psi, w, Y0, Y0) == 0)
    np.testing.assert_allclose(forcing(0.4, psi, np.full((6, 10), 2.5), G, Y0), 2.5 * 0.4 * (G - Y0), rtol=1e-14)


# -- fitting --------------------------------------------------------------------------


def test_fit_min_jerk_rmse_under_one_percent():
    demo = min_jerk_demo(Y0, G)
    out = rollout(fit_weights(demo, 30))
    rmse = np.sqrt(((out.poses - demo.poses) ** 2).mean(axis=0))
    assert np.all(rmse < 0.01 * _range(demo))


@pytest.mark.parametrize("scale", [0.0, 5.0])
def test_fit_self_consistency(scale):
    # demo sampled at the integration step, so it is the rollout itself
    c, h = default_centers(30)
    w = np.random.default_rng(3).standard_normal((6, 30)) * scale
    truth = rollout(DmpParams(w, c, h, 1.0, Y0, G), dt=1e-3)
    refit = rollout(fit_weights(truth, 30), dt=1e-3)
    rmse = np.sqrt(((refit.poses - truth.poses) ** 2).mean(axis=0))
    assert np.all(rmse < 1e-3 * _range(truth))


def test_fit_constant_demo():
    demo = PoseSeq.from_poses(np.tile(Y0, (50, 1)))
    p = fit_weights(demo)
    assert np.all(p.weights == 0)
    np.testing.assert_array_equal(rollout(p).poses, demo.poses)


def test_fit_too_short():
    with pytest.raises(ContractError):
        fit_weights(PoseSeq.from_poses(np.zeros((2, 6))))


# -- rollout -----------------------------------------------------------------------------


def _zero_params(tau=1.0):
    c, h = default_centers(30)
    return DmpParams(np.zeros((6, 30)), c, h, tau, Y0, G)


def test_zero_weights_monotone_attractor():
    out = rollout(_zero_params(), duration=1.5)
    step = np.diff(out.poses, axis=0) * np.sign(G - Y0)
    assert np.all(step >= -1e-15)
    assert np.all(np.abs(out.poses[-1] - G) <= np.abs(G - Y0))


def test_goal_convergence_random():
    params = fit_weights(min_jerk_demo(Y0, G))
    rng = np.random.default_rng(7)
    for _ in range(50):
        y0 = rng.uniform(-0.5, 0.5, 6)
        g = rng.uniform(-0.5, 0.5, 6)
        tau = rng.uniform(0.3, 2.0)
        out = rollout(params, y0=y0, goal=g, tau=tau, duration=1.5 * tau)
        eps = 1e-2 * np.linalg.norm(g - y0) + 1e-4
        assert np.linalg.norm(out.poses[-1] - g) < eps


@pytest.mark.parametrize("k", [0.5, 2.0])
def test_temporal_scaling(k):
    params = fit_weights(min_jerk_demo(Y0, G))
    dt = 0.01
    a = rollout(params, tau=1.0, dt=dt)
    b = rollout(params, tau=k, dt=k * dt)
    vmax = np.abs(np.diff(a.poses, axis=0)).max(axis=0) / dt
    assert len(a) == len(b)
    assert np.all(np.abs(a.poses - b.poses).max(axis=0) <= 10 * dt * vmax)


def test_tau_doubling_same_path():
    params = fit_weights(min_jerk_demo(Y0, G))
    a = rollout(params, tau=1.0)
    b = rollout(params, tau=2.0)
    assert len(b) == 2 * len(a) - 1
    vmax = np.abs(np.diff(a.poses, axis=0)).max() / a.dt
    assert np.abs(b.poses[::2] - a.poses).max() < 10 * a.dt * vmax


def test_spatial_scaling_exact():
    params = fit_weights(min_jerk_demo(Y0, G))
    g2 = G.copy()
    g2[2] = Y0[2] + 2.0 * (G[2] - Y0[2])
    a = rollout(params)
    b = rollout(params, goal=g2)
    ratio = (g2[2] - Y0[2]) / (G[2] - Y0[2])
    np.testing.assert_allclose(b.poses[:, 2] - Y0[2], ratio * (a.poses[:, 2] - Y0[2]), atol=1e-12)
    np.testing.assert_array_equal(a.poses[:, :2], b.poses[:, :2])


# -- params ------------------------------------------------------------------------------


def test_params_validation_and_roundtrip():
    c, h = default_centers(5)
    with pytest.raises(ContractError):
        DmpParams(np.zeros((6, 5)), c, h, 1.0, Y0, G, beta_y=5.0)
    with pytest.raises(ContractError):
        DmpParams(np.zeros((6, 4)), c, h, 1.0, Y0, G)
    with pytest.raises(ContractError):
        DmpParams(np.zeros((6, 5)), c, -h, 1.0, Y0, G)
    with pytest.raises(ContractError):
        DmpParams(np.zeros((6, 5)), c, h, 0.0, Y0, G)
    p = DmpParams(np.ones((6, 5)), c, h, 0.7, Y0, G)
    assert p.beta_y == 25.0 / 4
    q = DmpParams.from_dict(p.to_dict())
    assert q.tau == p.tau and np.array_equal(q.weights, p.weights) and q.beta_y == p.beta_y


def test_dmp_estimator():
    demo = min_jerk_demo(Y0, G)
    est = DMP(n_basis=20).fit(demo)
    assert est.get_params()["n_basis"] == 20
    assert len(est.predict()) == len(demo)


# -- chaining ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def chain():
    return PhaseChainDMP().fit(gen_leader(DemoSpec()))


def test_chain_matches_concatenated_phases(chain):
    pb, pc, pd = chain.phase_dmps_
    seq = chain.rollout()
    y, v, parts = chain.rest_, np.zeros(6), []
    for prm, g in zip((pb, pc, pd), (*chain.connections_, pd.goal)):
        s, vel = rollout(prm, y0=y, goal=g, v0=v, return_velocity=True)
        parts.append(s.poses if not parts else s.poses[1:])
        y, v = s.poses[-1], vel[-1]
    np.testing.assert_array_equal(seq.poses, np.concatenate(parts))


def test_chain_reproduces_demo_cycle(chain):
    leader = gen_leader(DemoSpec())
    cyc = segment_phases(leader)[0]
    demo = leader.poses[cyc.b_start:cyc.d_end + 1]
    out = chain.rollout().poses
    assert len(out) == len(demo)
    span = np.maximum(np.ptp(leader.poses, axis=0), 1e-9)
    assert np.all(np.abs(out - demo).max(axis=0) < 0.02 * span)


def test_chain_raise_connection_z(chain):
    base = chain.rollout()
    conns = [c.copy() for c in chain.connections_]
    conns[0][2] += 0.02
    raised = chain.rollout(connections=conns)
    nb = int(round(chain.phase_dmps_[0].tau / chain.dt_)) + 1
    assert raised.poses[:nb, 2].max() > base.poses[:nb, 2].max() + 0.015
    np.testing.assert_allclose(raised.poses[-1], base.poses[-1], atol=1e-3)


def test_chain_cycle_bookkeeping(chain):
    taus = sum(p.tau for p in chain.phase_dmps_)
    seq = chain_rollout(chain.phase_dmps_, chain.connections_, cycles=3, start=chain.rest_)
    assert abs(seq.duration - 3 * taus) <= 9 * seq.dt
    with pytest.raises(ContractError):
        chain_rollout(chain.phase_dmps_, chain.connections_, cycles=0)


def test_chain_continuity(chain):
    seq = chain.rollout(cycles=2)
    step = np.abs(np.diff(seq.poses, axis=0)).max(axis=0)
    assert np.all(step < 0.1 * np.ptp(seq.poses, axis=0) + 1e-12)


def test_adjust_amplitude(chain):
    rest = chain.rest_
    c1, c2 = adjust_amplitude(chain.connections_, rest, 1.5)
    np.testing.assert_allclose(c1[:3] - rest[:3], 1.5 * (chain.connections_[0][:3] - rest[:3]))
    np.testing.assert_allclose(c2[:3] - chain.connections_[1][:3], c1[:3] - chain.connections_[0][:3])
    np.testing.assert_array_equal(c1[3:], chain.connections_[0][3:])
    same = adjust_amplitude(chain.connections_, rest, 1.0)
    np.testing.assert_allclose(same[0], chain.connections_[0], atol=1e-15)


def test_chain_save_load(tmp_path, chain):
    path = tmp_path / "dmp.json"
    chain.save(path)
    other = PhaseChainDMP.load(path)
    assert other.rollout(cycles=2, amplitude=1.2) == chain.rollout(cycles=2, amplitude=1.2)
