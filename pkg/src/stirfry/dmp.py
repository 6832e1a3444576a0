"""Discrete dynamic movement primitives with Gaussian-basis forcing.

Transformation system, one per pose dimension, sharing one phase variable::

    tau**2 * ydd = alpha_y * (beta_y * (g - y) - tau * yd) + f
    f(x) = (sum_i psi_i * w_i / sum_i psi_i) * x * (g - y0)
    tau * xd = -alpha_x * x,   psi_i = exp(-h_i * (x - c_i)**2)

A stir-fry leader cycle is represented by three primitives (push, rotate,
pull) whose connection poses can be moved to reshape the cycle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, ParseError
from .trajectory import CANONICAL_DT, Pose6D, PoseSeq, segment_phases
from .validation import check_positive

ALPHA_Y = 25.0
ALPHA_X = math.log(100.0)
N_BASIS = 30
INTERNAL_DT = 1e-3
FIT_REG = 1e-10


def _vec6(p):
    if isinstance(p, Pose6D):
        return p.as_array()
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (6,):
        raise ContractError(f"expected a 6-vector pose, got shape {arr.shape}")
    return arr


def default_centers(n_basis, alpha_x=ALPHA_X):
    """Centers evenly spaced in time, i.e. log-spaced in phase, and their widths."""
    if n_basis < 2:
        raise ContractError("a DMP needs at least 2 basis functions")
    c = np.exp(-alpha_x * np.linspace(0.0, 1.0, n_basis))
    d = np.diff(c)
    h = np.empty(n_basis)
    h[:-1] = 1.0 / d**2
    h[-1] = h[-2]
    return c, h


@dataclass(frozen=True)
class DmpParams:
    """Everything needed to roll out one 6-D primitive.

    ``weights`` has shape (6, N): one row per pose dimension. ``beta_y`` is
    derived from ``alpha_y`` (critical damping) unless given consistently.
    """

    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray
    tau: float
    y0: np.ndarray
    goal: np.ndarray
    alpha_y: float = ALPHA_Y
    alpha_x: float = ALPHA_X
    beta_y: float = field(default=None)

    def __post_init__(self):
        w = np.ascontiguousarray(np.atleast_2d(np.asarray(self.weights, dtype=float)))
        c = np.asarray(self.centers, dtype=float).reshape(-1)
        h = np.asarray(self.widths, dtype=float).reshape(-1)
        n = len(c)
        if n < 2:
            raise ContractError("a DMP needs at least 2 basis functions")
        if w.shape != (6, n) or h.shape != (n,):
            raise ContractError(f"weights {w.shape} / widths {h.shape} inconsistent with {n} centers")
        if np.any(h <= 0):
            raise ContractError("basis widths must be positive")
        for name in ("alpha_y", "alpha_x", "tau"):
            check_positive(getattr(self, name), name)
        beta = self.alpha_y / 4.0
        if self.beta_y is not None and not math.isclose(self.beta_y, beta, rel_tol=1e-12):
            raise ContractError(f"beta_y must equal alpha_y / 4 = {beta}, got {self.beta_y}")
        object.__setattr__(self, "beta_y", beta)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", h)
        object.__setattr__(self, "y0", _vec6(self.y0))
        object.__setattr__(self, "goal", _vec6(self.goal))

    @property
    def n_basis(self):
        return len(self.centers)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "centers": self.centers.tolist(),
            "widths": self.widths.tolist(),
            "tau": self.tau,
            "y0": self.y0.tolist(),
            "goal": self.goal.tolist(),
            "alpha_y": self.alpha_y,
            "beta_y": self.beta_y,
            "alpha_x": self.alpha_x,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            centers=np.asarray(d["centers"], dtype=float),
            widths=np.asarray(d["widths"], dtype=float),
            tau=float(d["tau"]),
            y0=np.asarray(d["y0"], dtype=float),
            goal=np.asarray(d["goal"], dtype=float),
            alpha_y=float(d["alpha_y"]),
            alpha_x=float(d["alpha_x"]),
            beta_y=float(d["beta_y"]) if "beta_y" in d else None,
        )


def canonical_rollout(alpha_x, tau, dt, T):
    """Phase values at ``0, dt, ..., T`` by explicit Euler from ``x(0) = 1``."""
    check_positive(dt, "dt")
    if T < dt:
        raise ContractError("T must be at least dt")
    n = int(math.floor(T / dt + 1e-9)) + 1
    decay = 1.0 - dt * alpha_x / tau
    if decay <= 0:
        raise ContractError("dt too large for a stable canonical system")
    return decay ** np.arange(n)


def basis_activations(x, centers, widths):
    """Gaussian activations; shape (N,) for scalar ``x`` else (len(x), N)."""
    x = np.asarray(x, dtype=float)
    return np.exp(-widths * (x[..., None] - centers) ** 2)


def forcing(x, psi, weights, goal, y0):
    """Normalized weighted basis mix gated by ``x`` and scaled by ``goal - y0``."""
    mix = (np.atleast_2d(weights) @ psi) / psi.sum()
    return mix * x * (_vec6(goal) - _vec6(y0))


def fit_weights(demo, n_basis=N_BASIS, alpha_y=ALPHA_Y, alpha_x=ALPHA_X):
    """Locally weighted regression of the forcing term on one demonstration."""
    if len(demo) < 3:
        raise ContractError("fitting a DMP needs at least 3 demonstration samples")
    y = demo.poses
    t = demo.t - demo.t[0]
    tau = float(t[-1])
    y0, goal = y[0].copy(), y[-1].copy()
    yd = np.gradient(y, demo.dt, axis=0)
    ydd = np.gradient(yd, demo.dt, axis=0)
    beta_y = alpha_y / 4.0
    f_target = tau**2 * ydd - alpha_y * (beta_y * (goal - y) - tau * yd)

    centers, widths = default_centers(n_basis, alpha_x)
    x = np.exp(-alpha_x * t / tau)
    psi = basis_activations(x, centers, widths)  # (T, N)
    s = x[:, None] * (goal - y0)[None, :]  # (T, 6)
    num = psi.T @ (s * f_target)  # (N, 6)
    den = psi.T @ (s * s) + FIT_REG
    weights = (num / den).T
    return DmpParams(weights, centers, widths, tau, y0, goal, alpha_y=alpha_y, alpha_x=alpha_x)


def _integrate(params, y0, goal, tau, dt, duration, v0, internal_dt):
    n_sub = max(1, int(math.ceil(dt / internal_dt - 1e-9)))
    h = dt / n_sub
    n_out = int(round(duration / dt)) + 1
    a_y, b_y, a_x = params.alpha_y, params.beta_y, params.alpha_x
    w, c, wid = params.weights, params.centers, params.widths
    amp = goal - y0
    y = y0.copy()
    v = np.zeros(6) if v0 is None else _vec6(v0).copy()
    x = 1.0
    out = np.empty((n_out, 6))
    vel = np.empty((n_out, 6))
    out[0], vel[0] = y, v
    for k in range(1, n_out):
        for _ in range(n_sub):
            psi = np.exp(-wid * (x - c) ** 2)
            f = (w @ psi) / psi.sum() * x * amp
            acc = (a_y * (b_y * (goal - y) - tau * v) + f) / tau**2
            y = y + h * v
            v = v + h * acc
            x = x - h * a_x * x / tau
        out[k], vel[k] = y, v
    return out, vel


def rollout(params, y0=None, goal=None, tau=None, dt=CANONICAL_DT, duration=None, v0=None,
            internal_dt=INTERNAL_DT, t0=0.0, return_velocity=False):
    """Integrate a primitive with optional new start, goal and duration.

    Explicit Euler at ``internal_dt`` (shrunk to divide ``dt``), decimated to
    the output period ``dt``. ``duration`` defaults to ``tau``.
    """
    check_positive(dt, "dt")
    y0 = params.y0 if y0 is None else _vec6(y0)
    goal = params.goal if goal is None else _vec6(goal)
    tau = params.tau if tau is None else check_positive(tau, "tau")
    duration = tau if duration is None else check_positive(duration, "duration")
    poses, vel = _integrate(params, y0, goal, tau, dt, duration, v0, internal_dt)
    seq = PoseSeq.from_poses(poses, dt=dt, t0=t0)
    return (seq, vel) if return_velocity else seq


def chain_rollout(phase_dmps, connections, cycles=1, dt=CANONICAL_DT, start=None, v0=None):
    """Roll out push, rotate and pull primitives back to back.

    ``connections`` are the b->c and c->d poses; each cycle returns to the
    pull primitive's own goal. Every phase starts from the position and
    velocity the previous one ended with.
    """
    if cycles < 1:
        raise ContractError("cycles must be at least 1")
    if len(phase_dmps) != 3 or len(connections) != 2:
        raise ContractError("need three phase primitives and two connection poses")
    pb, pc, pd = phase_dmps
    goals = [_vec6(connections[0]), _vec6(connections[1]), pd.goal]
    y = pb.y0 if start is None else _vec6(start)
    v = np.zeros(6) if v0 is None else _vec6(v0)
    chunks = []
    for _ in range(cycles):
        for prm, g in zip((pb, pc, pd), goals):
            seg, vel = rollout(prm, y0=y, goal=g, dt=dt, v0=v, return_velocity=True)
            chunks.append(seg.poses if not chunks else seg.poses[1:])
            y, v = seg.poses[-1], vel[-1]
    return PoseSeq.from_poses(np.concatenate(chunks, axis=0), dt=dt)


def adjust_amplitude(connections, rest, amplitude):
    """Scale the push connection's position offset from rest by ``amplitude``.

    The rotate->pull connection is translated by the same displacement so the
    rotate phase keeps its shape. Orientations are untouched.
    """
    c1, c2 = _vec6(connections[0]).copy(), _vec6(connections[1]).copy()
    rest = _vec6(rest)
    new_c1 = c1.copy()
    new_c1[:3] = rest[:3] + amplitude * (c1[:3] - rest[:3])
    c2[:3] += new_c1[:3] - c1[:3]
    return new_c1, c2


class DMP(BaseEstimator):
    """Single primitive with an estimator interface.

    >>> dmp = DMP(n_basis=30).fit(demo)          # doctest: +SKIP
    >>> seq = dmp.rollout(goal=new_goal, tau=1.2)  # doctest: +SKIP
    """

    def __init__(self, n_basis=N_BASIS, alpha_y=ALPHA_Y, alpha_x=ALPHA_X, dt=CANONICAL_DT):
        self.n_basis = n_basis
        self.alpha_y = alpha_y
        self.alpha_x = alpha_x
        self.dt = dt

    def fit(self, X, y=None):
        self.params_ = fit_weights(X, self.n_basis, self.alpha_y, self.alpha_x)
        return self

    def rollout(self, y0=None, goal=None, tau=None, duration=None):
        check_is_fitted(self, "params_")
        return rollout(self.params_, y0=y0, goal=goal, tau=tau, dt=self.dt, duration=duration)

    def predict(self, X=None):
        """Reproduce the fitted demonstration."""
        return self.rollout()


class PhaseChainDMP(BaseEstimator):
    """Three primitives fitted on the b, c and d phases of one leader cycle."""

    def __init__(self, n_basis=N_BASIS, alpha_y=ALPHA_Y, alpha_x=ALPHA_X, forward_axis="x",
                 cycle_index=0):
        self.n_basis = n_basis
        self.alpha_y = alpha_y
        self.alpha_x = alpha_x
        self.forward_axis = forward_axis
        self.cycle_index = cycle_index

    def fit(self, X, y=None):
        cycles = segment_phases(X, self.forward_axis)
        if not 0 <= self.cycle_index < len(cycles):
            raise ContractError(f"cycle_index {self.cycle_index} out of range for {len(cycles)} cycles")
        self.cycles_ = cycles
        cyc = cycles[self.cycle_index]
        bounds = [cyc.b_start, cyc.c_start, cyc.d_start, cyc.d_end]
        self.phase_dmps_ = [
            fit_weights(X.slice(lo, hi + 1), self.n_basis, self.alpha_y, self.alpha_x)
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        self.connections_ = [X.poses[cyc.c_start].copy(), X.poses[cyc.d_start].copy()]
        self.rest_ = X.poses[cyc.b_start].copy()
        self.dt_ = X.dt
        return self

    def rollout(self, connections=None, cycles=1, amplitude=1.0, rest_before=0.0, rest_after=0.0):
        """Chained leader trajectory, optionally padded with rest samples."""
        check_is_fitted(self, "phase_dmps_")
        conns = self.connections_ if connections is None else connections
        if amplitude != 1.0:
            conns = adjust_amplitude(conns, self.rest_, amplitude)
        seq = chain_rollout(self.phase_dmps_, conns, cycles, dt=self.dt_, start=self.rest_)
        n_before = int(round(rest_before / self.dt_))
        n_after = int(round(rest_after / self.dt_))
        if n_before == 0 and n_after == 0:
            return seq
        poses = np.concatenate(
            [np.repeat(seq.poses[:1], n_before, 0), seq.poses, np.repeat(seq.poses[-1:], n_after, 0)]
        )
        return PoseSeq.from_poses(poses, dt=self.dt_)

    def to_dict(self):
        check_is_fitted(self, "phase_dmps_")
        return {
            "phases": {k: p.to_dict() for k, p in zip("bcd", self.phase_dmps_)},
            "connections": [np.asarray(c).tolist() for c in self.connections_],
            "rest": np.asarray(self.rest_).tolist(),
            "dt": self.dt_,
            "estimator": self.get_params(),
        }

    @classmethod
    def from_dict(cls, d):
        est = cls(**d.get("estimator", {}))
        est.phase_dmps_ = [DmpParams.from_dict(d["phases"][k]) for k in "bcd"]
        est.connections_ = [np.asarray(c, dtype=float) for c in d["connections"]]
        est.rest_ = np.asarray(d["rest"], dtype=float)
        est.dt_ = float(d["dt"])
        return est

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            return cls.from_dict(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=path, line=exc.lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed primitive file ({exc})", path=path) from None
