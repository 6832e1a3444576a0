"""Point-mass surrogate of wok contents and the displacement feedback loop.

The content is a point mass in the sagittal plane of a wok whose cross
section is the parabola ``z = curvature * r**2 / 2`` (wok frame: forward
``r``, vertical ``z``). While in contact it slides along the bowl under
gravity and the wok's translational pseudo-force, with viscous tangential
damping; pitching the wok rotates gravity in the wok frame. Rotational
pseudo-forces are neglected. When the required normal force turns negative
the mass flies ballistically in the world frame until it meets the bowl
again, losing normal velocity by the restitution factor.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ContractError, NoCyclesError
from .trajectory import AXIS_INDEX, PoseSeq, phase_labels, segment_phases, write_seq

SIM_DT = 1e-3
RECONTACT_SPEED = 1e-2


@dataclass(frozen=True)
class WokGeom:
    radius: float = 0.15
    curvature: float = 20.0
    rim_height: float = None

    def __post_init__(self):
        if not self.radius > 0 or not self.curvature > 0:
            raise ContractError("wok radius and curvature must be positive")
        if self.rim_height is None:
            object.__setattr__(self, "rim_height", self.curvature * self.radius**2 / 2.0)

    def surface(self, r):
        return self.curvature * r * r / 2.0


@dataclass(frozen=True)
class ContentPhysics:
    damping: float = 2.0
    restitution: float = 0.2
    gravity: float = 9.81
    dt: float = SIM_DT
    convention: str = "center"
    # -1: positive leader pitch lowers the front rim
    pitch_sign: float = -1.0

    def __post_init__(self):
        if self.dt > SIM_DT + 1e-15:
            raise ContractError("simulation step must not exceed 1 ms")
        if self.convention not in ("center", "front"):
            raise ContractError("convention must be 'center' or 'front'")
        if self.pitch_sign not in (-1.0, 1.0):
            raise ContractError("pitch_sign must be +1 or -1")


@dataclass(frozen=True)
class ContentState:
    """Content center in the wok frame; ``vel`` is relative to the wok."""

    pos: tuple = (0.0, 0.0)
    vel: tuple = (0.0, 0.0)
    airborne: bool = False
    clamped: bool = False

    @classmethod
    def resting(cls, geom, r=0.0):
        return cls((r, geom.surface(r)), (0.0, 0.0))


@dataclass(frozen=True)
class WokKinematics:
    """Wok center position/velocity/acceleration (forward, vertical) and pitch."""

    pos: tuple = (0.0, 0.0)
    vel: tuple = (0.0, 0.0)
    acc: tuple = (0.0, 0.0)
    pitch: float = 0.0
    pitch_rate: float = 0.0


def _rot(theta, x, z):
    c, s = math.cos(theta), math.sin(theta)
    return c * x - s * z, s * x + c * z


def _rot_t(theta, x, z):
    c, s = math.cos(theta), math.sin(theta)
    return c * x + s * z, -s * x + c * z


def effective_field(kin, gravity):
    """Gravity minus wok acceleration, expressed in the wok frame."""
    return _rot_t(kin.pitch, -kin.acc[0], -gravity - kin.acc[1])


def _slide_acc(s, sd, ax, az, k, c):
    q = 1.0 + k * k * s * s
    return (ax + az * k * s - k * k * s * sd * sd) / q - c * sd


def normal_force(s, sd, ax, az, k):
    """Normal reaction per unit mass needed to keep the mass on the bowl."""
    q = 1.0 + k * k * s * s
    sq = math.sqrt(q)
    curv = k / (q * sq)
    return curv * sd * sd * q - (-k * s * ax + az) / sq


def content_energy(state, geom, gravity=9.81):
    """Kinetic plus potential energy per unit mass in a static, level wok."""
    vx, vz = state.vel
    return 0.5 * (vx * vx + vz * vz) + gravity * state.pos[1]


def _to_world(kin, state):
    rx, rz = state.pos
    wx, wz = _rot(kin.pitch, rx, rz)
    vx, vz = _rot(kin.pitch, *state.vel)
    jx, jz = _rot(kin.pitch, -rz, rx)
    w = kin.pitch_rate
    return (kin.pos[0] + wx, kin.pos[1] + wz), (kin.vel[0] + vx + w * jx, kin.vel[1] + vz + w * jz)


def _from_world(kin, pw, vw):
    rx, rz = _rot_t(kin.pitch, pw[0] - kin.pos[0], pw[1] - kin.pos[1])
    vx, vz = _rot_t(kin.pitch, vw[0] - kin.vel[0], vw[1] - kin.vel[1])
    w = kin.pitch_rate
    return (rx, rz), (vx + w * rz, vz - w * rx)


def _contact_state(s, sd, k):
    return ContentState((s, k * s * s / 2.0), (sd, k * s * sd), False, False)


def _clamp(state, geom):
    r = state.pos[0]
    if abs(r) <= geom.radius:
        return state
    s = math.copysign(geom.radius, r)
    return ContentState((s, geom.surface(s)), (0.0, 0.0), False, True)


def step_dynamics(kin, state, dt, geom=WokGeom(), physics=ContentPhysics(), kin_next=None):
    """Advance the content by ``dt`` given the wok motion at the start of the step.

    ``kin_next`` (wok kinematics at the end of the step) is only needed to
    map a ballistic flight back into the wok frame; it defaults to ``kin``.
    """
    if dt > SIM_DT + 1e-15:
        raise ContractError("dt must not exceed 1 ms")
    k, c, g = geom.curvature, physics.damping, physics.gravity
    kin_next = kin if kin_next is None else kin_next
    if not state.airborne:
        s = state.pos[0]
        sd = state.vel[0]
        ax, az = effective_field(kin, g)
        if normal_force(s, sd, ax, az, k) >= 0.0:
            f = lambda s_, v_: _slide_acc(s_, v_, ax, az, k, c)  # noqa: E731
            k1s, k1v = sd, f(s, sd)
            k2s, k2v = sd + 0.5 * dt * k1v, f(s + 0.5 * dt * k1s, sd + 0.5 * dt * k1v)
            k3s, k3v = sd + 0.5 * dt * k2v, f(s + 0.5 * dt * k2s, sd + 0.5 * dt * k2v)
            k4s, k4v = sd + dt * k3v, f(s + dt * k3s, sd + dt * k3v)
            s_new = s + dt / 6.0 * (k1s + 2 * k2s + 2 * k3s + k4s)
            sd_new = sd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            return _clamp(_contact_state(s_new, sd_new, k), geom)
        state = replace(state, airborne=True)

    pw, vw = _to_world(kin, state)
    vw = (vw[0], vw[1] - g * dt)
    pw = (pw[0] + vw[0] * dt, pw[1] + vw[1] * dt)
    (rx, rz), (vx, vz) = _from_world(kin_next, pw, vw)
    if abs(rx) > geom.radius:
        return _clamp(ContentState((rx, rz), (vx, vz), False), geom)
    if rz > geom.surface(rx):
        return ContentState((rx, rz), (vx, vz), True)
    # touched down: split relative velocity along the bowl tangent and normal
    q = math.sqrt(1.0 + k * k * rx * rx)
    tx, tz = 1.0 / q, k * rx / q
    nx, nz = -k * rx / q, 1.0 / q
    vt = vx * tx + vz * tz
    vn = vx * nx + vz * nz
    bounce = -physics.restitution * vn if vn < 0 else vn
    if bounce < RECONTACT_SPEED:
        return _contact_state(rx, vt / q, k)
    s = rx
    return ContentState((s, geom.surface(s)), (vt * tx + bounce * nx, vt * tz + bounce * nz), True)


def relative_displacement(state, geom=WokGeom(), convention="center"):
    """Content offset from the wok center as a fraction of the radius, in [0, 1].

    ``convention="front"`` maps the front rim to 0 and the back rim to 1.
    """
    r = state.pos[0]
    if convention == "front":
        d = (geom.radius - r) / (2.0 * geom.radius)
    else:
        d = abs(r) / geom.radius
    return min(max(d, 0.0), 1.0)


# -- trajectories ----------------------------------------------------------------


def wok_kinematics(left, forward_axis="x", pitch_sign=-1.0):
    """Sampled wok kinematics from a leader trajectory.

    Columns: forward, vertical, their velocities and accelerations, pitch
    and pitch rate (pitch multiplied by ``pitch_sign``).
    """
    fwd = left.poses[:, AXIS_INDEX[forward_axis]]
    up = left.poses[:, 2]
    pitch = pitch_sign * left.poses[:, 4]
    dt = left.dt
    vx, vz = np.gradient(fwd, dt), np.gradient(up, dt)
    ax, az = np.gradient(vx, dt), np.gradient(vz, dt)
    wp = np.gradient(pitch, dt)
    return np.stack([fwd, up, vx, vz, ax, az, pitch, wp], axis=1)


@dataclass
class DisplacementTrace:
    t: np.ndarray
    d: np.ndarray
    phase: np.ndarray
    clamp_events: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,d,phase\n")
            for t, d, p in zip(self.t, self.d, self.phase):
                fh.write(f"{t:.17g},{d:.17g},{p}\n")


@dataclass
class SimResult:
    trace: DisplacementTrace
    cycle_max: list
    cycles: list

    @property
    def mean_max(self):
        return float(np.mean(self.cycle_max)) if self.cycle_max else float("nan")


def simulate_cycle(left, geom=WokGeom(), state0=None, physics=ContentPhysics(), forward_axis="x",
                   require_cycles=True):
    """Drive the content with a leader trajectory; per-cycle maxima of the displacement.

    Segmentation errors propagate unless ``require_cycles`` is false, in
    which case every sample is labelled phase ``a`` and no maxima are
    reported.
    """
    try:
        cycles = segment_phases(left, forward_axis)
    except NoCyclesError:
        if require_cycles:
            raise
        cycles = []
    kin = wok_kinematics(left, forward_axis, physics.pitch_sign)
    n_sub = max(1, int(math.ceil(left.dt / physics.dt - 1e-9)))
    h = left.dt / n_sub
    state = ContentState.resting(geom) if state0 is None else state0
    d = np.empty(len(left))
    d[0] = relative_displacement(state, geom, physics.convention)
    clamps = []
    for i in range(len(left) - 1):
        k0, k1 = kin[i], kin[i + 1]
        for j in range(n_sub):
            a0 = j / n_sub
            a1 = (j + 1) / n_sub
            row0 = k0 + a0 * (k1 - k0)
            row1 = k0 + a1 * (k1 - k0)
            kn = WokKinematics((row0[0], row0[1]), (row0[2], row0[3]), (row0[4], row0[5]), row0[6], row0[7])
            kn1 = WokKinematics((row1[0], row1[1]), (row1[2], row1[3]), (row1[4], row1[5]), row1[6], row1[7])
            state = step_dynamics(kn, state, h, geom, physics, kin_next=kn1)
            if state.clamped:
                clamps.append(float(left.t[i] + a1 * left.dt))
        d[i + 1] = relative_displacement(state, geom, physics.convention)
    phases = phase_labels(len(left), cycles)
    cycle_max = [float(d[c.b_start:c.d_end].max()) for c in cycles]
    return SimResult(DisplacementTrace(left.t.copy(), d, phases, clamps), cycle_max, cycles)


# -- closed loop -------------------------------------------------------------------


@dataclass
class LoopConfig:
    target: float = None
    band: float = 0.1
    gain: float = 1.0
    max_iter: int = 10
    initial_amplitude: float = 1.0
    max_step: float = 0.2
    cycles: int = 2
    rest_before: float = 0.2
    rest_after: float = 0.3

    def __post_init__(self):
        if self.target is not None and not 0.0 < self.target < 1.0:
            raise ContractError("target displacement must lie in (0, 1)")
        if not self.band > 0:
            raise ContractError("band must be positive")
        if self.gain < 0:
            raise ContractError("gain must be non-negative")
        if self.max_iter < 1:
            raise ContractError("max_iter must be at least 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class LoopResult:
    log: list
    converged: bool
    best: dict


def demo_target(leader, geom=WokGeom(), physics=ContentPhysics()):
    """Mean per-cycle maximum displacement produced by a demonstration leader."""
    return simulate_cycle(leader, geom, physics=physics).mean_max


def closed_loop(chain, follower_fn, loop, geom=WokGeom(), physics=ContentPhysics(), out_dir=None):
    """Adjust the push amplitude until the displacement target is met.

    Each iteration rolls out the chained leader primitives at the current
    amplitude, generates the follower with ``follower_fn(leader)`` (may be
    ``None``), simulates the content and compares the mean per-cycle
    maximum with the target. The amplitude is multiplied by
    ``1 + gain * (target - d) / target``, limited to ``1 +- max_step``.
    """
    target = loop.target
    if target is None:
        target = demo_target(chain.rollout(cycles=loop.cycles, rest_before=loop.rest_before,
                                           rest_after=loop.rest_after), geom, physics)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    amp = loop.initial_amplitude
    entries = []
    best = None
    converged = False
    for it in range(loop.max_iter):
        leader = chain.rollout(cycles=loop.cycles, amplitude=amp, rest_before=loop.rest_before,
                               rest_after=loop.rest_after)
        follower = follower_fn(leader) if follower_fn is not None else None
        sim = simulate_cycle(leader, geom, physics=physics)
        d = sim.mean_max
        err = abs(d - target)
        converged = err <= loop.band * target
        entry = {"iter": it, "amplitude": amp, "mean_max_d": d, "target": target, "converged": converged}
        if out_dir:
            names = {"left": f"iter{it:02d}_left.csv", "trace": f"iter{it:02d}_trace.csv"}
            write_seq(os.path.join(out_dir, names["left"]), leader)
            sim.trace.write_csv(os.path.join(out_dir, names["trace"]))
            if follower is not None:
                names["right"] = f"iter{it:02d}_right.csv"
                write_seq(os.path.join(out_dir, names["right"]), follower)
            entry.update(names)
        entries.append(entry)
        if best is None or err < abs(best["mean_max_d"] - target):
            best = entry
        if converged:
            break
        factor = 1.0 + loop.gain * (target - d) / target
        amp *= min(max(factor, 1.0 - loop.max_step), 1.0 + loop.max_step)
    if out_dir:
        with open(os.path.join(out_dir, "loop_log.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    return LoopResult(entries, converged, best)
