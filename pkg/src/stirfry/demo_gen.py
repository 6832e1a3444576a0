"""Synthetic stir-fry demonstrations with a known leader->follower coupling."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import ContractError, StirfryError
from .trajectory import CANONICAL_DT, PhaseCycle, PoseSeq, write_manifest, write_seq

TRAIN_SCALES = tuple(round(0.5 + 0.1 * k, 2) for k in range(11))
VAL_SCALES = (0.65, 0.75)
TEST_SCALES = (0.85,)


@dataclass
class DemoSpec:
    """Parameters of the synthetic leader cycle and the follower coupling."""

    cycles: int = 2
    dur_b: float = 0.35
    dur_c: float = 0.25
    dur_d: float = 0.30
    rest_before: float = 0.2
    rest_after: float = 0.1
    push_amplitude: float = 0.08
    lift_height: float = 0.02
    toss_pitch: float = 0.35
    lag: float = 0.05
    contact_depth: float = 0.03
    stir_radius: float = 0.04
    noise_pos: float = 1e-3
    noise_ang: float = float(np.deg2rad(0.5))
    seed: int = 0
    dt: float = CANONICAL_DT
    leader_rest: list = field(default_factory=lambda: [0.45, 0.29, 0.20, 0.0, 0.0, 0.0])
    follower_offset: list = field(default_factory=lambda: [0.02, -0.08, 0.10, 0.3, -0.4, 0.2])

    def __post_init__(self):
        for name in ("dur_b", "dur_c", "dur_d", "dt"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.cycles < 1:
            raise ContractError("cycles must be at least 1")
        if self.push_amplitude < 0 or self.toss_pitch < 0 or self.lift_height < 0:
            raise ContractError("amplitudes must be non-negative")
        if not 0 <= self.lag < self.dur_b:
            raise ContractError("lag must lie in [0, dur_b)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown demo spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    # sample counts for each segment
    def counts(self):
        n = lambda s: int(round(s / self.dt))  # noqa: E731
        return n(self.rest_before), n(self.dur_b), n(self.dur_c), n(self.dur_d), n(self.rest_after)


def min_jerk(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


def _timeline(spec):
    n_a, n_b, n_c, n_d, n_z = spec.counts()
    n_cycle = n_b + n_c + n_d
    n = n_a + spec.cycles * n_cycle + n_z + 1
    return n, n_a, n_b, n_c, n_d, n_cycle


def leader_boundaries(spec):
    """Ground-truth phase boundaries of :func:`gen_leader` output."""
    _, n_a, n_b, n_c, n_d, n_cycle = _timeline(spec)
    out = []
    for k in range(spec.cycles):
        b = n_a + k * n_cycle
        out.append(PhaseCycle(b, b + n_b, b + n_b + n_c, b + n_cycle))
    return out


def phase_clock(spec, t):
    """Phase letter and in-phase progress ``u`` for times ``t`` (seconds)."""
    t = np.asarray(t, dtype=float)
    period = spec.dur_b + spec.dur_c + spec.dur_d
    rel = t - spec.rest_before
    k = np.floor(rel / period)
    tc = rel - k * period
    active = (rel >= 0) & (k < spec.cycles)
    phase = np.full(t.shape, "a", dtype="<U1")
    u = np.zeros(t.shape)
    in_b = active & (tc < spec.dur_b)
    in_c = active & (tc >= spec.dur_b) & (tc < spec.dur_b + spec.dur_c)
    in_d = active & (tc >= spec.dur_b + spec.dur_c)
    phase[in_b], u[in_b] = "b", tc[in_b] / spec.dur_b
    phase[in_c], u[in_c] = "c", (tc[in_c] - spec.dur_b) / spec.dur_c
    phase[in_d], u[in_d] = "d", (tc[in_d] - spec.dur_b - spec.dur_c) / spec.dur_d
    return phase, u


def gen_leader(spec):
    """Rest, then ``cycles`` x (push, rotate, pull), then rest.

    The forward push follows a minimum-jerk profile to ``push_amplitude``;
    the pull-back spans rotate and pull as one minimum-jerk return; pitch
    rises to ``toss_pitch`` during rotate and returns during pull.
    """
    n = _timeline(spec)[0]
    t = np.arange(n) * spec.dt
    phase, u = phase_clock(spec, t)
    frac_c = spec.dur_c / (spec.dur_c + spec.dur_d)
    fwd = np.zeros(n)
    pitch = np.zeros(n)
    fwd[phase == "b"] = min_jerk(u[phase == "b"])
    back_u = np.where(phase == "c", u * frac_c, frac_c + u * (1.0 - frac_c))
    pull = (phase == "c") | (phase == "d")
    fwd[pull] = 1.0 - min_jerk(back_u[pull])
    pitch[phase == "c"] = min_jerk(u[phase == "c"])
    pitch[phase == "d"] = 1.0 - min_jerk(u[phase == "d"])

    A, H, th = spec.push_amplitude, spec.lift_height, spec.toss_pitch
    poses = np.tile(np.asarray(spec.leader_rest, dtype=float), (n, 1))
    poses[:, 0] += A * fwd
    poses[:, 1] += 0.1 * A * fwd
    poses[:, 2] += H * fwd
    poses[:, 3] += 0.1 * th * pitch
    poses[:, 4] += th * pitch
    poses[:, 5] += -0.05 * th * pitch
    return PoseSeq(t, poses)


def gen_follower(leader, spec, noise=True, rng=None):
    """Spatula trajectory as a fixed function of the lagged leader pose.

    Contact phases (b, d) add a stir arc of ``stir_radius`` pressed
    ``contact_depth`` into the wok; the rotate phase lifts by
    ``contact_depth``. The lateral offset and the orientation follow the
    leader pitch; every modulation scales with ``stir_radius`` or
    ``contact_depth``, so with both zero the follower is the lagged leader
    plus a constant offset.
    """
    t = leader.t
    tl = np.clip(t - spec.lag, t[0], None)
    lagged = np.stack([np.interp(tl, t, leader.poses[:, k]) for k in range(6)], axis=1)
    phase, u = phase_clock(spec, tl - t[0])
    bump = np.sin(np.pi * u) * (phase != "a")
    sign = np.select([phase == "b", phase == "d"], [1.0, -1.0], 0.0)
    contact = (phase == "b") | (phase == "d")
    lift = phase == "c"
    lp = lagged[:, 4] - spec.leader_rest[4]

    R, D = spec.stir_radius, spec.contact_depth
    out = lagged + np.asarray(spec.follower_offset, dtype=float)
    out[:, 0] += R * sign * bump
    out[:, 1] += 0.5 * R * np.sin(lp)
    out[:, 2] += -D * bump * contact + D * bump * lift
    out[:, 3] += 20.0 * R * lp
    out[:, 4] += -12.5 * R * lp + 10.0 * D * bump * contact
    out[:, 5] += 10.0 * R * sign * bump
    if noise:
        rng = np.random.default_rng(spec.seed) if rng is None else rng
        std = np.array([spec.noise_pos] * 3 + [spec.noise_ang] * 3)
        out = out + rng.standard_normal(out.shape) * std
    return PoseSeq(t, out)


def gen_dataset(spec, out_dir, train_scales=TRAIN_SCALES, val_scales=VAL_SCALES,
                test_scales=TEST_SCALES, scale_orientation=False):
    """Write scaled demo pairs and a manifest; return the manifest path.

    The noiseless base pair is scaled about its rest poses and each scaled
    follower receives its own seeded capture noise.
    """
    from .training import augment_scales

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise StirfryError(f"cannot create output directory {out_dir}: {exc}") from exc
    leader = gen_leader(spec)
    follower = gen_follower(leader, spec, noise=False)
    rng = np.random.default_rng(spec.seed)
    std = np.array([spec.noise_pos] * 3 + [spec.noise_ang] * 3)
    entries = []
    for split, scales in (("train", train_scales), ("val", val_scales), ("test", test_scales)):
        for left, right, scale in augment_scales([(leader, follower)], scales, scale_orientation):
            right = right.with_poses(right.poses + rng.standard_normal(right.poses.shape) * std)
            stem = f"{split}_s{scale:.2f}"
            names = {"left": f"{stem}_left.csv", "right": f"{stem}_right.csv"}
            for key, seq in (("left", left), ("right", right)):
                path = os.path.join(out_dir, names[key])
                try:
                    write_seq(path, seq)
                except OSError as exc:
                    raise StirfryError(f"cannot write {path}: {exc}") from exc
            entries.append({"left": names["left"], "right": names["right"], "scale": scale, "split": split})
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, entries, spec=spec.to_dict())
    return manifest
