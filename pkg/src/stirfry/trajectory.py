"""6-DoF pose sequences: data model, phase segmentation, scaling and I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, NoCyclesError, ParseError
from .validation import check_pose_array

POSE_FIELDS = ("x", "y", "z", "roll", "pitch", "yaw")
ANGLE_COLUMNS = (3, 4, 5)
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
CSV_HEADER = "t," + ",".join(POSE_FIELDS)
CANONICAL_DT = 0.01
SPACING_TOL = 1e-9
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Pose6D:
    """End-effector pose: position in meters, roll/pitch/yaw in radians."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ContractError(f"pose components must be finite: {self}")

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw], dtype=float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(6)
        return cls(*(float(v) for v in arr))


def unwrap_angles(poses):
    out = np.array(poses, dtype=float, copy=True)
    out[:, ANGLE_COLUMNS] = np.unwrap(out[:, ANGLE_COLUMNS], axis=0)
    return out


class PoseSeq:
    """Uniformly sampled pose trajectory.

    Parameters
    ----------
    t : array of shape (n,)
        Strictly increasing timestamps, uniform spacing.
    poses : array of shape (n, 6)
        Rows of ``(x, y, z, roll, pitch, yaw)``. Angle columns are unwrapped
        on construction unless ``unwrap`` is false.
    """

    __slots__ = ("t", "poses", "dt")

    def __init__(self, t, poses, unwrap=True):
        t = np.array(t, dtype=float, copy=True).reshape(-1)
        poses = check_pose_array(poses)
        if len(t) != len(poses):
            raise ContractError(f"{len(t)} timestamps for {len(poses)} poses")
        if len(t) < 2:
            raise ContractError("a pose sequence needs at least 2 samples")
        if not np.all(np.isfinite(t)):
            raise ContractError("timestamps must be finite")
        steps = np.diff(t)
        dt = float(steps[0])
        if dt <= 0 or np.any(steps <= 0):
            raise ContractError("timestamps must be strictly increasing")
        if np.any(np.abs(steps - dt) > SPACING_TOL):
            raise ContractError("timestamps must be uniformly spaced")
        poses = unwrap_angles(poses) if unwrap else np.array(poses, dtype=float, copy=True)
        t.flags.writeable = False
        poses.flags.writeable = False
        self.t = t
        self.poses = poses
        self.dt = dt

    @classmethod
    def from_poses(cls, poses, dt=CANONICAL_DT, t0=0.0):
        poses = np.asarray(poses, dtype=float)
        return cls(t0 + np.arange(len(poses)) * dt, poses)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return float(self.t[i]), Pose6D.from_array(self.poses[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, PoseSeq):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.poses, other.poses)

    def __repr__(self):
        return f"PoseSeq(n={len(self)}, dt={self.dt:g})"

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])

    def slice(self, start, stop):
        return PoseSeq(self.t[start:stop], self.poses[start:stop])

    def with_poses(self, poses):
        """Same timestamps, new values taken as-is (no angle unwrapping)."""
        return PoseSeq(self.t, poses, unwrap=False)


@dataclass(frozen=True)
class PhaseCycle:
    """Sample indices delimiting one push (b), rotate (c), pull (d) cycle.

    Phase b covers ``[b_start, c_start)``, c covers ``[c_start, d_start)``
    and d covers ``[d_start, d_end)``.
    """

    b_start: int
    c_start: int
    d_start: int
    d_end: int

    def __post_init__(self):
        if not (0 <= self.b_start < self.c_start < self.d_start < self.d_end):
            raise ContractError(f"phase boundaries out of order: {self}")

    def phase_slices(self):
        return {
            "b": slice(self.b_start, self.c_start),
            "c": slice(self.c_start, self.d_start),
            "d": slice(self.d_start, self.d_end),
        }


def phase_labels(n, cycles):
    """Per-sample phase letter; ``a`` outside every detected cycle."""
    labels = np.full(n, "a", dtype="<U1")
    for cyc in cycles:
        for name, sl in cyc.phase_slices().items():
            labels[sl] = name
    return labels


def _first(mask, start):
    idx = np.flatnonzero(mask[start:])
    return int(idx[0]) + start if idx.size else None


def segment_phases(seq, forward_axis="x", rest_tol=1e-3):
    """Split a leader trajectory into b/c/d cycles.

    Boundaries come from the forward-axis velocity ``v``, with ``rest_tol``
    times ``max|v|`` as the zero band:

    * b starts where ``v`` leaves the band upward (or at the previous cycle
      end);
    * c starts at the forward maximum, the first ``v <= 0`` after b;
    * d starts at the pitch extremum after c, or at the steepest pull-back
      when pitch does not move;
    * the cycle ends when the pull-back returns into the band.

    Trailing partial cycles are dropped.
    """
    if forward_axis not in AXIS_INDEX:
        raise ContractError(f"forward_axis must be one of x, y, z, got {forward_axis!r}")
    p = seq.poses[:, AXIS_INDEX[forward_axis]]
    v = np.gradient(p, seq.dt)
    vmax = np.abs(v).max()
    if vmax <= 1e-12:
        raise NoCyclesError("no cycles detected")
    eps = rest_tol * vmax
    pr = np.gradient(seq.poses[:, 4], seq.dt)
    prmax = np.abs(pr).max()
    eps_p = rest_tol * prmax
    pitch_active = prmax > 1e-9

    n = len(seq)
    cycles = []
    i = _first(v > eps, 0)
    while i is not None and i < n:
        b = i
        c = _first(v <= 0, b + 1)
        if c is None:
            break
        pulling = _first(v < -eps, c)
        if pulling is None:
            break
        end = _first(v >= -eps, pulling)
        if end is None:
            break
        d = None
        if pitch_active:
            m = _first(np.abs(pr) > eps_p, c)
            if m is not None and m < end:
                s0 = np.sign(pr[m])
                d = _first(s0 * pr <= 0, m)
            if d is not None and d >= end:
                d = None
        if d is None:
            d = c + int(np.argmin(v[c:end]))
        d = max(d, c + 1)
        if d < end:
            cycles.append(PhaseCycle(b, c, d, end))
        i = _first(v > eps, end)
    if not cycles:
        raise NoCyclesError("no cycles detected")
    return cycles


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ContractError("normalization std must be positive")

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def _stack(dataset):
    arrays = [s.poses if isinstance(s, PoseSeq) else check_pose_array(s) for s in dataset]
    if not arrays:
        raise ContractError("cannot fit normalization statistics on an empty dataset")
    return np.concatenate(arrays, axis=0)


def fit_norm_stats(dataset):
    """Per-dimension mean and (floored) standard deviation over all samples."""
    data = _stack(dataset)
    return NormStats(data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR))


def apply_norm(seq, stats):
    if isinstance(seq, PoseSeq):
        return seq.with_poses((seq.poses - stats.mean) / stats.std)
    return (np.asarray(seq, dtype=float) - stats.mean) / stats.std


def invert_norm(seq, stats):
    if isinstance(seq, PoseSeq):
        return seq.with_poses(seq.poses * stats.std + stats.mean)
    return np.asarray(seq, dtype=float) * stats.std + stats.mean


class PoseScaler(TransformerMixin, BaseEstimator):
    """z-score scaler over pose sequences; ``X`` is a list of sequences."""

    def __init__(self, std_floor=STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        data = _stack(X)
        self.stats_ = NormStats(data.mean(axis=0), np.maximum(data.std(axis=0), self.std_floor))
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return [apply_norm(s, self.stats_) for s in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return [invert_norm(s, self.stats_) for s in X]


# -- resampling --------------------------------------------------------------


def resample(seq, new_dt):
    """Linear interpolation onto a uniform grid starting at ``seq.t[0]``.

    The first sample is kept exactly; the last one is kept exactly when the
    duration is a whole number of ``new_dt`` steps, otherwise the grid stops
    at the last step inside the sequence.
    """
    if new_dt <= 0:
        raise ContractError("new_dt must be positive")
    if new_dt > seq.duration + SPACING_TOL:
        raise ContractError(f"new_dt={new_dt} exceeds the sequence duration {seq.duration}")
    n = int(np.floor(seq.duration / new_dt + 1e-9)) + 1
    t_new = seq.t[0] + np.arange(n) * new_dt
    if abs(t_new[-1] - seq.t[-1]) <= SPACING_TOL:
        t_new[-1] = seq.t[-1]
    t_new = np.minimum(t_new, seq.t[-1])
    cols = [np.interp(t_new, seq.t, seq.poses[:, k]) for k in range(6)]
    return PoseSeq(t_new, np.stack(cols, axis=1))


# -- file I/O ----------------------------------------------------------------


def write_seq(path, seq):
    lines = [CSV_HEADER]
    for t, row in zip(seq.t, seq.poses):
        lines.append(",".join(f"{v:.17g}" for v in (t, *row)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_seq(path):
    """Parse a trajectory CSV, reporting the first offending line on failure."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip().replace(" ", "") != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}", path=path, line=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ParseError(f"expected 7 columns, found {len(parts)}", path=path, line=lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", path=path, line=lineno) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite value", path=path, line=lineno)
        if rows and vals[0] <= rows[-1][1][0]:
            raise ParseError("timestamps are not strictly increasing", path=path, line=lineno)
        rows.append((lineno, vals))
    if len(rows) < 2:
        raise ParseError("a trajectory needs at least 2 samples", path=path)
    data = np.array([r[1] for r in rows])
    steps = np.diff(data[:, 0])
    bad = np.flatnonzero(np.abs(steps - steps[0]) > SPACING_TOL)
    if bad.size:
        raise ParseError("non-uniform sample spacing", path=path, line=rows[bad[0] + 1][0])
    return PoseSeq(data[:, 0], data[:, 1:])


def write_manifest(path, pairs, **meta):
    """Write a dataset manifest. ``pairs`` holds dicts with left/right/scale keys."""
    doc = dict(meta)
    doc["pairs"] = list(pairs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    """Return the manifest's pair entries with paths resolved against its folder."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path=path, line=exc.lineno) from None
    pairs = doc if isinstance(doc, list) else doc.get("pairs")
    if not isinstance(pairs, list):
        raise ParseError("manifest has no list of pairs", path=path)
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for k, entry in enumerate(pairs):
        try:
            item = dict(entry)
            item["left"] = os.path.join(base, entry["left"])
            item["right"] = os.path.join(base, entry["right"])
            item["scale"] = float(entry.get("scale", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"pair {k} is malformed ({exc})", path=path) from None
        out.append(item)
    return out


def load_pairs(manifest_path, split=None):
    """Read every ``(left, right, entry)`` triple of a manifest, optionally one split."""
    out = []
    for entry in read_manifest(manifest_path):
        if split is not None and entry.get("split") != split:
            continue
        out.append((read_seq(entry["left"]), read_seq(entry["right"]), entry))
    return out
