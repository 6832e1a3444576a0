"""Alignment losses, scale augmentation and the teacher-forced training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .demo_gen import TEST_SCALES, TRAIN_SCALES, VAL_SCALES
from .exceptions import ContractError, DivergenceError
from .tensor import Adam, Tensor
from .trajectory import PoseSeq, apply_norm, fit_norm_stats, invert_norm, load_pairs
from .transducer import TransducerModel, shift_right

log = logging.getLogger(__name__)


# -- dynamic time warping ------------------------------------------------------


def _pairwise_sq(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ContractError("DTW needs non-empty sequences")
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def dtw(a, b):
    """Exact DTW with squared Euclidean local cost.

    Returns ``(cost, path)`` where ``path`` is the list of aligned index
    pairs from ``(0, 0)`` to ``(n-1, m-1)``. Ties prefer the diagonal step,
    then the step in ``a``.
    """
    C = _pairwise_sq(a, b)
    n, m = C.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        Ci = C[i - 1]
        Dp, Dc = D[i - 1], D[i]
        for j in range(1, m + 1):
            best = Dp[j - 1]
            if Dp[j] < best:
                best = Dp[j]
            if Dc[j - 1] < best:
                best = Dc[j - 1]
            Dc[j] = Ci[j - 1] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        cands = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(cands, key=lambda ij: D[ij])
        path.append((i - 1, j - 1))
    return float(D[n, m]), path[::-1]


def _sdtw_forward(C, gamma):
    n, m = C.shape
    R = np.full((n + 2, m + 2), np.inf)
    R[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        r = np.stack([R[i - 1, j - 1], R[i - 1, j], R[i, j - 1]]) * (-1.0 / gamma)
        rmax = r.max(axis=0)
        R[i, j] = C[i - 1, j - 1] - gamma * (np.log(np.exp(r - rmax).sum(axis=0)) + rmax)
    return R


def _sdtw_backward(C, R, gamma):
    n, m = C.shape
    Dp = np.zeros((n + 2, m + 2))
    Dp[1:n + 1, 1:m + 1] = C
    R = R.copy()
    R[:, m + 1] = -np.inf
    R[n + 1, :] = -np.inf
    R[n + 1, m + 1] = R[n, m]
    E = np.zeros((n + 2, m + 2))
    E[n + 1, m + 1] = 1.0
    for k in range(n + m, 1, -1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        Rij = R[i, j]
        a = np.exp((R[i + 1, j] - Rij - Dp[i + 1, j]) / gamma)
        b = np.exp((R[i, j + 1] - Rij - Dp[i, j + 1]) / gamma)
        c = np.exp((R[i + 1, j + 1] - Rij - Dp[i + 1, j + 1]) / gamma)
        E[i, j] = E[i + 1, j] * a + E[i, j + 1] * b + E[i + 1, j + 1] * c
    return E[1:n + 1, 1:m + 1]


def soft_dtw(a, b, gamma):
    """Soft-DTW with soft-min temperature ``gamma`` as a differentiable tensor op.

    ``a`` (n, d) and ``b`` (m, d) may be tensors or arrays; the result is a
    scalar tensor whose gradient reaches whichever inputs require it.
    """
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    C = _pairwise_sq(a.data, b.data)
    R = _sdtw_forward(C, gamma)

    def vjp(g):
        E = _sdtw_backward(C, R, gamma) * float(g.reshape(-1)[0])
        ga = 2.0 * (a.data * E.sum(axis=1)[:, None] - E @ b.data)
        gb = 2.0 * (b.data * E.sum(axis=0)[:, None] - E.T @ a.data)
        return ga, gb

    return Tensor._result(np.asarray(R[C.shape[0], C.shape[1]]), (a, b), vjp)


def soft_dtw_divergence(a, b, gamma):
    """``sdtw(a, b) - (sdtw(a, a) + sdtw(b, b)) / 2``; zero for identical inputs."""
    return soft_dtw(a, b, gamma) - (soft_dtw(a, a, gamma) + soft_dtw(b, b, gamma)) * 0.5


def normalized_dtw(a, b, stats):
    """DTW between z-normalized sequences divided by path length and pose dimension."""
    a = a.poses if isinstance(a, PoseSeq) else np.asarray(a, dtype=float)
    b = b.poses if isinstance(b, PoseSeq) else np.asarray(b, dtype=float)
    cost, path = dtw(apply_norm(a, stats), apply_norm(b, stats))
    return cost / (len(path) * a.shape[1])


# -- augmentation ----------------------------------------------------------------


def scale_about_rest(seq, scale, scale_orientation=False):
    """Scale displacements from the first (rest) pose."""
    poses = seq.poses if isinstance(seq, PoseSeq) else np.asarray(seq, dtype=float)
    cols = slice(0, 6) if scale_orientation else slice(0, 3)
    out = poses.copy()
    out[:, cols] = poses[0, cols] + scale * (poses[:, cols] - poses[0, cols])
    return seq.with_poses(out) if isinstance(seq, PoseSeq) else out


def augment_scales(dataset, scales, scale_orientation=False):
    """Every ``(left, right)`` pair at every scale, as ``(left, right, scale)`` triples."""
    out = []
    for left, right in dataset:
        for s in scales:
            if not s > 0:
                raise ContractError(f"scales must be positive, got {s}")
            out.append((scale_about_rest(left, s, scale_orientation),
                        scale_about_rest(right, s, scale_orientation), float(s)))
    return out


# -- configuration and reports -------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-3
    warmup_epochs: int = 5
    dropout: float = 0.1
    gamma: float = 0.1
    input_noise: float = 0.0
    rollout_mix: float = 1.0
    train_scales: tuple = TRAIN_SCALES
    val_scales: tuple = VAL_SCALES
    test_scales: tuple = TEST_SCALES
    scale_orientation: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ContractError("warmup_epochs must be smaller than epochs")
        if not self.gamma > 0:
            raise ContractError("gamma must be positive")
        if self.input_noise < 0:
            raise ContractError("input_noise must be non-negative")
        if not 0.0 <= self.rollout_mix <= 1.0:
            raise ContractError("rollout_mix must lie in [0, 1]")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        for s in (*self.train_scales, *self.val_scales, *self.test_scales):
            if not s > 0:
                raise ContractError("scales must be positive")
        self.train_scales = tuple(self.train_scales)
        self.val_scales = tuple(self.val_scales)
        self.test_scales = tuple(self.test_scales)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricReport:
    train_loss: list = field(default_factory=list)
    val_ndtw: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    test_ndtw: float = float("nan")
    wall_clock: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: TransducerModel
    stats_left: object
    stats_right: object
    report: MetricReport
    optimizer: Adam
    epoch: int


def learning_rate(epoch, base, warmup):
    """Linear warm-up over ``warmup`` epochs, then ``base * warmup / epoch``; epochs count from 1."""
    if epoch <= warmup:
        return base * epoch / warmup
    return base * warmup / epoch


# -- training --------------------------------------------------------------------


def _as_array(s):
    return s.poses if isinstance(s, PoseSeq) else np.asarray(s, dtype=float)


def _pad(batch):
    L = max(len(x) for x in batch)
    out = np.zeros((len(batch), L, 6))
    for k, x in enumerate(batch):
        out[k, : len(x)] = x
        out[k, len(x):] = x[-1]
    return out


def teacher_forced_loss(model, lefts, rights, gamma, training=False, rng=None, input_noise=0.0,
                        dec_sources=None):
    """Mean over the batch of the soft-DTW divergence per sample and dimension.

    Inputs are normalized arrays; sequences are padded to the batch maximum
    and each loss term only sees its own unpadded extent. ``input_noise``
    perturbs the shifted follower fed to the decoder (training only), which
    keeps the model from leaning on its own previous output.
    ``dec_sources`` replaces the follower sequences that are shifted into
    the decoder input.
    """
    left = _pad(lefts)
    right = _pad(rights)
    dec_in = shift_right(right if dec_sources is None else _pad(dec_sources))
    if training and input_noise > 0:
        dec_in = dec_in.copy()
        dec_in[:, 1:] += input_noise * rng.standard_normal(dec_in[:, 1:].shape)
    pred = model.forward(left, dec_in, training=training, rng=rng)
    terms = []
    for k, r in enumerate(rights):
        L = len(r)
        d = soft_dtw_divergence(pred[k, :L], Tensor(right[k, :L]), gamma)
        terms.append(d * (1.0 / (L * r.shape[1])))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(terms))


def _mix_rollout(model, left_n, right_n, fraction, rng):
    """Follower with a random ``fraction`` of samples taken from the model's own rollout."""
    try:
        own = model.generate(left_n)
    except DivergenceError:
        return right_n
    pick = rng.random(len(right_n)) < fraction
    return np.where(pick[:, None], own, right_n)


def rollout_ndtw(model, pairs_norm, stats_right):
    """Mean normalized DTW of autoregressive rollouts on normalized pairs."""
    vals = []
    for left, right in pairs_norm:
        pred = model.generate(left)
        vals.append(normalized_dtw(invert_norm(pred, stats_right), invert_norm(right, stats_right), stats_right))
    return float(np.mean(vals))


def _snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def _restore(model, snap):
    for k, v in snap.items():
        model.params[k].data[...] = v


def train(model, train_pairs, cfg, val_pairs=None, verbose=False, metrics_path=None,
          start_epoch=0, optimizer_state=None, stats=None, on_epoch=None):
    """Teacher-forced soft-DTW training with per-epoch autoregressive validation.

    ``train_pairs`` / ``val_pairs`` are ``(left, right)`` sequences in
    physical units. Normalization statistics are fitted on ``train_pairs``
    only unless ``stats`` (left, right) is given, e.g. when resuming. The
    returned model carries the parameters of the best validation epoch (the
    last epoch without validation data).
    """
    t_start = time.perf_counter()
    lefts = [_as_array(l) for l, _ in train_pairs]
    rights = [_as_array(r) for _, r in train_pairs]
    if not lefts:
        raise ContractError("training set is empty")
    if stats is None:
        stats = (fit_norm_stats(lefts), fit_norm_stats(rights))
    stats_left, stats_right = stats
    lefts_n = [apply_norm(x, stats_left) for x in lefts]
    rights_n = [apply_norm(x, stats_right) for x in rights]
    val_n = [(apply_norm(_as_array(l), stats_left), apply_norm(_as_array(r), stats_right))
             for l, r in (val_pairs or [])]

    if model.config.dropout != cfg.dropout:
        from .transducer import ModelConfig

        model.config = ModelConfig.from_dict({**model.config.to_dict(), "dropout": cfg.dropout})
    opt = Adam(model.parameters(), lr=cfg.lr)
    if optimizer_state is not None:
        opt.state = optimizer_state
    rng = np.random.default_rng(cfg.seed + start_epoch)
    report = MetricReport()
    best = (np.inf, _snapshot(model), start_epoch)
    sink = open(metrics_path, "a", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            lr = learning_rate(epoch, cfg.lr, cfg.warmup_epochs)
            opt.lr = lr
            order = rng.permutation(len(lefts_n))
            mix = cfg.rollout_mix * (epoch - 1) / max(cfg.epochs - 1, 1)
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                sources = None
                if mix > 0:
                    sources = [_mix_rollout(model, lefts_n[i], rights_n[i], mix, rng) for i in idx]
                opt.zero_grad()
                loss = teacher_forced_loss(model, [lefts_n[i] for i in idx], [rights_n[i] for i in idx],
                                           cfg.gamma, training=True, rng=rng, input_noise=cfg.input_noise,
                                           dec_sources=sources)
                value = loss.item()
                if not np.isfinite(value):
                    _restore(model, best[1])
                    raise DivergenceError(f"training diverged at epoch {epoch}", step=epoch)
                T.backward(loss)
                opt.step()
                losses.append(value)
            train_loss = float(np.mean(losses))
            val = rollout_ndtw(model, val_n, stats_right) if val_n else float("nan")
            if not val_n or val < best[0]:
                best = (val if val_n else np.inf, _snapshot(model), epoch)
            report.train_loss.append(train_loss)
            report.val_ndtw.append(val)
            report.lr.append(lr)
            row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_ndtw": val}
            if sink:
                sink.write(json.dumps(row, sort_keys=True) + "\n")
                sink.flush()
            if verbose:
                log.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, train_loss, val)
            if on_epoch is not None:
                on_epoch(epoch, model, opt)
    finally:
        if sink:
            sink.close()
    _restore(model, best[1])
    report.best_epoch = best[2]
    report.wall_clock = time.perf_counter() - t_start
    return TrainResult(model, stats_left, stats_right, report, opt, cfg.epochs)


def split_pairs(manifest_path):
    """``{split: [(left, right, entry), ...]}`` from a dataset manifest."""
    out = {"train": [], "val": [], "test": []}
    for left, right, entry in load_pairs(manifest_path):
        out.setdefault(entry.get("split", "train"), []).append((left, right, entry))
    return out


def evaluate(model, left, right, stats_left, stats_right):
    """Autoregressive rollout for one pair with its normalized DTW and per-dimension RMSE."""
    from .transducer import rollout_autoregressive

    pred = rollout_autoregressive(left, model, stats_left, stats_right)
    rmse = np.sqrt(((pred.poses - right.poses) ** 2).mean(axis=0))
    return {
        "ndtw": normalized_dtw(pred, right, stats_right),
        "rmse": [float(v) for v in rmse],
        "length": len(pred),
        "prediction": pred,
    }
