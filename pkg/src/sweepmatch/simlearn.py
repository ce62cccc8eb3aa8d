"""Sample mining, occlusion-aware triplet / BCE losses and the decision MLP.

The MLP scores a concatenated ``[reference | query]`` descriptor pair with
leaky-rectifier hidden layers and a logistic output. Gradients are written
out by hand; training is plain gradient descent.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    BadMagic,
    DimensionMismatch,
    DivergenceDetected,
    InputError,
    NoValidSamples,
    TruncatedFile,
    ZeroVector,
)
from .features import FeatureMap
from .io import atomic_write

PROB_EPS = 1e-12
MLPW_MAGIC = b"MLPW"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    neg_interval: tuple[int, int] = (1, 4)

    def __post_init__(self):
        if not 0 < self.margin < 2:
            raise InputError(f"margin must be in (0, 2), got {self.margin}")
        lo, hi = self.neg_interval
        if not 1 <= lo <= hi:
            raise InputError(f"bad negative interval {self.neg_interval}")


@dataclass(eq=False)
class SampleBatch:
    """Mined descriptors. Rows of ``ref_nocc``/``pos``/``neg`` belong together,
    as do rows of ``ref_occ``/``neg1``/``neg2``."""

    ref_nocc: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    ref_occ: np.ndarray
    neg1: np.ndarray
    neg2: np.ndarray
    nocc_ids: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    occ_ids: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    neg_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    occ_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        names = ("ref_nocc", "pos", "neg", "ref_occ", "neg1", "neg2")
        arrays = {n: np.asarray(getattr(self, n), dtype=np.float64) for n in names}
        c = next((a.shape[-1] for a in arrays.values() if a.size), 0)
        for name, arr in arrays.items():
            if arr.size == 0:
                arr = arr.reshape(0, c)
            elif arr.ndim == 1:
                arr = arr[None, :]
            setattr(self, name, arr)
        if not (len(self.ref_nocc) == len(self.pos) == len(self.neg)):
            raise InputError("non-occluded arrays differ in length")
        if not (len(self.ref_occ) == len(self.neg1) == len(self.neg2)):
            raise InputError("occluded arrays differ in length")

    @property
    def n_nocc(self) -> int:
        return len(self.ref_nocc)

    @property
    def n_occ(self) -> int:
        return len(self.ref_occ)

    @property
    def channels(self) -> int:
        for arr in (self.ref_nocc, self.ref_occ):
            if arr.size:
                return arr.shape[1]
        return 0


# --------------------------------------------------------------------------
# mining


def _row_gather(fmap: FeatureMap, rows: np.ndarray, xs: np.ndarray, with_values: bool = True):
    ys = rows.astype(np.float64)
    if with_values:
        vals, ok = kernels.bilinear_gather(fmap.values, fmap.valid_mask.astype(np.uint8), xs, ys)
        if fmap.unit_normalized and ok.any():
            norm = np.linalg.norm(vals, axis=1)
            ok &= norm > 1e-8
            vals[ok] /= norm[ok][:, None]
        return vals, ok
    dummy = np.zeros(fmap.valid_mask.shape + (1,))
    _, ok = kernels.bilinear_gather(dummy, fmap.valid_mask.astype(np.uint8), xs, ys)
    return None, ok


def _candidate_offsets(cfg: LossConfig) -> np.ndarray:
    lo, hi = cfg.neg_interval
    mags = np.arange(lo, hi + 1)
    return np.concatenate([-mags[::-1], mags])


def mine_samples(
    f_left: FeatureMap,
    f_right: FeatureMap,
    gt_disparity: np.ndarray,
    occ_mask: np.ndarray,
    cfg: LossConfig = LossConfig(),
    epoch_seed: int = 0,
    max_pixels: int | None = None,
) -> SampleBatch:
    """Draw positives and iteratively re-drawn negatives from an epipolar pair.

    A non-occluded left pixel ``(i, j)`` matches right position
    ``(i, j - d)``; its negative sits at an integer offset from that match,
    drawn uniformly over both sides of ``cfg.neg_interval`` among in-bounds,
    valid positions. Occluded pixels get two distinct negatives around
    ``j - d`` (or ``j`` where the disparity is not finite). Everything is a
    deterministic function of ``epoch_seed``.
    """
    if f_left.values.shape[:2] != f_right.values.shape[:2]:
        raise DimensionMismatch("feature maps differ in size")
    if f_left.channels != f_right.channels:
        raise DimensionMismatch("feature maps differ in channel count")
    h, w = f_left.values.shape[:2]
    disp = np.asarray(gt_disparity, dtype=np.float64)
    occ = np.asarray(occ_mask, dtype=bool)
    if disp.shape != (h, w) or occ.shape != (h, w):
        raise DimensionMismatch("disparity / occlusion shapes do not match features")
    rng = np.random.default_rng(epoch_seed)
    offsets = _candidate_offsets(cfg)
    k = len(offsets)

    cand_nocc = f_left.valid_mask & ~occ & np.isfinite(disp)
    cand_occ = f_left.valid_mask & occ
    rows_n, cols_n = np.nonzero(cand_nocc)
    rows_o, cols_o = np.nonzero(cand_occ)
    if max_pixels is not None:
        if len(rows_n) > max_pixels:
            pick = np.sort(rng.choice(len(rows_n), max_pixels, replace=False))
            rows_n, cols_n = rows_n[pick], cols_n[pick]
        if len(rows_o) > max_pixels:
            pick = np.sort(rng.choice(len(rows_o), max_pixels, replace=False))
            rows_o, cols_o = rows_o[pick], cols_o[pick]
    u_n = rng.random(len(rows_n))
    u_o = rng.random((len(rows_o), 2))

    # non-occluded
    match_x = cols_n - disp[rows_n, cols_n]
    pos, pos_ok = _row_gather(f_right, rows_n, match_x)
    cand_x = match_x[:, None] + offsets[None, :]
    _, cand_ok = _row_gather(f_right, np.repeat(rows_n, k), cand_x.ravel(), with_values=False)
    cand_ok = cand_ok.reshape(-1, k)
    n_cand = cand_ok.sum(axis=1)
    keep = pos_ok & (n_cand > 0)
    choice = np.minimum((u_n * n_cand).astype(np.int64), np.maximum(n_cand - 1, 0))
    # index of the choice-th valid candidate in each row
    csum = np.cumsum(cand_ok, axis=1)
    sel = np.argmax(csum > choice[:, None], axis=1)
    rows_n, cols_n = rows_n[keep], cols_n[keep]
    sel = sel[keep]
    neg_off = offsets[sel]
    neg, neg_ok = _row_gather(f_right, rows_n, match_x[keep] + neg_off)
    ref_n = f_left.values[rows_n, cols_n]
    good = neg_ok
    ref_n, pos_v, neg_v = ref_n[good], pos[keep][good], neg[good]
    nocc_ids = np.stack([rows_n[good], cols_n[good]], axis=1)
    neg_off = neg_off[good]

    # occluded
    d_o = disp[rows_o, cols_o]
    center = np.where(np.isfinite(d_o), cols_o - np.nan_to_num(d_o), cols_o.astype(np.float64))
    cand_x = center[:, None] + offsets[None, :]
    _, ok_o = _row_gather(f_right, np.repeat(rows_o, k), cand_x.ravel(), with_values=False)
    ok_o = ok_o.reshape(-1, k)
    cnt = ok_o.sum(axis=1)
    keep_o = cnt >= 2
    rows_o, cols_o, center, ok_o, cnt, u_o = rows_o[keep_o], cols_o[keep_o], center[keep_o], ok_o[keep_o], cnt[keep_o], u_o[keep_o]
    c1 = np.minimum((u_o[:, 0] * cnt).astype(np.int64), cnt - 1)
    c2 = np.minimum((u_o[:, 1] * (cnt - 1)).astype(np.int64), cnt - 2)
    c2 = c2 + (c2 >= c1)  # skip the first pick so the two are distinct
    csum = np.cumsum(ok_o, axis=1)
    s1 = np.argmax(csum > c1[:, None], axis=1)
    s2 = np.argmax(csum > c2[:, None], axis=1)
    off1, off2 = offsets[s1], offsets[s2]
    n1, ok1 = _row_gather(f_right, rows_o, center + off1)
    n2, ok2 = _row_gather(f_right, rows_o, center + off2)
    g = ok1 & ok2
    ref_o = f_left.values[rows_o[g], cols_o[g]]
    occ_ids = np.stack([rows_o[g], cols_o[g]], axis=1)

    if len(ref_n) == 0 and len(ref_o) == 0:
        raise NoValidSamples("no valid non-occluded or occluded samples")
    c = f_left.channels
    return SampleBatch(
        ref_n.reshape(-1, c), pos_v.reshape(-1, c), neg_v.reshape(-1, c),
        ref_o.reshape(-1, c), n1[g].reshape(-1, c), n2[g].reshape(-1, c),
        nocc_ids, occ_ids, neg_off, np.stack([off1[g], off2[g]], axis=1),
    )


# --------------------------------------------------------------------------
# losses


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ZeroVector("cosine similarity of a zero descriptor")
    return np.einsum("ij,ij->i", a, b) / (na * nb)


def triplet_loss(batch: SampleBatch, cfg: LossConfig = LossConfig()):
    """Occlusion-aware triplet loss. Returns ``(total, per_sample)`` where
    ``per_sample`` lists the non-occluded terms followed by the occluded ones."""
    s_pos = _cosine(batch.ref_nocc, batch.pos)
    s_neg = _cosine(batch.ref_nocc, batch.neg)
    s1 = _cosine(batch.ref_occ, batch.neg1)
    s2 = _cosine(batch.ref_occ, batch.neg2)
    nocc = np.maximum(s_neg - s_pos + cfg.margin, 0.0)
    occ = np.maximum(s1 + s2, 0.0)
    per = np.concatenate([nocc, occ])
    return float(per.sum()), per


@dataclass(eq=False)
class MlpParams:
    """Weights are stored ``(in, out)`` so a layer computes ``x @ W + b``."""

    weights: list
    biases: list
    slope: float = 0.01

    def __post_init__(self):
        self.weights = [np.asarray(wt, dtype=np.float64) for wt in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise InputError("need one bias vector per weight matrix")
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            if wt.ndim != 2 or wt.shape[1] != b.shape[0]:
                raise InputError(f"layer {i}: weight {wt.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != wt.shape[0]:
                raise InputError(f"layer {i}: input dim {wt.shape[0]} != previous output")
            if not (np.all(np.isfinite(wt)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {i}: non-finite parameters")
        if self.weights[-1].shape[1] != 1:
            raise InputError("last layer must have a single output")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [wt.shape[1] for wt in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope)


def init_mlp(layer_dims: Sequence[int], seed: int = 0, slope: float = 0.01) -> MlpParams:
    """He-style initialization for ``layer_dims`` (first = 2C, last = 1)."""
    if len(layer_dims) < 2 or layer_dims[-1] != 1:
        raise InputError(f"bad layer dims {layer_dims}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a, b in zip(layer_dims[:-1], layer_dims[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        bs.append(np.zeros(b))
    return MlpParams(ws, bs, slope)


def default_layer_dims(channels: int) -> list[int]:
    return [2 * channels, 2 * channels, channels, 1]


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: MlpParams, x: np.ndarray):
    acts = [x]
    pre = []
    a = x
    last = len(params.weights) - 1
    for i, (wt, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ wt + b
        pre.append(z)
        a = np.where(z > 0, z, params.slope * z) if i < last else _logistic(z)
        acts.append(a)
    return acts, pre


def mlp_forward(params: MlpParams, f_ref, f_query):
    """Score descriptor pairs; rows of ``f_ref`` / ``f_query`` are paired."""
    r = np.asarray(f_ref, dtype=np.float64)
    q = np.asarray(f_query, dtype=np.float64)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    q = np.atleast_2d(q)
    if r.shape != q.shape:
        raise DimensionMismatch(f"reference {r.shape} and query {q.shape} differ")
    if r.shape[1] * 2 != params.layer_dims[0]:
        raise DimensionMismatch(f"MLP expects {params.layer_dims[0]} inputs, got {2 * r.shape[1]}")
    acts, _ = _forward(params, np.hstack([r, q]))
    s = acts[-1][:, 0]
    return float(s[0]) if single else s


def _pairs(batch: SampleBatch):
    x = np.vstack([
        np.hstack([batch.ref_nocc, batch.pos]),
        np.hstack([batch.ref_nocc, batch.neg]),
        np.hstack([batch.ref_occ, batch.neg1]),
        np.hstack([batch.ref_occ, batch.neg2]),
    ])
    y = np.concatenate([np.ones(batch.n_nocc), np.zeros(batch.n_nocc + 2 * batch.n_occ)])
    return x, y


def bce_loss(batch: SampleBatch, params: MlpParams):
    """Occlusion-aware binary cross entropy of MLP scores.

    Returns ``(total, per_sample)``; ``per_sample`` holds one term per
    non-occluded pixel (positive + negative) then one per occluded pixel.
    """
    n, m = batch.n_nocc, batch.n_occ
    c = batch.channels
    if 2 * c != params.layer_dims[0]:
        raise DimensionMismatch(f"MLP expects {params.layer_dims[0]} inputs, got {2 * c}")
    x, _ = _pairs(batch)
    s = np.clip(_forward(params, x)[0][-1][:, 0], PROB_EPS, 1.0 - PROB_EPS)
    s_pos, s_neg = s[:n], s[n : 2 * n]
    s1, s2 = s[2 * n : 2 * n + m], s[2 * n + m :]
    nocc = -(np.log(1.0 - s_neg) + np.log(s_pos))
    occ = -(np.log(1.0 - s1) + np.log(1.0 - s2))
    per = np.concatenate([nocc, occ])
    return float(per.sum()), per


@dataclass(eq=False)
class Gradients:
    weights: list
    biases: list

    def norm(self) -> float:
        return float(np.sqrt(sum((g**2).sum() for g in self.weights + self.biases)))


def mlp_gradients(params: MlpParams, batch: SampleBatch) -> Gradients:
    """Exact gradient of ``bce_loss`` (summed over samples) w.r.t. all parameters."""
    if batch.n_nocc + batch.n_occ == 0:
        raise NoValidSamples("empty batch")
    if 2 * batch.channels != params.layer_dims[0]:
        raise DimensionMismatch(f"MLP expects {params.layer_dims[0]} inputs, got {2 * batch.channels}")
    x, y = _pairs(batch)
    acts, pre = _forward(params, x)
    delta = (acts[-1][:, 0] - y)[:, None]
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            back = delta @ params.weights[i].T
            delta = back * np.where(pre[i - 1] > 0, 1.0, params.slope)
    return Gradients(gw, gb)


def _mean_bce(params, batches) -> float:
    total = 0.0
    count = 0
    for b in batches:
        total += bce_loss(b, params)[0]
        count += 2 * (b.n_nocc + b.n_occ)
    return total / max(count, 1)


def train_mlp(
    params: MlpParams,
    batches: Sequence[SampleBatch],
    learning_rate: float,
    epochs: int,
    seed: int = 0,
):
    """Plain gradient descent; returns ``(trained_params, loss_trace)``.

    Each step uses the gradient averaged over the scored pairs of one batch;
    batch order is shuffled per epoch from ``seed``. ``loss_trace[k]`` is the
    mean per-pair BCE before epoch ``k`` (last entry: after training).

    Raises:
        DivergenceDetected: loss becomes non-finite or exceeds 10x its start.
    """
    if learning_rate < 0:
        raise InputError("learning rate must be non-negative")
    batches = list(batches)
    if not batches:
        raise NoValidSamples("no training batches")
    p = params.copy()
    rng = np.random.default_rng(seed)
    start = _mean_bce(p, batches)
    trace = [start]
    for _ in range(epochs):
        for bi in rng.permutation(len(batches)):
            b = batches[bi]
            g = mlp_gradients(p, b)
            scale = learning_rate / (2 * (b.n_nocc + b.n_occ))
            for i in range(len(p.weights)):
                p.weights[i] = p.weights[i] - scale * g.weights[i]
                p.biases[i] = p.biases[i] - scale * g.biases[i]
        loss = _mean_bce(p, batches)
        if not np.isfinite(loss) or loss > 10.0 * start:
            raise DivergenceDetected(f"loss {loss:.4g} exceeds 10x initial {start:.4g}")
        trace.append(loss)
    return p, trace


def accuracy(params: MlpParams, batch: SampleBatch, threshold: float = 0.5) -> float:
    x, y = _pairs(batch)
    s = _forward(params, x)[0][-1][:, 0]
    return float(np.mean((s >= threshold) == (y > 0.5)))


def separable_pairs(n: int, channels: int, noise: float = 0.05, seed: int = 0, n_occ: int = 0) -> SampleBatch:
    """Synthetic batch: positives are noisy copies of the reference unit
    vector, negatives independent random unit vectors."""
    rng = np.random.default_rng(seed)

    def unit(k):
        v = rng.normal(size=(k, channels))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    ref = unit(n)
    pos = ref + rng.normal(0.0, noise, size=ref.shape)
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    neg = unit(n)
    ref_o = unit(n_occ)
    return SampleBatch(ref, pos, neg, ref_o, unit(n_occ), unit(n_occ))


# --------------------------------------------------------------------------
# MLPW files


def write_mlp(path, params: MlpParams) -> None:
    with atomic_write(path) as fh:
        fh.write(MLPW_MAGIC)
        fh.write(struct.pack("<I", len(params.weights)))
        for wt, b in zip(params.weights, params.biases):
            fh.write(struct.pack("<2I", *wt.shape))
            fh.write(np.ascontiguousarray(wt, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        fh.write(struct.pack("<f", params.slope))


def read_mlp(path) -> MlpParams:
    data = Path(path).read_bytes()
    if data[:4] != MLPW_MAGIC:
        raise BadMagic(f"{path}: missing MLPW magic")
    try:
        (layers,) = struct.unpack_from("<I", data, 4)
        off = 8
        ws, bs = [], []
        for _ in range(layers):
            n_in, n_out = struct.unpack_from("<2I", data, off)
            off += 8
            count = n_in * n_out
            if off + 4 * (count + n_out) > len(data):
                raise TruncatedFile(f"{path}: layer data truncated")
            ws.append(np.frombuffer(data, "<f4", count, off).reshape(n_in, n_out).astype(np.float64))
            off += 4 * count
            bs.append(np.frombuffer(data, "<f4", n_out, off).astype(np.float64))
            off += 4 * n_out
        (slope,) = struct.unpack_from("<f", data, off)
    except struct.error:
        raise TruncatedFile(f"{path}: file truncated") from None
    return MlpParams(ws, bs, float(slope))
