"""Input-space similarity kernels: lagged Pearson cross-correlation (MXCorr) and DTW.

MXCorr scans one-sided lags: for lag ``tau`` the tail ``x[tau:]`` is
correlated with the head ``y[:w - tau]``. Lags stop at ``w - 2`` so every
overlap has at least two points. An overlap with zero variance correlates
as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

# centred-norm threshold relative to sqrt(n) * max|segment|; below it a segment counts as constant
_ZERO_VAR_RTOL = 1e-10


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kind: str  # "local" or "global"

    def __post_init__(self):
        if self.kind not in ("local", "global"):
            raise ValueError(f"unknown similarity kind {self.kind!r}")

    @property
    def extent(self) -> int:
        return self.values.shape[0]


def _normalized(seg: np.ndarray) -> np.ndarray:
    """Centre and unit-normalise along the last axis; constant segments map to zeros."""
    centred = seg - seg.mean(axis=-1, keepdims=True)
    norm = np.sqrt(np.sum(centred * centred, axis=-1, keepdims=True))
    scale = np.max(np.abs(seg), axis=-1, keepdims=True)
    flat = norm <= _ZERO_VAR_RTOL * np.sqrt(seg.shape[-1]) * scale
    flat |= norm == 0
    return np.where(flat, 0.0, centred / np.where(flat, 1.0, norm))


def ncc_at_lag(x, y, tau: int) -> float:
    """Pearson correlation of ``x[tau:]`` against ``y[:w - tau]``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError("ncc_at_lag", x.shape, y.shape)
    w = x.shape[0]
    if not 0 <= tau <= w - 2:
        raise ValueError(f"lag {tau} outside [0, {w - 2}]")
    a = _normalized(x[tau:])
    b = _normalized(y[: w - tau])
    return float(np.dot(a, b))


def mxcorr(x, y) -> float:
    """Channel-averaged maximum lagged correlation between two (w, C) windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x, y = x[:, None], (y[:, None] if y.ndim == 1 else y)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError("mxcorr", x.shape, y.shape)
    w, C = x.shape
    if w < 3:
        raise ValueError(f"window length {w} < 3")
    best = np.full(C, -np.inf)
    for tau in range(w - 1):
        a = _normalized(x[tau:].T)
        b = _normalized(y[: w - tau].T)
        best = np.maximum(best, np.sum(a * b, axis=1))
    return float(best.mean())


def mxcorr_matrix(windows: np.ndarray) -> np.ndarray:
    """Batched MXCorr within groups.

    ``windows`` is (G, P, w, C); returns (G, P, P) where entry [g, p, q] is
    ``mxcorr(windows[g, p], windows[g, q])``. One matrix product per lag
    covers every group, channel and pair.
    """
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError("mxcorr_matrix", x.shape, detail="expected (G, P, w, C)")
    G, P, w, C = x.shape
    if w < 3:
        raise ValueError(f"window length {w} < 3")
    xt = np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))  # (G, C, P, w)
    best = np.full((G, C, P, P), -np.inf)
    for tau in range(w - 1):
        tail = _normalized(xt[..., tau:])
        head = _normalized(xt[..., : w - tau])
        np.maximum(best, np.matmul(tail, np.swapaxes(head, -1, -2)), out=best)
    return best.mean(axis=1)


def mxcorr_local(batch_windows) -> SimilarityMatrix:
    """(B, w, C) windows of B instances at one window index -> B x B similarities."""
    x = np.asarray(batch_windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[0] < 2:
        raise ValueError("local similarity needs at least 2 instances")
    return SimilarityMatrix(mxcorr_matrix(x[None])[0], "local")


def mxcorr_global(instance_windows, usable=None) -> SimilarityMatrix:
    """(M, w, C) windows of one instance -> similarities among usable windows."""
    x = np.asarray(instance_windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if usable is not None:
        x = x[np.asarray(usable, dtype=bool)]
    if x.shape[0] < 2:
        raise ValueError("global similarity needs at least 2 usable windows")
    return SimilarityMatrix(mxcorr_matrix(x[None])[0], "global")


def dtw_distance(x, y) -> float:
    """Unconstrained DTW with per-step L1 cost between channel vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("dtw on empty series")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("dtw_distance", x.shape, y.shape)
    cost = np.abs(x[:, None, :] - y[None, :, :]).sum(axis=2)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return float(acc[n, m])


def dtw_pairs(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """DTW distances for aligned pairs (xs[p], ys[p]), vectorised over pairs.

    Sweeps anti-diagonals of the cost grid so each step updates all pairs
    and all cells of the diagonal at once. ``xs`` is (P, L1, C), ``ys`` is
    (P, L2, C).
    """
    P, n, C = xs.shape
    m = ys.shape[1]
    # full cost grids, read back one anti-diagonal at a time through strided views
    cost = np.zeros((P, n, m))
    for c in range(C):
        cost += np.abs(xs[:, :, None, c] - ys[:, None, :, c])
    flat = cost.reshape(P, n * m)
    step = flat.strides[1] * (m - 1)
    # diagonal arrays indexed by i + 1 (slot 0 is the i = -1 border)
    prev2 = np.full((P, n + 1), np.inf)
    prev2[:, 0] = 0.0  # virtual origin D[-1, -1]
    prev1 = np.full((P, n + 1), np.inf)
    for s in range(n + m - 1):
        lo, hi = max(0, s - m + 1), min(s, n - 1)
        diag = as_strided(flat[:, lo * (m - 1) + s :], shape=(P, hi - lo + 1),
                          strides=(flat.strides[0], step), writeable=False)
        cur = np.full((P, n + 1), np.inf)
        best = np.minimum(np.minimum(prev2[:, lo : hi + 1], prev1[:, lo : hi + 1]), prev1[:, lo + 1 : hi + 2])
        np.add(diag, best, out=cur[:, lo + 1 : hi + 2])
        prev2, prev1 = prev1, cur
    return prev1[:, n].copy()


def dtw_matrix(values: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Full symmetric N x N DTW matrix over (N, L, C) series."""
    x = np.asarray(values, dtype=np.float64)
    N = x.shape[0]
    iu, ju = np.triu_indices(N, k=1)
    out = np.zeros((N, N))
    for start in range(0, iu.size, chunk):
        a, b = iu[start : start + chunk], ju[start : start + chunk]
        d = dtw_pairs(x[a], x[b])
        out[a, b] = d
        out[b, a] = d
    return out
