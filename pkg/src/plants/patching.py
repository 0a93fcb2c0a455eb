"""Non-overlapping, zero-padded segmentation of series at one or more window sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .periodicity import PeriodSet

MAX_PAD_FRACTION = 0.5


@dataclass(frozen=True)
class PatchView:
    window: int
    count: int
    pad_len: int
    patches: np.ndarray  # (M, w, C)

    @property
    def length(self) -> int:
        return self.count * self.window - self.pad_len

    @property
    def valid_lengths(self) -> np.ndarray:
        """Number of non-padded steps in each window."""
        return window_valid_lengths(self.length, self.window)

    @property
    def usable(self) -> np.ndarray:
        """Boolean mask of windows allowed into the losses."""
        return usable_mask(self.length, self.window)


def window_layout(length: int, window: int) -> tuple[int, int]:
    """(count, pad_len) for a series of ``length`` cut into ``window``-sized patches."""
    if window <= 0:
        raise ValueError(f"window must be positive, got {window}")
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    count = math.ceil(length / window)
    return count, count * window - length


def window_valid_lengths(length: int, window: int) -> np.ndarray:
    count, pad = window_layout(length, window)
    valid = np.full(count, window, dtype=np.int64)
    valid[-1] = window - pad
    return valid


def usable_mask(length: int, window: int) -> np.ndarray:
    """Windows with more than half padding are excluded from every loss."""
    valid = window_valid_lengths(length, window)
    return (window - valid) <= MAX_PAD_FRACTION * window


def n_usable(length: int, window: int) -> int:
    return int(usable_mask(length, window).sum())


def segment(series, window: int) -> PatchView:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"segment expects (L, C), got shape {x.shape}")
    L, C = x.shape
    count, pad = window_layout(L, window)
    padded = np.concatenate([x, np.zeros((pad, C))], axis=0) if pad else x.copy()
    return PatchView(window=window, count=count, pad_len=pad, patches=padded.reshape(count, window, C))


def unsegment(view: PatchView) -> np.ndarray:
    flat = view.patches.reshape(view.count * view.window, -1)
    return flat[: view.length].copy()


def multi_segment(series, period_set: PeriodSet | None) -> list[PatchView]:
    if period_set is None or not period_set.windows:
        raise ValueError("period set is empty")
    return [segment(series, w) for w in period_set.windows]


def segment_batch(values: np.ndarray, window: int) -> np.ndarray:
    """(B, L, C) -> (B, M, w, C) zero-padded patches."""
    B, L, C = values.shape
    count, pad = window_layout(L, window)
    if pad:
        values = np.concatenate([values, np.zeros((B, pad, C))], axis=1)
    return values.reshape(B, count, window, C)


def pooled_windows(emb: nt.Tensor, window: int, n_windows: int | None = None) -> nt.Tensor:
    """Mean-pool a (B, L, D) embedding over each window, ignoring padding.

    Returns (B, M', D) for the first ``n_windows`` windows (all by default).
    """
    B, L, D = emb.shape
    count, pad = window_layout(L, window)
    m = count if n_windows is None else n_windows
    x = emb
    if pad:
        x = nt.concat([x, nt.Tensor(np.zeros((B, pad, D)))], axis=1)
    x = nt.reshape(x, (B, count, window, D))
    if m < count:
        x = x[:, :m]
    summed = nt.sum_(x, axis=2)
    inv = 1.0 / window_valid_lengths(L, window)[:m]
    scale = np.broadcast_to(inv[None, :, None], (B, m, D)).copy()
    return nt.mul(summed, nt.Tensor(scale))
