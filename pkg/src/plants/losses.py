"""Similarity-weighted contrastive losses, next-transition prediction and the blended objective.

Targets come from input-space similarities and are plain arrays, so no
gradient ever flows into them. Predictions are log-softmaxes of embedding
dot products taken over every other row (the anchor itself is excluded).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndtensor as nt
from .errors import ConfigError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


def soft_targets(sim_row, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax over a similarity row (or the last axis of an array)."""
    s = np.asarray(sim_row, dtype=np.float64)
    if s.size == 0 or s.shape[-1] == 0:
        raise ValueError("soft_targets: empty similarity row")
    if not np.all(np.isfinite(s)):
        raise ValueError("soft_targets: non-finite similarity")
    z = s / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def offdiag_indices(n: int) -> np.ndarray:
    """(n, n-1) flat indices into an n x n matrix skipping the diagonal."""
    rows = np.arange(n)[:, None]
    cols = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.intp).reshape(n, n - 1)
    return rows * n + cols


def offdiag(values: np.ndarray) -> np.ndarray:
    """Drop the diagonal of (..., n, n) -> (..., n, n-1)."""
    n = values.shape[-1]
    flat = values.reshape(values.shape[:-2] + (n * n,))
    return np.take(flat, offdiag_indices(n), axis=-1)


def soft_contrastive_rows(emb: nt.Tensor, sims, temperature: float = 1.0,
                          normalize: bool = False) -> nt.Tensor:
    """Per-anchor soft contrastive loss.

    ``emb`` is (..., n, D) pooled vectors and ``sims`` the matching
    (..., n, n) similarity array. Returns (..., n) losses
    ``-sum_{j != i} p(i, j) log q(i, j)``.
    """
    n = emb.shape[-2]
    sims = np.asarray(sims, dtype=np.float64)
    if sims.shape != emb.shape[:-1] + (n,):
        raise nt.ShapeError("soft_contrastive", emb.shape, sims.shape)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 rows")
    targets = soft_targets(offdiag(sims))  # constant: similarity targets carry no gradient
    e = nt.normalize(emb, axis=-1) if normalize else emb
    logits = nt.matmul(e, nt.swap_last(e))
    lead = logits.shape[:-2]
    flat = nt.reshape(logits, lead + (n * n,))
    picked = nt.take(flat, offdiag_indices(n), axis=-1)
    if temperature != 1.0:
        picked = nt.mul(picked, 1.0 / temperature)
    logq = nt.log_softmax(picked, axis=-1)
    return nt.neg(nt.sum_(nt.mul(nt.Tensor(targets), logq), axis=-1))


def local_contrastive(u_batch, sims, temperature: float = 1.0, normalize: bool = False) -> nt.Tensor:
    """Mean over anchors of the instance-wise loss for one window.

    ``u_batch`` is (B, D) pooled latent vectors of B instances at the same
    window; ``sims`` is the B x B input similarity (array or SimilarityMatrix).
    """
    u = nt.as_tensor(u_batch)
    if u.shape[0] < 2:
        raise ValueError("local contrastive loss needs a batch of at least 2")
    values = getattr(sims, "values", sims)
    return nt.mean(soft_contrastive_rows(u, values, temperature, normalize))


def global_contrastive(u_windows, sims, temperature: float = 1.0, normalize: bool = False):
    """Mean over windows of the state-wise loss for one instance.

    Returns None (contribution skipped) when fewer than 2 windows exist.
    """
    u = nt.as_tensor(u_windows)
    if u.shape[0] < 2:
        return None
    values = getattr(sims, "values", sims)
    return nt.mean(soft_contrastive_rows(u, values, temperature, normalize))


def granularity_contrastive(alpha: float, local_terms, global_terms=None):
    """Blend per-(instance, window) local and global terms and average.

    Both inputs hold one value per usable (instance, window) cell. With no
    global term available the local mean is returned unweighted; with
    ``alpha == 0`` the local terms may be None.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if global_terms is None:
        if local_terms is None:
            raise ValueError("no contrastive terms available")
        return nt.mean(local_terms)
    if local_terms is None or alpha == 0.0:
        return nt.mean(global_terms)
    if alpha == 1.0:
        return nt.mean(local_terms)
    if local_terms.shape != global_terms.shape:
        raise nt.ShapeError("granularity_contrastive", local_terms.shape, global_terms.shape)
    blended = nt.add(nt.mul(local_terms, alpha), nt.mul(global_terms, 1.0 - alpha))
    return nt.mean(blended)


def ntp_loss(u: nt.Tensor, v: nt.Tensor, head, stop_gradient: bool = False):
    """Mean squared L2 error of predicting window m+1's transition vector.

    ``u`` is (B, M, D_l) and ``v`` (B, M, D_t) pooled window vectors. Returns
    None (term skipped) when M < 2.
    """
    B, M, _ = u.shape
    if M < 2:
        log.warning("next-transition term skipped: only %d usable window(s)", M)
        return None
    z = nt.concat([u[:, : M - 1], v[:, : M - 1]], axis=-1)
    pred = head(z)
    target = v[:, 1:]
    if stop_gradient:
        target = target.detach()
    return nt.mul(nt.squared_error(pred, target), 1.0 / (B * (M - 1)))


def total_loss(lam: float, contrastive: Sequence, transition: Sequence):
    """Mean over granularities of ``lam * L_l + (1 - lam) * L_t``.

    An entry of None in either sequence means that term was skipped for the
    granularity; the remaining term then carries the full weight.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if len(contrastive) != len(transition) or not contrastive:
        raise ValueError("need one (contrastive, transition) pair per granularity")
    parts = []
    for l_c, l_t in zip(contrastive, transition):
        if l_c is not None and l_t is not None and 0.0 < lam < 1.0:
            parts.append(nt.add(nt.mul(l_c, lam), nt.mul(l_t, 1.0 - lam)))
        elif l_c is not None and (lam > 0.0 or l_t is None):
            parts.append(nt.as_tensor(l_c))
        elif l_t is not None:
            parts.append(nt.as_tensor(l_t))
        else:
            raise ValueError("granularity has neither contrastive nor transition term")
    total = parts[0]
    for p in parts[1:]:
        total = nt.add(total, p)
    return nt.mul(total, 1.0 / len(parts))


def kl_identity(p, q, atol: float = 1e-9) -> tuple[float, float, float]:
    """Cross-entropy H(P, Q), KL(P || Q) and entropy H(P) of two distributions.

    Probabilities are clamped at ``PROB_FLOOR`` before taking logs, which
    bounds each log term at about -27.6 instead of -inf. Raises if
    ``H(P, Q) != KL + H(P)`` beyond ``atol``.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, None)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_FLOOR, None)
    cross = float(-np.sum(p * np.log(q)))
    kl = float(np.sum(p * (np.log(p) - np.log(q))))
    ent = float(-np.sum(p * np.log(p)))
    if abs(cross - (kl + ent)) > atol:
        raise ArithmeticError(f"cross-entropy {cross} != KL {kl} + entropy {ent}")
    return cross, kl, ent
