"""Self-supervised training loop: periods -> patches -> encoders -> similarities -> losses -> Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import ndtensor as nt
from .errors import ConfigError, DataError, NumericError
from .losses import granularity_contrastive, ntp_loss, soft_contrastive_rows, total_loss
from .model import ModelConfig, PLanTSModel, save_checkpoint
from .patching import n_usable, pooled_windows, segment_batch
from .periodicity import PeriodSet, detect_periods, fixed_windows
from .similarity import mxcorr_matrix

log = logging.getLogger(__name__)


# ------------------------------------------------------------- preprocessing


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def standardize(values) -> tuple[np.ndarray, Standardization]:
    """Per-channel zero mean / unit variance over all instances and steps.

    Channels with zero spread keep a std of 1 (they are only centred).
    """
    x = np.asarray(values, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    stats = Standardization(mean=mean, std=std)
    return stats.apply(x), stats


def destandardize(values, stats: Standardization) -> np.ndarray:
    return stats.invert(values)


# -------------------------------------------------------------------- config


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_optional_int(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _parse_windows(text: str):
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    return tuple(int(w) for w in t.replace("[", "").replace("]", "").split(",") if w.strip())


@dataclass
class TrainingConfig:
    alpha: float = 0.5
    lam: float = 0.5
    k: int | None = 3
    windows: tuple[int, ...] | None = None
    batch_size: int | None = None  # None -> min(128, N)
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    latent_dim: int = 16
    transition_dim: int = 16
    hidden: int = 32
    depth: int = 4
    kernel_size: int = 3
    head_hidden: int = 32
    temperature: float = 1.0
    normalize_embeddings: bool = False
    ntp_stop_gradient: bool = False
    patience: int = 10
    min_rel_improvement: float = 1e-4
    threads: int = 1

    _PARSERS = {
        "k": _parse_optional_int,
        "batch_size": _parse_optional_int,
        "windows": _parse_windows,
        "normalize_embeddings": _parse_bool,
        "ntp_stop_gradient": _parse_bool,
    }

    def __post_init__(self):
        if self.windows is not None:
            self.windows = tuple(int(w) for w in self.windows)

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if (self.k is None) == (self.windows is None):
            raise ConfigError("set exactly one of k or windows")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.windows is not None and (not self.windows or min(self.windows) < 3):
            raise ConfigError("explicit windows must be non-empty and >= 3")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0 or self.epochs < 1 or self.temperature <= 0 or self.threads < 1:
            raise ConfigError("lr, epochs, temperature and threads must be positive")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def updated(self, **overrides) -> "TrainingConfig":
        unknown = set(overrides) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "TrainingConfig":
        """Build from string values (config file / CLI), converting per field type."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                if key in cls._PARSERS:
                    kwargs[key] = cls._PARSERS[key](raw)
                elif types[key] == "float":
                    kwargs[key] = float(raw)
                elif types[key] == "int":
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        if "windows" in kwargs and kwargs["windows"] is not None and "k" not in kwargs:
            kwargs["k"] = None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> tuple["TrainingConfig", dict[str, str]]:
        """Parse ``key = value`` lines; returns the config and any extra keys."""
        known, extra = {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            (known if key in cls.keys() else extra)[key] = value
        return cls.from_mapping(known), extra

    def to_text(self) -> str:
        lines = []
        for name in self.keys():
            v = getattr(self, name)
            if name == "windows" and v is not None:
                v = ",".join(str(w) for w in v)
            lines.append(f"{name} = {v}")
        return "\n".join(lines) + "\n"

    def model_config(self, input_dims: int, stats: Standardization | None = None) -> ModelConfig:
        return ModelConfig(
            input_dims=input_dims, latent_dim=self.latent_dim, transition_dim=self.transition_dim,
            hidden=self.hidden, depth=self.depth, kernel_size=self.kernel_size,
            head_hidden=self.head_hidden, seed=self.seed,
            mean=None if stats is None else [float(v) for v in stats.mean],
            std=None if stats is None else [float(v) for v in stats.std],
        )


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError("adam_step: parameter / gradient count mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise nt.ShapeError("adam_step", p.shape, g.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ------------------------------------------------------------ the objective


class GlobalSimilarityCache:
    """Window-vs-window similarities per (instance, window size), computed once per run."""

    def __init__(self):
        self._store: dict[tuple[int, int], np.ndarray] = {}
        self.computed = 0
        self.hits = 0

    def get(self, ids: Sequence[int], raw: np.ndarray, window: int) -> np.ndarray:
        """``raw`` is (B, M, w, C) usable windows of the batch instances."""
        missing = [b for b, i in enumerate(ids) if (int(i), window) not in self._store]
        if missing:
            sims = mxcorr_matrix(raw[missing])
            for b, s in zip(missing, sims):
                self._store[(int(ids[b]), window)] = s
            self.computed += len(missing)
        self.hits += len(ids) - len(missing)
        return np.stack([self._store[(int(i), window)] for i in ids])

    def stats(self) -> dict[str, int]:
        return {"computed": self.computed, "hits": self.hits, "entries": len(self._store)}


def batch_objective(model: PLanTSModel, xb: np.ndarray, ids: Sequence[int], windows: Sequence[int],
                    cache: GlobalSimilarityCache, config: TrainingConfig):
    """Full objective on one standardised batch (B, L, C).

    Returns the scalar loss tensor and a dict of float components
    (None where a term was skipped).
    """
    B, L, C = xb.shape
    x = nt.Tensor(xb)
    zl = model.latent(x)
    use_ntp = config.lam < 1.0
    zt = model.transition(x) if use_ntp else None
    temp, norm = config.temperature, config.normalize_embeddings
    contrastive, transition = [], []
    parts: dict[str, float | None] = {}
    for w in windows:
        m = n_usable(L, w)
        u = pooled_windows(zl, w, m)
        raw = segment_batch(xb, w)[:, :m]
        local_rows = global_rows = None
        if config.lam > 0.0:
            if config.alpha > 0.0 or m < 2:
                sims = mxcorr_matrix(np.transpose(raw, (1, 0, 2, 3)))
                rows = soft_contrastive_rows(nt.transpose(u, (1, 0, 2)), sims, temp, norm)
                local_rows = nt.transpose(rows, (1, 0))
            if config.alpha < 1.0 and m >= 2:
                global_rows = soft_contrastive_rows(u, cache.get(ids, raw, w), temp, norm)
        l_c = None
        if local_rows is not None or global_rows is not None:
            l_c = granularity_contrastive(config.alpha, local_rows, global_rows)
        l_t = None
        if use_ntp:
            v = pooled_windows(zt, w, m)
            l_t = ntp_loss(u, v, model.head, stop_gradient=config.ntp_stop_gradient)
        contrastive.append(l_c)
        transition.append(l_t)
        parts[f"w{w}_local"] = None if local_rows is None else float(local_rows.data.mean())
        parts[f"w{w}_global"] = None if global_rows is None else float(global_rows.data.mean())
        parts[f"w{w}_ntp"] = None if l_t is None else l_t.item()
    loss = total_loss(config.lam, contrastive, transition)
    for name in ("local", "global", "ntp"):
        vals = [parts[f"w{w}_{name}"] for w in windows if parts[f"w{w}_{name}"] is not None]
        parts[name] = float(np.mean(vals)) if vals else None
    parts["total"] = loss.item()
    return loss, parts


# --------------------------------------------------------------------- train


@dataclass
class RunArtifacts:
    config: TrainingConfig
    period_set: PeriodSet
    model: PLanTSModel
    standardization: Standardization
    history: list[dict] = field(default_factory=list)
    cache_stats: dict = field(default_factory=dict)
    checkpoint_path: Path | None = None
    loss_log_path: Path | None = None
    manifest_path: Path | None = None


def resolve_windows(config: TrainingConfig, values: np.ndarray) -> PeriodSet:
    L = values.shape[1]
    if config.windows is not None:
        too_long = [w for w in config.windows if w > L]
        if too_long:
            raise ConfigError(f"windows {too_long} exceed series length {L}")
        return fixed_windows(config.windows, L)
    return detect_periods(values, config.k)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[s : s + size] for s in range(0, n, size)]
    if len(out[-1]) < 2:
        out.pop()
    return out


def _log_columns(windows: Sequence[int]) -> list[str]:
    cols = ["epoch", "total", "local", "global", "ntp"]
    for w in windows:
        cols += [f"w{w}_local", f"w{w}_global", f"w{w}_ntp"]
    return cols


def train(config: TrainingConfig, values, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> RunArtifacts:
    """Train a model on raw (N, L, C) values.

    With ``out_dir`` set, writes ``model.ckpt``, ``loss_log.csv`` and
    ``manifest.txt`` there.
    """
    config.validate()
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 3:
        raise DataError(f"expected (N, L, C) values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite values in training data")
    N, L, C = x.shape
    if N < 2:
        raise DataError("need at least 2 instances to train")
    with threadpool_limits(limits=config.threads):
        xs, stats = standardize(x)
        periods = resolve_windows(config, xs)
        windows = list(periods.windows)
        model = PLanTSModel(config.model_config(C, stats))
        params = model.parameters()
        batch_size = min(config.batch_size or 128, N)
        rng = np.random.default_rng([config.seed, 1])
        cache = GlobalSimilarityCache()
        adam = AdamState()
        history: list[dict] = []
        best, best_epoch = math.inf, 0
        for epoch in range(1, config.epochs + 1):
            sums: dict[str, float] = {}
            counts: dict[str, int] = {}
            for ids in _batches(N, batch_size, rng):
                model.zero_grad()
                loss, parts = batch_objective(model, xs[ids], ids, windows, cache, config)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                nt.backward(loss)
                adam_step([p.data for p in params], [p.grad for p in params], adam, config.lr)
                for key, val in parts.items():
                    if val is not None:
                        sums[key] = sums.get(key, 0.0) + val
                        counts[key] = counts.get(key, 0) + 1
            row = {"epoch": epoch}
            for col in _log_columns(windows)[1:]:
                row[col] = sums[col] / counts[col] if col in counts else None
            history.append(row)
            if on_epoch is not None:
                on_epoch(row)
            log.info("epoch %d total %.6f", epoch, row["total"])
            if row["total"] < best - config.min_rel_improvement * abs(best) or not math.isfinite(best):
                best, best_epoch = row["total"], epoch
            elif epoch - best_epoch >= config.patience:
                log.info("loss plateau for %d epochs; stopping at epoch %d", config.patience, epoch)
                break
    run = RunArtifacts(config=config, period_set=periods, model=model, standardization=stats,
                       history=history, cache_stats=cache.stats())
    if out_dir is not None:
        write_artifacts(run, Path(out_dir), data_shape=(N, L, C))
    return run


def write_artifacts(run: RunArtifacts, out_dir: Path, data_shape=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    run.checkpoint_path = out_dir / "model.ckpt"
    run.loss_log_path = out_dir / "loss_log.csv"
    run.manifest_path = out_dir / "manifest.txt"
    save_checkpoint(run.model, run.checkpoint_path)
    cols = _log_columns(run.period_set.windows)
    with open(run.loss_log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in run.history:
            writer.writerow([_fmt(row.get(c)) for c in cols])
    lines = [f"plants_version = {__version__}"]
    if data_shape is not None:
        lines.append("data_shape = " + ",".join(str(d) for d in data_shape))
    lines.append("windows = " + ",".join(str(w) for w in run.period_set.windows))
    lines.append("frequencies = " + ",".join(str(f) for f in run.period_set.frequencies))
    lines.append("channel_mean = " + json.dumps([float(v) for v in run.standardization.mean]))
    lines.append("channel_std = " + json.dumps([float(v) for v in run.standardization.std]))
    lines.append("epochs_run = " + str(len(run.history)))
    lines.append("global_similarity_cache = " + json.dumps(run.cache_stats, sort_keys=True))
    lines.append("[config]")
    run.manifest_path.write_text("\n".join(lines) + "\n" + run.config.to_text())


def _fmt(value) -> str:
    if value is None:
        return "skipped"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------- sweep


def sweep(config: TrainingConfig, values, alphas: Sequence[float], lams: Sequence[float],
          metric: Callable[[RunArtifacts, np.ndarray], float]) -> list[dict]:
    """Grid over (alpha, lam); each cell reports its metric and % change vs the best cell.

    ``metric`` receives the run and the raw values and returns a
    lower-is-better score.
    """
    rows = []
    for a in alphas:
        for lam in lams:
            run = train(config.updated(alpha=float(a), lam=float(lam)), values)
            rows.append({"alpha": float(a), "lam": float(lam), "metric": float(metric(run, values))})
    best = min(r["metric"] for r in rows)
    for r in rows:
        r["rel_change_pct"] = 100.0 * (r["metric"] - best) / abs(best) if best != 0 else 0.0
    return rows
