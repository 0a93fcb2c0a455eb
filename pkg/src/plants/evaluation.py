"""Synthetic latent-state data, downstream probes, anomaly scoring, trajectories and the runtime benchmark."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .dataio import TimeSeriesDataset
from .errors import DataError
from .losses import soft_targets
from .model import PLanTSModel
from .patching import n_usable, segment_batch
from .periodicity import detect_periods
from .similarity import dtw_matrix, mxcorr_matrix

log = logging.getLogger(__name__)

# --------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class Regime:
    """Emission regime of one latent state.

    ``kind="sine"`` uses per-channel frequencies (cycles per step) and
    amplitudes; ``kind="ar2"`` uses per-channel (a1, a2) coefficients.
    ``noise`` is the standard deviation of additive Gaussian noise.
    """

    kind: str = "sine"
    freqs: tuple[float, ...] = ()
    amps: tuple[float, ...] = ()
    ar: tuple[tuple[float, float], ...] = ()
    noise: float = 0.1

    def check(self, channels: int) -> None:
        if self.kind == "sine":
            if len(self.freqs) != channels or len(self.amps) != channels:
                raise ValueError(f"sine regime needs {channels} freqs and amps")
            if any(not 0 < f <= 0.5 for f in self.freqs):
                raise ValueError("sine frequencies must lie in (0, 0.5]")
        elif self.kind == "ar2":
            if len(self.ar) != channels:
                raise ValueError(f"ar2 regime needs {channels} coefficient pairs")
            for a1, a2 in self.ar:
                if not (abs(a2) < 1 and a1 + a2 < 1 and a2 - a1 < 1):
                    raise ValueError(f"AR(2) coefficients ({a1}, {a2}) are not stationary")
        else:
            raise ValueError(f"unknown regime kind {self.kind!r}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class HmmSpec:
    transition: np.ndarray
    regimes: list[Regime]
    dwell: int = 1  # the state may only change every `dwell` steps
    initial: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.regimes)

    def validate(self, channels: int) -> None:
        T = np.asarray(self.transition, dtype=np.float64)
        S = self.n_states
        if T.shape != (S, S):
            raise ValueError(f"transition matrix must be {S}x{S}, got {T.shape}")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition matrix rows must be non-negative and sum to 1")
        if self.initial is not None:
            p = np.asarray(self.initial, dtype=np.float64)
            if p.shape != (S,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("initial distribution invalid")
        if self.dwell < 1:
            raise ValueError("dwell must be >= 1")
        for r in self.regimes:
            r.check(channels)


def default_hmm_spec(channels: int = 3, n_states: int = 4, dwell: int = 25, stay: float = 0.5,
                     noise: float = 0.3) -> HmmSpec:
    """Sinusoidal regimes whose frequency and amplitude patterns differ by channel.

    State s, channel c oscillates with period ``periods[(s + c) % 4]`` so
    every state uses similar frequencies overall; only their arrangement
    across channels and the amplitudes identify the state.
    """
    periods = [6.0, 10.0, 16.0, 25.0]
    regimes = []
    for s in range(n_states):
        freqs = tuple(1.0 / periods[(s + c) % len(periods)] for c in range(channels))
        amps = tuple(1.0 + 0.5 * ((s + 2 * c) % 3) for c in range(channels))
        regimes.append(Regime("sine", freqs=freqs, amps=amps, noise=noise))
    T = np.full((n_states, n_states), (1.0 - stay) / (n_states - 1))
    np.fill_diagonal(T, stay)
    return HmmSpec(transition=T, regimes=regimes, dwell=dwell)


def gen_hmm_mts(spec: HmmSpec, n: int, length: int, channels: int, seed: int = 0) -> TimeSeriesDataset:
    """Sample N series of a hidden Markov chain with regime emissions.

    Sine emissions accumulate phase so the signal stays continuous across
    state switches; AR(2) emissions carry their history across switches.
    Labels are the per-step latent states.
    """
    spec.validate(channels)
    rng = np.random.default_rng(seed)
    S = spec.n_states
    T = np.asarray(spec.transition, dtype=np.float64)
    init = np.full(S, 1.0 / S) if spec.initial is None else np.asarray(spec.initial, dtype=np.float64)
    cum = np.cumsum(T, axis=1)
    states = np.empty((n, length), dtype=np.int64)
    states[:, 0] = rng.choice(S, size=n, p=init)
    for t in range(1, length):
        if t % spec.dwell == 0:
            u = rng.random(n)
            nxt = (u[:, None] > cum[states[:, t - 1]]).sum(axis=1)
            states[:, t] = np.minimum(nxt, S - 1)
        else:
            states[:, t] = states[:, t - 1]
    freqs = np.array([r.freqs if r.kind == "sine" else (0.0,) * channels for r in spec.regimes])
    amps = np.array([r.amps if r.kind == "sine" else (0.0,) * channels for r in spec.regimes])
    ar = np.array([r.ar if r.kind == "ar2" else ((0.0, 0.0),) * channels for r in spec.regimes])
    noise = np.array([r.noise for r in spec.regimes])
    is_sine = np.array([r.kind == "sine" for r in spec.regimes])
    eps = rng.standard_normal((n, length, channels))
    phase = rng.uniform(0, 2 * np.pi, size=(n, channels))
    values = np.empty((n, length, channels))
    hist1 = np.zeros((n, channels))
    hist2 = np.zeros((n, channels))
    for t in range(length):
        s = states[:, t]
        phase = phase + 2 * np.pi * freqs[s]
        sine = amps[s] * np.sin(phase)
        arv = ar[s, :, 0] * hist1 + ar[s, :, 1] * hist2 + eps[:, t]
        hist2, hist1 = hist1, np.where(is_sine[s][:, None], 0.0, arv)
        clean = np.where(is_sine[s][:, None], sine, arv)
        values[:, t] = clean + np.where(is_sine[s][:, None], noise[s][:, None] * eps[:, t], 0.0)
    return TimeSeriesDataset(values, states)


def periodic_dataset(n: int, length: int, channels: int, seed: int = 0, noise: float = 0.1,
                     periods: Sequence[float] = (16.0, 25.0)) -> np.ndarray:
    """Smooth multi-channel sinusoid mixtures with random phases, (N, L, C)."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    out = np.zeros((n, length, channels))
    for p in periods:
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, channels))
        amp = rng.uniform(0.5, 1.5, size=(n, 1, channels))
        out += amp * np.sin(2 * np.pi * t[None, :, None] / p + phase)
    return out + noise * rng.standard_normal(out.shape)


def difference(series, d: int) -> np.ndarray:
    """Apply first differencing ``d`` times along the time axis (axis 0 for (L, ...), 1 for (N, L, C))."""
    x = np.asarray(series, dtype=np.float64)
    axis = 1 if x.ndim == 3 else 0
    L = x.shape[axis]
    if d < 0:
        raise ValueError("d must be >= 0")
    if d >= L:
        raise ValueError(f"cannot difference {d} times a series of length {L}")
    return np.diff(x, n=d, axis=axis) if d else x.copy()


# ---------------------------------------------------------------- probes


@dataclass
class ProbeReport:
    task: str
    metrics: dict[str, float]
    baseline: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    note: str = ""

    def rows(self) -> list[dict]:
        out = []
        for key, val in self.metrics.items():
            out.append({"task": self.task, "metric": key, "value": val,
                        "baseline": self.baseline.get(key, float("nan")), "seed": self.seed})
        return out


def _standardize_features(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500, lr: float = 0.5,
                 l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = X.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return W, b


def knn_predict(train_X, train_y, test_X, k: int = 5) -> np.ndarray:
    """Cosine-similarity k-NN majority vote; ties go to the larger summed similarity."""
    def unit(a):
        norm = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.where(norm > 0, norm, 1.0)

    sim = unit(test_X) @ unit(train_X).T
    k = min(k, train_X.shape[0])
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    classes = np.unique(train_y)
    preds = np.empty(test_X.shape[0], dtype=train_y.dtype)
    for r, idx in enumerate(nearest):
        votes = np.array([(train_y[idx] == c).sum() for c in classes])
        weight = np.array([sim[r, idx][train_y[idx] == c].sum() for c in classes])
        best = np.lexsort((-weight, -votes))[0]
        preds[r] = classes[best]
    return preds


def classify_probe(train_X, train_y, test_X, test_y, kind: str = "linear", seed: int = 0) -> ProbeReport:
    """Accuracy of a linear (logistic) or 5-NN (cosine) probe on frozen features.

    Baseline is the majority-class rate of the training labels on the test set.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    test_X = np.asarray(test_X, dtype=np.float64)
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ValueError("classification probe needs at least 2 classes in the training set")
    if kind == "linear":
        remap = {c: i for i, c in enumerate(classes)}
        y_idx = np.array([remap[c] for c in train_y])
        Xtr, Xte = _standardize_features(train_X, test_X)
        W, b = fit_logistic(Xtr, y_idx, classes.size)
        preds = classes[np.argmax(Xte @ W + b, axis=1)]
    elif kind == "knn":
        preds = knn_predict(train_X, train_y, test_X, k=5)
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    majority = classes[np.argmax([(train_y == c).sum() for c in classes])]
    return ProbeReport(
        task=f"classify-{kind}",
        metrics={"accuracy": float(np.mean(preds == test_y))},
        baseline={"accuracy": float(np.mean(test_y == majority))},
        seed=seed,
        note="logistic / k-NN probe in place of an RBF SVM",
    )


def ridge_fit_predict(X_train, Y_train, X_test, reg: float = 1e-2) -> np.ndarray:
    """Closed-form ridge regression with an unpenalised intercept."""
    xm, ym = X_train.mean(axis=0), Y_train.mean(axis=0)
    Xc, Yc = X_train - xm, Y_train - ym
    d = Xc.shape[1]
    beta = np.linalg.solve(Xc.T @ Xc + reg * np.eye(d), Xc.T @ Yc)
    return (X_test - xm) @ beta + ym


def forecast_probe(reps, series, horizon: int, lookback: int = 16, reg: float = 1e-2,
                   train_frac: float = 0.7, seed: int = 0) -> ProbeReport:
    """Ridge regression from the representation at t to the next ``horizon`` raw values.

    ``reps`` is (L, D) or (N, L, D) and ``series`` (L, C) or (N, L, C). Pairs
    are split chronologically (first ``train_frac`` of anchors for fitting).
    The baseline fits the same regression on the raw last ``lookback`` values.
    """
    Z = np.asarray(reps, dtype=np.float64)
    X = np.asarray(series, dtype=np.float64)
    if Z.ndim == 2:
        Z, X = Z[None], X[None]
    if X.ndim == 2:
        X = X[..., None]
    N, L, C = X.shape
    if Z.shape[:2] != (N, L):
        raise DataError(f"representations {Z.shape} do not align with series {X.shape}")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    anchors = np.arange(lookback - 1, L - horizon)
    if horizon >= L - lookback or anchors.size < 4:
        raise ValueError(f"horizon {horizon} leaves too few anchors in a series of length {L}")
    cut = int(round(train_frac * anchors.size))
    idx_train, idx_test = anchors[:cut], anchors[cut:]

    def build(idx, feats):
        F = np.concatenate([feats(t) for t in idx], axis=0)
        Y = np.concatenate([X[:, t + 1 : t + 1 + horizon].reshape(N, -1) for t in idx], axis=0)
        return F, Y

    rep_feat = lambda t: Z[:, t]  # noqa: E731
    raw_feat = lambda t: X[:, t - lookback + 1 : t + 1].reshape(N, -1)  # noqa: E731
    out = {}
    for name, feat in (("rep", rep_feat), ("raw", raw_feat)):
        Ftr, Ytr = build(idx_train, feat)
        Fte, Yte = build(idx_test, feat)
        err = ridge_fit_predict(Ftr, Ytr, Fte, reg) - Yte
        out[name] = (float(np.mean(err ** 2)), float(np.mean(np.abs(err))))
    return ProbeReport(
        task=f"forecast-h{horizon}",
        metrics={"mse": out["rep"][0], "mae": out["rep"][1]},
        baseline={"mse": out["raw"][0], "mae": out["raw"][1]},
        seed=seed,
        note=f"ridge reg={reg}, raw baseline lookback={lookback}",
    )


def window_features(model: PLanTSModel, values, labels, window: int):
    """Mean-pooled fused representations and majority labels of every usable window.

    Returns (features (N*M, D), labels (N*M,), instance index (N*M,)).
    """
    x = np.asarray(values, dtype=np.float64)
    lab = np.asarray(labels)
    N, L, _ = x.shape
    m = n_usable(L, window)
    z = model.encode_full(x)
    zw = segment_batch(z, window)[:, :m]
    count = np.minimum(window, L - np.arange(m) * window)
    feats = zw.sum(axis=2) / count[None, :, None]
    lw = segment_batch(lab[..., None].astype(np.float64), window)[:, :m, :, 0].astype(np.int64)
    y = np.empty((N, m), dtype=np.int64)
    for i in range(N):
        for j in range(m):
            y[i, j] = np.bincount(lw[i, j, : count[j]]).argmax()
    inst = np.repeat(np.arange(N), m)
    return feats.reshape(N * m, -1), y.reshape(-1), inst


# --------------------------------------------------------------- anomalies


def anomaly_scores(model: PLanTSModel, series, positions=None, mask_value: float = 0.0,
                   chunk: int = 64) -> np.ndarray:
    """L1 distance at t between the encodings of the series and of a copy with step t masked.

    ``series`` is one standardised (L, C) series.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    L = x.shape[0]
    pos = np.arange(L) if positions is None else np.asarray(positions, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= L):
        raise IndexError(f"positions must lie in [0, {L})")
    base = model.encode_full(x)
    scores = np.empty(pos.size)
    for start in range(0, pos.size, chunk):
        ps = pos[start : start + chunk]
        batch = np.repeat(x[None], ps.size, axis=0)
        batch[np.arange(ps.size), ps] = mask_value
        z = model.encode_full(batch)
        scores[start : start + ps.size] = np.abs(z[np.arange(ps.size), ps] - base[ps]).sum(axis=1)
    return scores


def anomaly_score(model: PLanTSModel, series, t: int, mask_value: float = 0.0) -> float:
    L = np.asarray(series).shape[0]
    if not 0 <= t < L:
        raise IndexError(f"position {t} outside [0, {L})")
    return float(anomaly_scores(model, series, [t], mask_value)[0])


def auroc(scores_pos, scores_neg) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_p, n_n = pos.size, neg.size
    return float((ranks[:n_p].sum() - n_p * (n_p + 1) / 2) / (n_p * n_n))


def inject_spikes(series, n_spikes: int, magnitude: float = 10.0, seed: int = 0, margin: int = 8):
    """Add ``magnitude`` x channel-std spikes at random steps of one random channel each."""
    rng = np.random.default_rng(seed)
    x = np.array(series, dtype=np.float64)
    L, C = x.shape
    positions = np.sort(rng.choice(np.arange(margin, L - margin), size=n_spikes, replace=False))
    sd = x.std(axis=0)
    for p in positions:
        c = rng.integers(C)
        x[p, c] += magnitude * sd[c] * rng.choice([-1.0, 1.0])
    return x, positions


# ------------------------------------------------------------- trajectories


def trajectory_pca(reps, components: int = 3):
    """Project (T, D) representations onto their top principal components.

    Signs are fixed so each component's largest-magnitude loading is
    positive. Returns (projection (T, k), explained-variance ratios (k,));
    k drops below ``components`` when the data has lower rank.
    """
    Z = np.asarray(reps, dtype=np.float64)
    T = Z.shape[0]
    if T <= components:
        raise ValueError(f"need more than {components} time steps, got {T}")
    Zc = Z - Z.mean(axis=0)
    cov = Zc.T @ Zc / (T - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()
    rank = int(np.sum(evals > 1e-12 * max(evals[0], 1e-300))) if total > 0 else 0
    k = min(components, rank)
    if k < components:
        log.warning("representations have rank %d < %d; returning %d components", rank, components, k)
    vecs = evecs[:, :k].copy()
    for j in range(k):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    return Zc @ vecs, ratios


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRecord:
    kernel: str
    length: int
    n: int
    channels: int
    window: int
    threads: int
    repeats: int
    precompute_mean: float
    precompute_std: float
    epoch_mean: float
    epoch_std: float

    @property
    def total_mean(self) -> float:
        return self.precompute_mean + self.epoch_mean

    FIELDS = ("kernel", "length", "n", "channels", "window", "threads", "repeats",
              "precompute_mean", "precompute_std", "epoch_mean", "epoch_std", "total_mean")

    def as_row(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


def mxcorr_epoch_structure(values: np.ndarray, window: int, batch_size: int = 128) -> int:
    """Every similarity one training epoch consumes: per-batch local matrices
    for all usable windows plus each instance's window-vs-window matrix.

    Returns the number of similarity entries built.
    """
    N, L, C = values.shape
    m = n_usable(L, window)
    built = 0
    for start in range(0, N, batch_size):
        raw = segment_batch(values[start : start + batch_size], window)[:, :m]
        if raw.shape[0] >= 2:
            local = mxcorr_matrix(np.transpose(raw, (1, 0, 2, 3)))
            built += local.size
        if m >= 2:
            built += mxcorr_matrix(raw).size
    return built


def bench_similarity(length: int, n: int, channels: int, kernel: str, repeats: int = 3,
                     batch_size: int = 128, window: int | None = None, seed: int = 0,
                     threads: int = 1) -> BenchRecord:
    """Time the pairwise similarity structure needed to train with ``kernel``.

    ``mxcorr`` builds its targets inside the epoch from raw windows and has no
    precomputation phase. ``dtw`` precomputes the full N x N distance matrix
    and each epoch only slices per-batch soft targets out of it.
    """
    if min(length, n, channels, repeats) < 1:
        raise ValueError("sizes must be positive")
    values = periodic_dataset(n, length, channels, seed=seed)
    values = (values - values.mean(axis=(0, 1))) / values.std(axis=(0, 1))
    if window is None:
        window = detect_periods(values, k=1).windows[0] if length >= 9 else length
    pre, epoch = [], []
    with threadpool_limits(limits=threads):
        for _ in range(repeats):
            if kernel == "mxcorr":
                t0 = time.perf_counter()
                mxcorr_epoch_structure(values, window, batch_size)
                pre.append(0.0)
                epoch.append(time.perf_counter() - t0)
            elif kernel == "dtw":
                t0 = time.perf_counter()
                dist = dtw_matrix(values)
                pre.append(time.perf_counter() - t0)
                t1 = time.perf_counter()
                for start in range(0, n, batch_size):
                    ids = np.arange(start, min(n, start + batch_size))
                    if ids.size >= 2:
                        sub = -dist[np.ix_(ids, ids)]
                        soft_targets(sub)
                epoch.append(time.perf_counter() - t1)
            else:
                raise ValueError(f"unknown kernel {kernel!r}")
    return BenchRecord(
        kernel=kernel, length=length, n=n, channels=channels, window=int(window), threads=threads,
        repeats=repeats, precompute_mean=float(np.mean(pre)), precompute_std=float(np.std(pre)),
        epoch_mean=float(np.mean(epoch)), epoch_std=float(np.std(epoch)),
    )


# -------------------------------------------------------------- experiments


def state_recovery(seed: int = 0, alpha: float = 0.5, lam: float = 0.5, epochs: int = 50,
                   n: int = 64, length: int = 400, channels: int = 3, k: int = 3,
                   spec: HmmSpec | None = None, train_frac: float = 0.75, probe: str = "linear") -> dict:
    """Train on synthetic HMM data, then probe window-level latent states.

    Windows for the probe are the generator's dwell length, so each window
    covers one state. Probe train/test split is by instance.
    """
    from .training import TrainingConfig, train

    spec = spec or default_hmm_spec(channels)
    ds = gen_hmm_mts(spec, n, length, channels, seed=seed)
    cfg = TrainingConfig(alpha=alpha, lam=lam, k=k, epochs=epochs, seed=seed)
    run = train(cfg, ds.values)
    xs = run.standardization.apply(ds.values)
    feats, y, inst = window_features(run.model, xs, ds.labels, spec.dwell)
    n_train = int(round(train_frac * n))
    tr, te = inst < n_train, inst >= n_train
    report = classify_probe(feats[tr], y[tr], feats[te], y[te], kind=probe, seed=seed)
    return {
        "seed": seed, "alpha": alpha, "lam": lam,
        "accuracy": report.metrics["accuracy"], "chance": 1.0 / spec.n_states,
        "epochs_run": len(run.history), "windows": run.period_set.windows,
        "final_loss": run.history[-1]["total"], "run": run,
    }


def spike_detection(seed: int = 0, n: int = 16, length: int = 256, channels: int = 2,
                    epochs: int = 5, n_spikes: int = 8, magnitude: float = 10.0) -> dict:
    """Train briefly on smooth data, inject spikes into a held-out series and score every step."""
    from .training import TrainingConfig, train

    values = periodic_dataset(n + 1, length, channels, seed=seed)
    cfg = TrainingConfig(k=2, epochs=epochs, seed=seed)
    run = train(cfg, values[:n])
    clean = run.standardization.apply(values[n])
    spiked, pos = inject_spikes(clean, n_spikes, magnitude=magnitude, seed=seed)
    scores = anomaly_scores(run.model, spiked)
    is_spike = np.zeros(length, dtype=bool)
    is_spike[pos] = True
    return {"seed": seed, "auroc": auroc(scores[is_spike], scores[~is_spike]),
            "scores": scores, "positions": pos}
