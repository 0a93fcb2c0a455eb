"""Latent-state encoder, transition encoder, prediction head and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .errors import DataError, ShapeError

CHECKPOINT_MAGIC = b"PLANTS01"


@dataclass
class ModelConfig:
    input_dims: int
    latent_dim: int = 16
    transition_dim: int = 16
    hidden: int = 32
    depth: int = 4
    kernel_size: int = 3
    head_hidden: int = 32
    seed: int = 0
    # per-channel standardisation applied before encoding (None = identity)
    mean: list[float] | None = None
    std: list[float] | None = None

    @property
    def output_dim(self) -> int:
        return self.latent_dim + self.transition_dim


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    """Stack of residual blocks of two causal dilated convolutions (dilation 2**i).

    Maps (B, L, C) to (B, L, out_dim) without any temporal downsampling.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, depth: int, kernel_size: int,
                 rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.hidden, self.depth, self.kernel_size = hidden, depth, kernel_size
        specs = dict(self.param_shapes())
        self.params: dict[str, nt.Tensor] = {}
        for name, shape in specs.items():
            weight_shape = specs[name[:-2] + ".w"]
            fan_in = int(np.prod(weight_shape[:-1]))
            self.params[name] = nt.Tensor(_uniform(rng, shape, fan_in), requires_grad=True)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        H, K = self.hidden, self.kernel_size
        shapes = [("input.w", (self.in_dim, H)), ("input.b", (H,))]
        for i in range(self.depth):
            for j in (1, 2):
                shapes += [(f"block{i}.conv{j}.w", (K, H, H)), (f"block{i}.conv{j}.b", (H,))]
        shapes += [("output.w", (H, self.out_dim)), ("output.b", (self.out_dim,))]
        return shapes

    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.depth)]

    def __call__(self, x: nt.Tensor) -> nt.Tensor:
        p = self.params
        if x.shape[-1] != self.in_dim:
            raise ShapeError("encoder", x.shape, (self.in_dim,), detail="channel mismatch")
        h = nt.linear(x, p["input.w"], p["input.b"])
        for i, d in enumerate(self.dilations()):
            r = nt.conv1d(nt.relu(h), p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"], dilation=d)
            r = nt.conv1d(nt.relu(r), p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"], dilation=d)
            h = nt.add(h, r)
        return nt.linear(h, p["output.w"], p["output.b"])


class PredictionHead:
    """Two affine layers with a ReLU between: (D_l + D_t) -> hidden -> D_t."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.params = {}
        for name, shape in self.param_shapes():
            fan_in = in_dim if name.startswith("fc1") else hidden
            self.params[name] = nt.Tensor(_uniform(rng, shape, fan_in), requires_grad=True)

    def param_shapes(self):
        return [
            ("fc1.w", (self.in_dim, self.hidden)), ("fc1.b", (self.hidden,)),
            ("fc2.w", (self.hidden, self.out_dim)), ("fc2.b", (self.out_dim,)),
        ]

    def __call__(self, z: nt.Tensor) -> nt.Tensor:
        if z.shape[-1] != self.in_dim:
            raise ShapeError("prediction_head", z.shape, (self.in_dim,))
        p = self.params
        h = nt.relu(nt.linear(z, p["fc1.w"], p["fc1.b"]))
        return nt.linear(h, p["fc2.w"], p["fc2.b"])


class PLanTSModel:
    """The two encoders plus the next-transition head.

    Encoding methods accept numpy arrays shaped (L, C) or (N, L, C) in the
    units of the standardised data; use :meth:`preprocess` for raw inputs.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.latent = Encoder(c.input_dims, c.latent_dim, c.hidden, c.depth, c.kernel_size, rng)
        self.transition = Encoder(c.input_dims, c.transition_dim, c.hidden, c.depth, c.kernel_size, rng)
        self.head = PredictionHead(c.latent_dim + c.transition_dim, c.head_hidden, c.transition_dim, rng)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> list[tuple[str, nt.Tensor]]:
        out = []
        for prefix, module in (("latent", self.latent), ("transition", self.transition), ("head", self.head)):
            for name, _ in module.param_shapes():
                out.append((f"{prefix}.{name}", module.params[name]))
        return out

    def parameters(self) -> list[nt.Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -------------------------------------------------------------- encoding

    def preprocess(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64)
        if self.config.mean is None:
            return x
        return (x - np.asarray(self.config.mean)) / np.asarray(self.config.std)

    @staticmethod
    def _batched(values) -> tuple[np.ndarray, bool]:
        x = np.asarray(values, dtype=np.float64)
        if x.ndim == 2:
            return x[None], True
        if x.ndim != 3:
            raise DataError(f"expected (L, C) or (N, L, C), got shape {x.shape}")
        return x, False

    def _encode(self, encoder: Encoder, values) -> np.ndarray:
        x, single = self._batched(values)
        if x.shape[-1] != self.config.input_dims:
            raise ShapeError("encode", x.shape, (self.config.input_dims,), detail="channel mismatch")
        with nt.no_grad():
            out = encoder(nt.Tensor(x)).data
        return out[0] if single else out

    def encode_latent(self, values) -> np.ndarray:
        return self._encode(self.latent, values)

    def encode_transition(self, values) -> np.ndarray:
        return self._encode(self.transition, values)

    def encode_full(self, values) -> np.ndarray:
        return np.concatenate([self.encode_latent(values), self.encode_transition(values)], axis=-1)

    def instance_vector(self, values) -> np.ndarray:
        """Max-pool of the fused encoding over time."""
        return self.encode_full(values).max(axis=-2)

    def predict_next(self, u, v):
        """G(concat(u, v)); accepts tensors (graph kept) or arrays."""
        if isinstance(u, nt.Tensor) or isinstance(v, nt.Tensor):
            u, v = nt.as_tensor(u), nt.as_tensor(v)
            if u.shape[-1] != self.config.latent_dim or v.shape[-1] != self.config.transition_dim:
                raise ShapeError("predict_next", u.shape, v.shape)
            return self.head(nt.concat([u, v], axis=-1))
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        if u.shape[-1] != self.config.latent_dim or v.shape[-1] != self.config.transition_dim:
            raise ShapeError("predict_next", u.shape, v.shape)
        with nt.no_grad():
            return self.head(nt.Tensor(np.concatenate([u, v], axis=-1))).data


def pool_window(window, n_valid: int | None = None) -> np.ndarray:
    """Mean over the time axis of a (w, D) window, skipping trailing padding."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] if n_valid is None else int(n_valid)
    if n <= 0:
        raise ValueError("window is entirely padding")
    return x[:n].mean(axis=0)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: PLanTSModel, path) -> None:
    """Magic, length-prefixed JSON config, then each parameter in declared order.

    Every parameter record is: name length (u32), name, ndim (u32), extents
    (u64 each), float64 little-endian payload.
    """
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        params = model.named_parameters()
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> PLanTSModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a PLANTS01 checkpoint")
    pos = 8

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (n,) = read("<I")
        cfg = json.loads(data[pos : pos + n].decode())
        pos += n
        model = PLanTSModel(ModelConfig(**cfg))
        expected = model.named_parameters()
        (count,) = read("<I")
        if count != len(expected):
            raise DataError(f"{path}: expected {len(expected)} parameters, found {count}")
        for name, t in expected:
            (nlen,) = read("<I")
            got = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = read("<I")
            shape = read(f"<{ndim}Q")
            if got != name or tuple(shape) != t.shape:
                raise DataError(f"{path}: parameter {got} {shape} does not match {name} {t.shape}")
            nbytes = 8 * int(np.prod(shape))
            t.data[...] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
            pos += nbytes
    except DataError:
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return model
