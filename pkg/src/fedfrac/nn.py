"""Minimal dense/conv network core with manual backprop, in float64.

Layers: 3x3 same-padding convolution, 2x2 max pooling, ReLU, flatten,
dense. Weights live in a named, ordered container that supports the
element-wise arithmetic federation needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# weights container

class ModelWeights:
    """Ordered (name, array) parameter entries with vector arithmetic."""

    def __init__(self, entries):
        self.entries = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in entries]
        self._index = {name: i for i, (name, _) in enumerate(self.entries)}
        if len(self._index) != len(self.entries):
            raise ValueError("duplicate parameter names")

    def __getitem__(self, name):
        return self.entries[self._index[name]][1]

    def names(self):
        return [name for name, _ in self.entries]

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.entries)

    def copy(self) -> "ModelWeights":
        return ModelWeights([(n, a.copy()) for n, a in self.entries])

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights([(n, np.zeros_like(a)) for n, a in self.entries])

    def map2(self, other: "ModelWeights", fn) -> "ModelWeights":
        self._check_aligned(other)
        return ModelWeights([(n, fn(a, b)) for (n, a), (_, b)
                             in zip(self.entries, other.entries)])

    def _check_aligned(self, other: "ModelWeights"):
        if self.names() != other.names() or any(
                a.shape != b.shape for (_, a), (_, b)
                in zip(self.entries, other.entries)):
            raise ShapeError("weight containers are not aligned")

    def __add__(self, other):
        return self.map2(other, np.add)

    def __sub__(self, other):
        return self.map2(other, np.subtract)

    def scale(self, c: float) -> "ModelWeights":
        return ModelWeights([(n, a * c) for n, a in self.entries])

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([a.ravel() for _, a in self.entries])

    def unflatten_like(self, flat: np.ndarray) -> "ModelWeights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {flat.size}")
        out, off = [], 0
        for n, a in self.entries:
            out.append((n, flat[off:off + a.size].reshape(a.shape)))
            off += a.size
        return ModelWeights(out)

    def equal(self, other: "ModelWeights") -> bool:
        return (self.names() == other.names() and
                all(np.array_equal(a, b) for (_, a), (_, b)
                    in zip(self.entries, other.entries)))


# ---------------------------------------------------------------------------
# layer specs

@dataclass(frozen=True)
class Conv3x3:
    name: str
    out_channels: int


@dataclass(frozen=True)
class Dense:
    name: str
    out_features: int


@dataclass(frozen=True)
class Relu:
    name: str = "relu"


@dataclass(frozen=True)
class MaxPool2:
    name: str = "pool"


@dataclass(frozen=True)
class Flatten:
    name: str = "flatten"


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W) or (D,)

    def output_shapes(self):
        """Per-layer output shapes; validates layer compatibility."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Conv3x3):
                if len(shape) != 3:
                    raise ShapeError(f"conv {layer.name} needs (C,H,W), got {shape}")
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, MaxPool2):
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ShapeError(f"pool {layer.name} needs even dims, got {shape}")
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"dense {layer.name} needs flat input, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Relu):
                pass
            else:
                raise ShapeError(f"unknown layer {layer!r}")
            shapes.append(shape)
        return shapes

    @property
    def output_dim(self):
        return self.output_shapes()[-1][0]


def init_weights(spec: ModelSpec, rng: np.random.Generator) -> ModelWeights:
    """Fan-in-scaled uniform initialization, deterministic given rng."""
    entries = []
    shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.output_shapes()):
        if isinstance(layer, Conv3x3):
            fan_in = shape[0] * 9
            limit = np.sqrt(1.0 / fan_in)
            entries.append((f"{layer.name}.w",
                            rng.uniform(-limit, limit,
                                        size=(layer.out_channels, shape[0], 3, 3))))
            entries.append((f"{layer.name}.b", np.zeros(layer.out_channels)))
        elif isinstance(layer, Dense):
            fan_in = shape[0]
            limit = np.sqrt(1.0 / fan_in)
            entries.append((f"{layer.name}.w",
                            rng.uniform(-limit, limit,
                                        size=(shape[0], layer.out_features))))
            entries.append((f"{layer.name}.b", np.zeros(layer.out_features)))
        shape = out_shape
    return ModelWeights(entries)


# ---------------------------------------------------------------------------
# forward / backward

def _im2col(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (B, C, H, W, 3, 3) -> (B, H*W, C*9)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h * w, c * 9)


def _col2im(dcols, b, c, h, w):
    dxp = np.zeros((b, c, h + 2, w + 2))
    d6 = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += d6[:, :, :, :, i, j]
    return dxp[:, :, 1:h + 1, 1:w + 1]


def forward(spec: ModelSpec, w: ModelWeights, batch: np.ndarray):
    """Run the net; returns (output, cache) where cache feeds backward."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} != spec input {spec.input_shape}")
    cache = []
    for layer in spec.layers:
        if isinstance(layer, Conv3x3):
            bsz, c, h, wd = x.shape
            cols = _im2col(x)
            wf = w[f"{layer.name}.w"].reshape(layer.out_channels, -1)
            out = cols @ wf.T + w[f"{layer.name}.b"]
            cache.append((layer, (cols, x.shape)))
            x = out.reshape(bsz, h, wd, layer.out_channels).transpose(0, 3, 1, 2)
        elif isinstance(layer, Dense):
            cache.append((layer, x))
            x = x @ w[f"{layer.name}.w"] + w[f"{layer.name}.b"]
        elif isinstance(layer, Relu):
            mask = x > 0
            cache.append((layer, mask))
            x = x * mask
        elif isinstance(layer, MaxPool2):
            bsz, c, h, wd = x.shape
            blocks = x.reshape(bsz, c, h // 2, 2, wd // 2, 2) \
                      .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, wd // 2, 4)
            arg = blocks.argmax(axis=-1)
            cache.append((layer, (arg, x.shape)))
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            cache.append((layer, x.shape))
            x = x.reshape(x.shape[0], -1)
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite activations in forward pass")
    return x, (spec, w, cache)


def backward(cache, grad_out: np.ndarray) -> ModelWeights:
    """Backprop grad_out through the cached forward; returns named grads."""
    spec, w, layer_caches = cache
    g = np.asarray(grad_out, dtype=np.float64)
    grads = {}
    for layer, saved in reversed(layer_caches):
        if isinstance(layer, Conv3x3):
            cols, x_shape = saved
            bsz, c, h, wd = x_shape
            gout = g.transpose(0, 2, 3, 1).reshape(bsz, h * wd, layer.out_channels)
            wf = w[f"{layer.name}.w"].reshape(layer.out_channels, -1)
            grads[f"{layer.name}.w"] = np.einsum("bpo,bpk->ok", gout, cols) \
                .reshape(w[f"{layer.name}.w"].shape)
            grads[f"{layer.name}.b"] = gout.sum(axis=(0, 1))
            g = _col2im(gout @ wf, bsz, c, h, wd)
        elif isinstance(layer, Dense):
            x = saved
            grads[f"{layer.name}.w"] = x.T @ g
            grads[f"{layer.name}.b"] = g.sum(axis=0)
            g = g @ w[f"{layer.name}.w"].T
        elif isinstance(layer, Relu):
            g = g * saved
        elif isinstance(layer, MaxPool2):
            arg, x_shape = saved
            bsz, c, h, wd = x_shape
            blocks = np.zeros((bsz, c, h // 2, wd // 2, 4))
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            g = blocks.reshape(bsz, c, h // 2, wd // 2, 2, 2) \
                .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, wd)
        elif isinstance(layer, Flatten):
            g = g.reshape(saved)
    return ModelWeights([(name, grads.get(name, np.zeros_like(arr)))
                         for name, arr in w.entries])


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax of the true class, plus grad wrt logits."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# optimizer and schedule

@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: ModelWeights | None = None


def sgd_step(w: ModelWeights, grad: ModelWeights, state: SgdState) -> ModelWeights:
    """v <- m*v + (g + wd*w); w <- w - lr*v. Mutates state.velocity."""
    if state.velocity is None:
        state.velocity = w.zeros_like()
    new_w, new_v = [], []
    for (name, wa), (_, ga), (_, va) in zip(w.entries, grad.entries,
                                            state.velocity.entries):
        if wa.shape != ga.shape:
            raise ShapeError(f"grad shape mismatch for {name}")
        v = state.momentum * va + (ga + state.weight_decay * wa)
        upd = wa - state.lr * v
        if not np.isfinite(upd).all():
            raise NonFiniteError(f"non-finite update for parameter {name}")
        new_v.append((name, v))
        new_w.append((name, upd))
    state.velocity = ModelWeights(new_v)
    return ModelWeights(new_w)


@dataclass(frozen=True)
class StepSchedule:
    base_lr: float
    factor: float = 0.1
    period: int = 30

    def lr(self, t: int) -> float:
        return self.base_lr * self.factor ** (t // self.period)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_steps: int

    def lr(self, t: int) -> float:
        return 0.5 * self.base_lr * (1 + np.cos(np.pi * t / max(1, self.total_steps)))


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"FEDW"
CKPT_VERSION = 1


def save_checkpoint(w: ModelWeights, path) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(w.entries)))
        for name, arr in w.entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelWeights:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a FEDW checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(dims)
            entries.append((name, arr.copy()))
    return ModelWeights(entries)
