"""Fully-connected embedding network, AdamW and step learning-rate decay.

Everything runs in float64. Batches are row-major ``(n, features)`` arrays;
a 1-D input is treated as a batch of one and returned 1-D.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import CheckpointError, DimError, NumericError, ParamError

ACTIVATIONS = {"none": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}

CKPT_MAGIC = b"OSSA-CKPT"
CKPT_VERSION = 1
END_TAG = b"END\x00"


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ParamError(f"unknown activation {self.activation!r}")


@dataclass
class EmbeddingModel:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise DimError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise DimError(f"layer dims do not chain: {prev.W.shape} -> {nxt.W.shape}")
        if self.layers[-1].activation != "none":
            raise DimError("final layer must have no activation")

    @property
    def input_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].W.shape[0]

    @property
    def widths(self):
        return [self.input_dim] + [layer.W.shape[0] for layer in self.layers]

    def params(self):
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def with_params(self, params):
        layers = [
            Layer(params[2 * i].copy(), params[2 * i + 1].copy(), layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return EmbeddingModel(layers)

    def copy(self):
        return self.with_params(self.params())


def init_model(widths, seed, final_activation="none"):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; relu on hidden layers."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise DimError(f"need at least input and output widths, got {widths}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        last = i == len(widths) - 2
        layers.append(Layer(W, b, final_activation if last else "relu"))
    return EmbeddingModel(layers)


@dataclass
class ForwardCache:
    inputs: list  # input to each layer, (n, in)
    preacts: list  # pre-activation of each layer, (n, out)
    squeeze: bool


def forward(model: EmbeddingModel, x, return_cache=False):
    X = np.asarray(x, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimError(f"input dim {X.shape[-1]} != model input dim {model.input_dim}")
    inputs, preacts = [], []
    a = X
    for layer in model.layers:
        inputs.append(a)
        z = a @ layer.W.T + layer.b
        preacts.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    out = a[0] if squeeze else a
    if return_cache:
        return out, ForwardCache(inputs, preacts, squeeze)
    return out


def backward(model: EmbeddingModel, cache: ForwardCache, upstream):
    """Reverse-mode gradients for ``sum(upstream * output)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned with
    ``model.params()``. Gradients are summed over the batch.
    """
    G = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze and G.ndim == 1:
        G = G[None, :]
    expected = (cache.inputs[0].shape[0], model.output_dim)
    if G.shape != expected:
        raise DimError(f"upstream gradient shape {G.shape} != {expected}")
    grads = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            G = G * (cache.preacts[i] > 0.0)
        grads[2 * i] = G.T @ cache.inputs[i]
        grads[2 * i + 1] = G.sum(axis=0)
        G = G @ layer.W
    return grads, (G[0] if cache.squeeze else G)


@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    return OptimizerState(
        m=[np.zeros_like(p, dtype=np.float64) for p in params],
        v=[np.zeros_like(p, dtype=np.float64) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adamw_step(params, grads, state: OptimizerState, lr=None):
    """One AdamW update with decoupled weight decay.

    ``lr`` overrides ``state.lr`` for this step (used by the epoch schedule).
    Returns new parameter arrays and a new state; inputs are not modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimError("params, grads and optimizer state disagree in length")
    lr = state.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, t=t)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    decay_factor: float = 1.0
    decay_interval: int = 1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ParamError("base_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ParamError("decay_factor must be in (0, 1]")
        if self.decay_interval < 1:
            raise ParamError("decay_interval must be a positive integer")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ParamError("epoch must be non-negative")
    return schedule.base_lr * schedule.decay_factor ** (epoch // schedule.decay_interval)


# -- checkpoints -----------------------------------------------------------


def _pack_arrays(arrays):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def _read_arrays(r):
    arrays = []
    for _ in range(r.unpack("<I")[0]):
        ndim = r.unpack("<I")[0]
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape))
    return arrays


def pack_arrays(arrays) -> bytes:
    return _pack_arrays(arrays)


def unpack_arrays(payload: bytes):
    r = _Reader(payload)
    arrays = _read_arrays(r)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in array block")
    return arrays


def pack_optimizer(state: OptimizerState) -> bytes:
    head = struct.pack("<Q5d", state.t, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay)
    return head + _pack_arrays(state.m) + _pack_arrays(state.v)


def unpack_optimizer(payload: bytes) -> OptimizerState:
    r = _Reader(payload)
    t, lr, b1, b2, eps, wd = r.unpack("<Q5d")
    m = _read_arrays(r)
    v = _read_arrays(r)
    return OptimizerState(m=m, v=v, t=t, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(model: EmbeddingModel, state: OptimizerState | None = None, blocks=None) -> bytes:
    """Serialize a model, optionally with optimizer state and extra tagged blocks.

    ``blocks`` maps 4-byte tags to raw payloads (e.g. proxies, a classifier head).
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        out_dim, in_dim = layer.W.shape
        buf.write(struct.pack("<iiB", out_dim, in_dim, ACTIVATIONS[layer.activation]))
        buf.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    extra = dict(blocks or {})
    if state is not None:
        extra[b"ADAM"] = pack_optimizer(state)
    for tag in sorted(extra):
        if len(tag) != 4 or tag == END_TAG:
            raise CheckpointError(f"invalid block tag {tag!r}")
        buf.write(tag)
        buf.write(struct.pack("<Q", len(extra[tag])))
        buf.write(extra[tag])
    buf.write(END_TAG)
    return buf.getvalue()


def load_checkpoint(data: bytes):
    """Inverse of :func:`save_checkpoint`: returns ``(model, state, blocks)``."""
    r = _Reader(bytes(data))
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<B")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_layers,) = r.unpack("<I")
    if n_layers == 0:
        raise CheckpointError("checkpoint has no layers")
    layers = []
    for _ in range(n_layers):
        out_dim, in_dim, code = r.unpack("<iiB")
        if out_dim < 1 or in_dim < 1 or code not in _ACT_NAMES:
            raise CheckpointError("corrupt layer header")
        W = np.frombuffer(r.take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(r.take(8 * out_dim), dtype="<f8")
        layers.append(Layer(W.astype(np.float64), b.astype(np.float64), _ACT_NAMES[code]))
    blocks = {}
    while True:
        tag = r.take(4)
        if tag == END_TAG:
            break
        (size,) = r.unpack("<Q")
        blocks[tag] = r.take(size)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after end marker")
    try:
        model = EmbeddingModel(layers)
    except DimError as exc:
        raise CheckpointError(str(exc)) from None
    state = unpack_optimizer(blocks.pop(b"ADAM")) if b"ADAM" in blocks else None
    return model, state, blocks


def minibatches(n, batch_size, rng):
    """Yield index arrays for one shuffled pass over ``n`` samples."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
