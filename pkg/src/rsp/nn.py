"""Small feed-forward network engine: forward, exact backprop, Adam, cosine LR.

Everything here is plain numpy. Hidden layers use ReLU, the output layer is
linear. Dropout is inverted (masks are scaled by ``1/(1-p)`` at train time), so
inference needs no rescaling.

Parameters default to float32. Pass ``dtype=np.float64`` to :func:`mlp_init`
(or call :meth:`Mlp.astype`) for gradient checking.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TrainingError

MODEL_MAGIC = b"RSPM1"


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        """Flat parameter list in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.dropout_rate,
        )

    def copy(self) -> "Mlp":
        return self.astype(self.dtype)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each linear layer (post activation and dropout)
    pre: list[np.ndarray]  # pre-activations of the hidden layers
    masks: list[np.ndarray | None]  # scaled dropout masks per hidden layer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


@dataclass
class TrainSchedule:
    total_steps: int
    lr_max: float = 1e-3
    schedule_kind: str = "cosine"


def init_scale(fan_in: int) -> float:
    """Half-width of the uniform init, ``U(-a, a)`` with ``a = 1/sqrt(fan_in)``.

    The resulting weight variance is ``a**2 / 3 = 1 / (3 * fan_in)``.
    """
    return 1.0 / math.sqrt(fan_in)


def mlp_init(layer_dims, seed: int, dropout_rate: float = 0.0, dtype=np.float32) -> Mlp:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims must have >= 2 positive entries, got {list(layer_dims)}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = init_scale(fan_in)
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(dims, weights, biases, float(dropout_rate))


def mlp_forward(net: Mlp, x, train_mode: bool = False, rng=None, masks=None):
    """Run the network on a batch ``x`` of shape ``(B, in_dim)``.

    Returns ``(out, cache)``. In train mode with a positive dropout rate a
    random stream ``rng`` is required, unless explicit ``masks`` (one per hidden
    layer, already scaled) are supplied, which is how gradient checks hold the
    dropout pattern fixed.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of shape (B, {net.in_dim}), got {x.shape}")
    x = x.astype(net.dtype, copy=False)
    n_hidden = len(net.weights) - 1
    drop = train_mode and net.dropout_rate > 0.0
    if drop and masks is None and rng is None:
        raise ConfigError("train-mode dropout needs a random stream")
    inputs, pre, used_masks = [x], [], []
    h = x
    for i in range(n_hidden):
        z = h @ net.weights[i].T
        z += net.biases[i]
        pre.append(z)
        h = np.maximum(z, 0)
        mask = None
        if drop:
            if masks is not None:
                mask = masks[i]
            else:
                keep = 1.0 - net.dropout_rate
                mask = (rng.random(h.shape) < keep).astype(net.dtype) / net.dtype.type(keep)
            h = h * mask
        used_masks.append(mask)
        inputs.append(h)
    out = h @ net.weights[-1].T
    out += net.biases[-1]
    return out, ForwardCache(inputs, pre, used_masks)


def mlp_predict(net: Mlp, x) -> np.ndarray:
    """Inference-only forward pass (no cache kept)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of shape (B, {net.in_dim}), got {x.shape}")
    h = x.astype(net.dtype, copy=False)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T
        h += b
        if i < last:
            np.maximum(h, 0, out=h)
    return h


def mlp_backward(net: Mlp, cache: ForwardCache, d_out):
    """Exact gradients of ``sum(d_out * out)`` w.r.t. every weight and bias.

    Returns a list ordered like :meth:`Mlp.params`.
    """
    n_layers = len(net.weights)
    if len(cache.inputs) != n_layers or len(cache.pre) != n_layers - 1:
        raise ShapeError("cache does not belong to this network")
    d = np.asarray(d_out, dtype=net.dtype)
    if d.shape != (cache.inputs[0].shape[0], net.out_dim):
        raise ShapeError(f"d_out shape {d.shape} does not match output (B, {net.out_dim})")
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        a_in = cache.inputs[i]
        if a_in.shape[1] != net.weights[i].shape[1]:
            raise ShapeError("cache does not belong to this network")
        grads[2 * i] = d.T @ a_in
        grads[2 * i + 1] = d.sum(axis=0)
        if i == 0:
            break
        d = d @ net.weights[i]
        mask = cache.masks[i - 1]
        if mask is not None:
            d *= mask
        d *= cache.pre[i - 1] > 0
    return grads


def gaussian_nll_as_mse(pred, target):
    """Unit-variance Gaussian NLL up to constants, i.e. mean squared error.

    Returns ``(loss, d_pred)`` where the mean runs over every entry.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    count = diff.size
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / count) * diff


def cosine_lr(step: int, schedule: TrainSchedule) -> float:
    t = min(max(step, 0), schedule.total_steps)
    return schedule.lr_max * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


def adam_step(params, grads, state: AdamState, lr: float, step_index=None):
    """One in-place Adam update with bias correction.

    Raises :class:`TrainingError` if a gradient or an updated parameter is not
    finite. ``step_index`` only feeds the error message.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    at = state.step_count if step_index is None else step_index
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", at)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    step_size = lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p -= (step_size * m / denom).astype(p.dtype, copy=False)
    for p in params:
        if not np.all(np.isfinite(p)):
            raise TrainingError("non-finite parameter after update", at)


# --- checkpoint I/O -------------------------------------------------------


def _pack_header(header: dict) -> bytes:
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def model_nbytes(layer_dims, header_len: int) -> int:
    """Closed-form size of one RSPM1 record given its JSON header length."""
    n = sum(o * i + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))
    return len(MODEL_MAGIC) + 4 + header_len + 4 * n


def mlp_to_bytes(net: Mlp, extra: dict | None = None) -> bytes:
    header = {"layer_dims": list(net.layer_dims), "dropout_rate": net.dropout_rate}
    if extra:
        header.update(extra)
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(_pack_header(header))
    for p in net.params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def mlp_from_bytes(data: bytes, offset: int = 0):
    """Parse one RSPM1 record starting at ``offset``.

    Returns ``(net, header, end_offset)``.
    """
    if data[offset : offset + len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"bad model magic at offset {offset}")
    pos = offset + len(MODEL_MAGIC)
    if pos + 4 > len(data):
        raise FormatError(f"truncated model header length at offset {pos}")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise FormatError(f"truncated model header at offset {pos}")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        dims = [int(d) for d in header["layer_dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable model header at offset {pos}: {exc}") from None
    pos += hlen
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise FormatError(f"invalid layer_dims {dims} in model header at offset {offset}")
    weights, biases = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        for shape in ((o, i), (o,)):
            n = int(np.prod(shape))
            if pos + 4 * n > len(data):
                raise FormatError(f"truncated model parameters at offset {pos}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            (weights if len(shape) == 2 else biases).append(arr.astype(np.float32))
    net = Mlp(dims, weights, biases, float(header.get("dropout_rate", 0.0)))
    return net, header, pos


def save_mlp(net: Mlp, path, extra: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(mlp_to_bytes(net, extra))


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        data = f.read()
    net, _, end = mlp_from_bytes(data)
    if end != len(data):
        raise FormatError(f"trailing bytes after model at offset {end}")
    return net
