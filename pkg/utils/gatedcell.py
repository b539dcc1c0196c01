"""
Gated convolutional recurrence for SpinFlow
The simplified gated cell (gate and candidate convolutions over the input and
the previous hidden state, combined elementwise), a convolutional LSTM
baseline, the spatial-softmax heatmap head and their analytic gradients.
Everything runs in float64.

Feature maps are (batch, channel, row, col); a 3-D (channel, row, col) map is
treated as a batch of one.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import OutOfBounds, SchemaError, ShapeMismatch

logger = logging.getLogger(__name__)

DTYPE = np.float64


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _batched(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be (channel, row, col) or (batch, channel, row, col), got {x.shape}")
    return x


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """'same' zero-padded cross-correlation: x (N, Cin, H, W), w (Cout, Cin, k, k) -> (N, Cout, H, W)"""
    k = w.shape[-1]
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    patches = sliding_window_view(padded, (k, k), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", patches, w, optimize=True)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. its input and its kernel"""
    k = w.shape[-1]
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    patches = sliding_window_view(padded, (k, k), axis=(2, 3))
    dw = np.einsum("nohw,nchwij->ocij", grad, patches, optimize=True)
    flipped = np.transpose(w[:, :, ::-1, ::-1], (1, 0, 2, 3))
    dx = conv2d(grad, flipped)
    return dx, dw


@dataclass(frozen=True, eq=False)
class GatedCellParams:
    """Gate kernel W_z and candidate kernel W_c, both (hidden, input + hidden, k, k)"""
    W_z: np.ndarray
    W_c: np.ndarray

    def __post_init__(self):
        W_z = np.array(self.W_z, dtype=DTYPE)
        W_c = np.array(self.W_c, dtype=DTYPE)
        if W_z.shape != W_c.shape or W_z.ndim != 4:
            raise ShapeMismatch(f"W_z {W_z.shape} and W_c {W_c.shape} must be equal 4-D kernel banks")
        if W_z.shape[2] != W_z.shape[3] or W_z.shape[2] % 2 != 1:
            raise ShapeMismatch(f"kernels must be square with odd size, got {W_z.shape[2:]}")
        if W_z.shape[1] <= W_z.shape[0]:
            raise ShapeMismatch("kernel input channels must cover the input and the hidden state")
        object.__setattr__(self, "W_z", W_z)
        object.__setattr__(self, "W_c", W_c)

    @property
    def hidden_channels(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_channels(self) -> int:
        return self.W_z.shape[1] - self.W_z.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.W_z.shape[2]

    @classmethod
    def init(cls, input_channels: int, hidden_channels: int, kernel_size: int,
             rng: np.random.Generator) -> "GatedCellParams":
        shape = (hidden_channels, input_channels + hidden_channels, kernel_size, kernel_size)
        scale = 1.0 / np.sqrt(shape[1] * kernel_size ** 2)
        return cls(W_z=rng.normal(0.0, scale, shape), W_c=rng.normal(0.0, scale, shape))


def _check_state(x: np.ndarray, h_prev: np.ndarray, input_channels: int, hidden_channels: int) -> None:
    if x.shape[0] != h_prev.shape[0] or x.shape[2:] != h_prev.shape[2:]:
        raise ShapeMismatch(f"input {x.shape} and hidden state {h_prev.shape} differ in batch or spatial size")
    if x.shape[1] != input_channels or h_prev.shape[1] != hidden_channels:
        raise ShapeMismatch(f"expected {input_channels} input and {hidden_channels} hidden channels, "
                            f"got {x.shape[1]} and {h_prev.shape[1]}")


def gated_step_forward(x: np.ndarray, h_prev: np.ndarray, params: GatedCellParams):
    """h = sigmoid(W_z * u) . tanh(W_c * u) with u the channel concatenation of x and h_prev"""
    squeeze = np.asarray(x).ndim == 3
    x, h_prev = _batched(x, "x"), _batched(h_prev, "h_prev")
    _check_state(x, h_prev, params.input_channels, params.hidden_channels)
    u = np.concatenate([x, h_prev], axis=1)
    z = sigmoid(conv2d(u, params.W_z))
    c = np.tanh(conv2d(u, params.W_c))
    h = z * c
    cache = (u, z, c, x.shape[1], squeeze)
    return (h[0] if squeeze else h), cache


def gated_step(x: np.ndarray, h_prev: np.ndarray, params: GatedCellParams) -> np.ndarray:
    h, _ = gated_step_forward(x, h_prev, params)
    return h


def gated_step_backward(dh: np.ndarray, cache, params: GatedCellParams) -> Dict[str, np.ndarray]:
    """Returns dx, dh_prev, dW_z and dW_c"""
    u, z, c, n_x, squeeze = cache
    dh = _batched(dh, "dh")
    dz_pre = dh * c * z * (1.0 - z)
    dc_pre = dh * z * (1.0 - c ** 2)
    du_z, dW_z = conv2d_backward(dz_pre, u, params.W_z)
    du_c, dW_c = conv2d_backward(dc_pre, u, params.W_c)
    du = du_z + du_c
    dx, dh_prev = du[:, :n_x], du[:, n_x:]
    if squeeze:
        dx, dh_prev = dx[0], dh_prev[0]
    return {"dx": dx, "dh_prev": dh_prev, "dW_z": dW_z, "dW_c": dW_c}


@dataclass(frozen=True, eq=False)
class ConvLSTMParams:
    """Stacked gate kernels W (4 hidden, input + hidden, k, k) and biases b (4 hidden,) in i, f, o, g order"""
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=DTYPE)
        b = np.array(self.b, dtype=DTYPE).reshape(-1)
        if W.ndim != 4 or W.shape[0] % 4 or b.shape[0] != W.shape[0]:
            raise ShapeMismatch(f"LSTM kernel {W.shape} and bias {b.shape} do not stack four gates")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def hidden_channels(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_channels(self) -> int:
        return self.W.shape[1] - self.hidden_channels

    @classmethod
    def init(cls, input_channels: int, hidden_channels: int, kernel_size: int,
             rng: np.random.Generator) -> "ConvLSTMParams":
        shape = (4 * hidden_channels, input_channels + hidden_channels, kernel_size, kernel_size)
        scale = 1.0 / np.sqrt(shape[1] * kernel_size ** 2)
        b = np.zeros(4 * hidden_channels)
        # forget gate starts open
        b[hidden_channels:2 * hidden_channels] = 1.0
        return cls(W=rng.normal(0.0, scale, shape), b=b)


def conv_lstm_forward(x: np.ndarray, h_prev: np.ndarray, cell_prev: np.ndarray, params: ConvLSTMParams):
    squeeze = np.asarray(x).ndim == 3
    x, h_prev, cell_prev = _batched(x, "x"), _batched(h_prev, "h_prev"), _batched(cell_prev, "cell_prev")
    _check_state(x, h_prev, params.input_channels, params.hidden_channels)
    if cell_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"cell state {cell_prev.shape} differs from hidden state {h_prev.shape}")
    n_h = params.hidden_channels
    u = np.concatenate([x, h_prev], axis=1)
    pre = conv2d(u, params.W) + params.b[None, :, None, None]
    i = sigmoid(pre[:, :n_h])
    f = sigmoid(pre[:, n_h:2 * n_h])
    o = sigmoid(pre[:, 2 * n_h:3 * n_h])
    g = np.tanh(pre[:, 3 * n_h:])
    cell = f * cell_prev + i * g
    tanh_cell = np.tanh(cell)
    h = o * tanh_cell
    cache = (u, cell_prev, i, f, o, g, tanh_cell, x.shape[1], squeeze)
    if squeeze:
        return (h[0], cell[0]), cache
    return (h, cell), cache


def conv_lstm_step(x: np.ndarray, h_prev: np.ndarray, cell_prev: np.ndarray,
                   params: ConvLSTMParams) -> Tuple[np.ndarray, np.ndarray]:
    out, _ = conv_lstm_forward(x, h_prev, cell_prev, params)
    return out


def conv_lstm_backward(dh: np.ndarray, dcell: np.ndarray, cache, params: ConvLSTMParams) -> Dict[str, np.ndarray]:
    """Returns dx, dh_prev, dcell_prev, dW and db"""
    u, cell_prev, i, f, o, g, tanh_cell, n_x, squeeze = cache
    dh, dcell = _batched(dh, "dh"), _batched(dcell, "dcell")
    dc = dcell + dh * o * (1.0 - tanh_cell ** 2)
    d_pre = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cell_prev * f * (1.0 - f),
        dh * tanh_cell * o * (1.0 - o),
        dc * i * (1.0 - g ** 2),
    ], axis=1)
    du, dW = conv2d_backward(d_pre, u, params.W)
    db = d_pre.sum(axis=(0, 2, 3))
    dx, dh_prev, dcell_prev = du[:, :n_x], du[:, n_x:], dc * f
    if squeeze:
        dx, dh_prev, dcell_prev = dx[0], dh_prev[0], dcell_prev[0]
    return {"dx": dx, "dh_prev": dh_prev, "dcell_prev": dcell_prev, "dW": dW, "db": db}


def log_spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities over the last two (row, col) axes"""
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=(-2, -1), keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=(-2, -1), keepdims=True))


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Heatmap over all spatial locations of a single-channel (row, col) map, batched over leading axes"""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim < 2:
        raise ShapeMismatch(f"spatial_softmax needs at least a (row, col) map, got {logits.shape}")
    shifted = np.exp(logits - logits.max(axis=(-2, -1), keepdims=True))
    return shifted / shifted.sum(axis=(-2, -1), keepdims=True)


def _check_target(shape: Tuple[int, ...], target: Tuple[int, int]) -> Tuple[int, int]:
    row, col = int(target[0]), int(target[1])
    if not (0 <= row < shape[-2] and 0 <= col < shape[-1]):
        raise OutOfBounds(f"target {target} outside a {shape[-2]}x{shape[-1]} heatmap")
    return row, col


def heatmap_loss(pred: np.ndarray, target_pixel: Tuple[int, int]) -> float:
    """Cross-entropy -log(pred[row, col]) of a single heatmap"""
    row, col = _check_target(pred.shape, target_pixel)
    return float(-np.log(pred[row, col]))


def heatmap_loss_grad(logits: np.ndarray, target_pixel: Tuple[int, int]) -> Tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the logits of one (row, col) map"""
    row, col = _check_target(logits.shape, target_pixel)
    log_p = log_spatial_softmax(logits)
    grad = np.exp(log_p)
    grad[row, col] -= 1.0
    return float(-log_p[row, col]), grad


def batch_heatmap_loss(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over (..., row, col) logits with integer (..., 2) targets, and its gradient"""
    log_p = log_spatial_softmax(logits)
    flat = log_p.reshape(-1, log_p.shape[-2], log_p.shape[-1])
    rows, cols = targets.reshape(-1, 2).T
    if np.any(rows < 0) or np.any(rows >= flat.shape[1]) or np.any(cols < 0) or np.any(cols >= flat.shape[2]):
        raise OutOfBounds("heatmap target outside the map")
    picked = flat[np.arange(len(flat)), rows, cols]
    grad = np.exp(flat)
    grad[np.arange(len(flat)), rows, cols] -= 1.0
    count = len(flat)
    return float(-picked.mean()), (grad / count).reshape(log_p.shape)


def save_params(path: str, arrays: Dict[str, np.ndarray]) -> None:
    """Flat little-endian float64 blob at `path` plus a JSON shape manifest at `path`.json"""
    path = Path(path)
    manifest = {"dtype": "<f8", "arrays": []}
    offset = 0
    with open(path, "wb") as handle:
        for name in sorted(arrays):
            array = np.ascontiguousarray(arrays[name], dtype="<f8")
            handle.write(array.tobytes())
            manifest["arrays"].append({"name": name, "shape": list(array.shape), "offset": offset})
            offset += array.size
    with open(str(path) + ".json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
        handle.write("\n")
    logger.info(f"Saved {len(arrays)} parameter arrays ({offset} values) to {path}")


def load_params(path: str) -> Dict[str, np.ndarray]:
    manifest_path = str(path) + ".json"
    try:
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", path=manifest_path, line=e.lineno)
    blob = np.fromfile(path, dtype=manifest.get("dtype", "<f8"))
    arrays = {}
    for entry in manifest.get("arrays", []):
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = int(entry["offset"])
        if start + size > blob.size:
            raise SchemaError(f"array {entry['name']} runs past the end of the parameter file", path=str(path))
        arrays[entry["name"]] = blob[start:start + size].reshape(entry["shape"]).astype(DTYPE)
    return arrays
