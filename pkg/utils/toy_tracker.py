"""
Toy-scale heatmap ball tracker for SpinFlow
Renders simulated ball flights into low-resolution frames on textured noise,
trains a strided-conv encoder, recurrent cell and upsampling decoder with a
spatial-softmax head by plain gradient descent, and scores detections with
precision-recall AUC at 2 and 5 pixels
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from utils.config import PhysicsConfig, ToyTrainConfig
from utils.datatypes import TableGeometry
from utils.errors import DivergedLoss
from utils.gatedcell import (ConvLSTMParams, GatedCellParams, batch_heatmap_loss, conv2d, conv2d_backward,
                             conv_lstm_backward, conv_lstm_forward, gated_step_backward, gated_step_forward,
                             log_spatial_softmax, save_params)
from utils.geometry import CameraCalibration, look_at_camera, project_many
from utils.simulator import BallState, fly

logger = logging.getLogger(__name__)

AUC_RADII = (2, 5)
MAX_RENDER_ATTEMPTS = 200
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True, eq=False)
class ToyDataset:
    frames: np.ndarray   # (sequences, time, rows, cols)
    targets: np.ndarray  # (sequences, time, 2) integer (row, col)
    visible: np.ndarray  # (sequences, time) False where the ball is occluded

    def __len__(self) -> int:
        return len(self.frames)

    def split(self, fraction: float) -> Tuple["ToyDataset", "ToyDataset"]:
        cut = max(1, int(round(len(self) * (1.0 - fraction))))
        head = ToyDataset(self.frames[:cut], self.targets[:cut], self.visible[:cut])
        tail = ToyDataset(self.frames[cut:], self.targets[cut:], self.visible[cut:])
        return head, tail


def toy_camera(config: ToyTrainConfig) -> CameraCalibration:
    """Side view of the table scaled to the toy image size"""
    focal = 45.0 * config.width / 40.0
    return look_at_camera("toy", (4.0, 0.0, 1.2), (0.0, 0.0, 0.9), focal=focal,
                          image_size=(config.width, config.height))


def _texture(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    noise = np.pad(rng.random((rows, cols)), 1, mode="reflect")
    return 0.6 * sliding_window_view(noise, (3, 3)).mean(axis=(-2, -1))


def _random_flight(rng: np.random.Generator, config: ToyTrainConfig, camera: CameraCalibration,
                   table: TableGeometry, physics: PhysicsConfig) -> np.ndarray:
    """Pixel track (time, 2) of a simulated flight that stays inside the toy image"""
    for _ in range(MAX_RENDER_ATTEMPTS):
        direction = 1.0 if rng.random() < 0.5 else -1.0
        position = (rng.uniform(-0.3, 0.3), -direction * rng.uniform(0.4, 1.2), rng.uniform(0.85, 1.3))
        velocity = (rng.uniform(-0.5, 0.5), direction * rng.uniform(2.0, 6.0), rng.uniform(-1.0, 2.0))
        spin = (-direction * rng.uniform(0.0, 500.0), 0.0, 0.0)
        flight = fly(BallState(position=position, velocity=velocity, spin=spin), table, physics,
                     max_frames=config.seq_len - 1)
        if len(flight) < config.seq_len:
            continue
        pixels, depth = project_many(flight.positions[:config.seq_len], camera)
        inside = (depth > 0) & (pixels[:, 0] >= 0) & (pixels[:, 0] <= config.width - 1) \
            & (pixels[:, 1] >= 0) & (pixels[:, 1] <= config.height - 1)
        if np.all(inside):
            return pixels
    raise RuntimeError(f"no in-view flight found in {MAX_RENDER_ATTEMPTS} attempts")


def render_dataset(config: ToyTrainConfig, n_sequences: Optional[int] = None,
                   seed: Optional[int] = None) -> ToyDataset:
    """Bright ball disc over textured noise, with one scripted occlusion per sequence"""
    n_sequences = config.n_sequences if n_sequences is None else n_sequences
    rng = np.random.default_rng(config.seed if seed is None else seed)
    camera = toy_camera(config)
    table, physics = TableGeometry(), PhysicsConfig()
    rows, cols = np.mgrid[0:config.height, 0:config.width]

    frames = np.zeros((n_sequences, config.seq_len, config.height, config.width))
    targets = np.zeros((n_sequences, config.seq_len, 2), dtype=np.int64)
    visible = np.ones((n_sequences, config.seq_len), dtype=bool)
    for s in range(n_sequences):
        pixels = _random_flight(rng, config, camera, table, physics)
        background = _texture(rng, config.height, config.width)
        if config.occlusion_frames:
            start = int(rng.integers(1, config.seq_len - config.occlusion_frames + 1))
            visible[s, start:start + config.occlusion_frames] = False
        for t, (u, v) in enumerate(pixels):
            frame = background + 0.05 * rng.random(background.shape)
            if visible[s, t]:
                dist = np.hypot(cols - u, rows - v)
                frame = np.maximum(frame, np.clip(config.ball_radius + 0.5 - dist, 0.0, 1.0))
            frames[s, t] = frame
            targets[s, t] = (int(round(v)), int(round(u)))
    logger.info(f"Rendered {n_sequences} toy sequences of {config.seq_len} frames "
                f"at {config.width}x{config.height}")
    return ToyDataset(frames=frames, targets=targets, visible=visible)


class ToyTracker:
    """Encoder (conv, stride 2, tanh), recurrent cell, zero-insertion upsampling and conv decoder"""

    def __init__(self, config: ToyTrainConfig, rng: np.random.Generator):
        self.config = config
        C, k = config.channels, config.kernel_size
        self.params: Dict[str, np.ndarray] = {
            "W_enc": rng.normal(0.0, 1.0 / k, (C, 1, k, k)),
            # zero decoder: the untrained heatmap is uniform
            "W_dec": np.zeros((1, C, k, k)),
        }
        if config.cell == "lstm":
            lstm = ConvLSTMParams.init(C, C, k, rng)
            self.params.update({"W_lstm": lstm.W, "b_lstm": lstm.b})
        else:
            gated = GatedCellParams.init(C, C, k, rng)
            self.params.update({"W_z": gated.W_z, "W_c": gated.W_c})

    def _cell(self):
        if self.config.cell == "lstm":
            return ConvLSTMParams(self.params["W_lstm"], self.params["b_lstm"])
        return GatedCellParams(self.params["W_z"], self.params["W_c"])

    def forward(self, frames: np.ndarray) -> Tuple[np.ndarray, List]:
        """Logits (batch, time, rows, cols) for frames of the same shape"""
        n, steps, rows, cols = frames.shape
        cell = self._cell()
        C = self.config.channels
        h = np.zeros((n, C, rows // 2, cols // 2))
        c = np.zeros_like(h)
        logits = np.zeros(frames.shape)
        caches = []
        for t in range(steps):
            x = frames[:, t, None]
            e = np.tanh(conv2d(x, self.params["W_enc"])[:, :, ::2, ::2])
            if self.config.cell == "lstm":
                (h, c), cell_cache = conv_lstm_forward(e, h, c, cell)
            else:
                h_prev = np.zeros_like(h) if self.config.cell == "single" else h
                h, cell_cache = gated_step_forward(e, h_prev, cell)
            up = np.zeros((n, C, rows, cols))
            up[:, :, ::2, ::2] = h
            logits[:, t] = conv2d(up, self.params["W_dec"])[:, 0]
            caches.append((x, e, cell_cache, up))
        return logits, caches

    def backward(self, dlogits: np.ndarray, caches: List) -> Dict[str, np.ndarray]:
        """Backpropagation through time of a loss gradient w.r.t. the logits"""
        cell = self._cell()
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        dh_next = dc_next = None
        for t in reversed(range(len(caches))):
            x, e, cell_cache, up = caches[t]
            dup, dW_dec = conv2d_backward(dlogits[:, t, None], up, self.params["W_dec"])
            grads["W_dec"] += dW_dec
            dh = dup[:, :, ::2, ::2]
            if dh_next is not None:
                dh = dh + dh_next
            if self.config.cell == "lstm":
                if dc_next is None:
                    dc_next = np.zeros_like(dh)
                g = conv_lstm_backward(dh, dc_next, cell_cache, cell)
                grads["W_lstm"] += g["dW"]
                grads["b_lstm"] += g["db"]
                dc_next = g["dcell_prev"]
                dh_next = g["dh_prev"]
            else:
                g = gated_step_backward(dh, cell_cache, cell)
                grads["W_z"] += g["dW_z"]
                grads["W_c"] += g["dW_c"]
                dh_next = None if self.config.cell == "single" else g["dh_prev"]
            ds = g["dx"] * (1.0 - e ** 2)
            da = np.zeros((x.shape[0], ds.shape[1], x.shape[2], x.shape[3]))
            da[:, :, ::2, ::2] = ds
            _, dW_enc = conv2d_backward(da, x, self.params["W_enc"])
            grads["W_enc"] += dW_enc
        return grads

    def loss_and_grads(self, frames: np.ndarray, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        logits, caches = self.forward(frames)
        loss, dlogits = batch_heatmap_loss(logits, targets)
        return loss, self.backward(dlogits, caches)

    def log_heatmaps(self, frames: np.ndarray, batch_size: int = 32) -> np.ndarray:
        chunks = [log_spatial_softmax(self.forward(frames[i:i + batch_size])[0])
                  for i in range(0, len(frames), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros(frames.shape)


def detection_auc(log_heatmaps: np.ndarray, targets: np.ndarray, radius: float) -> float:
    """Area under the precision-recall curve of per-frame argmax detections ranked by log probability"""
    maps = log_heatmaps.reshape(-1, log_heatmaps.shape[-2], log_heatmaps.shape[-1])
    truth = targets.reshape(-1, 2)
    if len(maps) == 0:
        return 0.0
    flat = maps.reshape(len(maps), -1).argmax(axis=1)
    rows, cols = np.unravel_index(flat, maps.shape[1:])
    scores = maps.reshape(len(maps), -1)[np.arange(len(maps)), flat]
    correct = np.hypot(rows - truth[:, 0], cols - truth[:, 1]) <= radius

    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(correct[order])
    precision = hits / np.arange(1, len(order) + 1)
    recall = hits / len(order)
    precision = np.concatenate([[precision[0]], precision])
    recall = np.concatenate([[0.0], recall])
    return float(_trapezoid(precision, recall))


@dataclass(frozen=True, eq=False)
class ToyTrainingResult:
    cell: str
    params: Dict[str, np.ndarray]
    history: pd.DataFrame
    auc: Dict[int, float]

    def write(self, out_dir: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.history.to_csv(out / f"loss_{self.cell}.csv", index=False, float_format="%.10g")
        auc_frame = pd.DataFrame([{"cell": self.cell, **{f"auc@{r}": v for r, v in self.auc.items()}}])
        auc_frame.to_csv(out / f"auc_{self.cell}.csv", index=False, float_format="%.10g")
        save_params(str(out / f"params_{self.cell}.bin"), self.params)


def train_toy_tracker(train: ToyDataset, config: ToyTrainConfig,
                      evaluation: Optional[ToyDataset] = None) -> ToyTrainingResult:
    """Fixed-step gradient descent with global-norm clipping; DivergedLoss on a non-finite loss"""
    rng = np.random.default_rng(config.seed)
    model = ToyTracker(config, rng)
    batch = min(config.batch_size, len(train))
    losses = []
    for step in range(config.steps):
        idx = np.sort(rng.choice(len(train), size=batch, replace=False))
        loss, grads = model.loss_and_grads(train.frames[idx], train.targets[idx])
        if not math.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at step {step}")
        norm = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
        scale = config.learning_rate * min(1.0, config.clip_norm / norm) if norm > 0 else config.learning_rate
        for name, g in grads.items():
            model.params[name] -= scale * g
        losses.append(loss)
        if step % 50 == 0:
            logger.debug(f"{config.cell} step {step}: loss {loss:.4f}, grad norm {norm:.3f}")

    history = pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})
    history["smoothed_loss"] = history["loss"].rolling(config.smoothing, min_periods=1).mean()

    evaluation = evaluation if evaluation is not None else train
    log_maps = model.log_heatmaps(evaluation.frames, batch_size=max(batch, 1))
    auc = {r: detection_auc(log_maps, evaluation.targets, r) for r in AUC_RADII}
    logger.info(f"{config.cell} cell: final smoothed loss {history['smoothed_loss'].iloc[-1]:.4f}, "
                f"AUC@2 {auc[2]:.3f}, AUC@5 {auc[5]:.3f}")
    return ToyTrainingResult(cell=config.cell, params=dict(model.params), history=history, auc=auc)


def compare_cells(config: ToyTrainConfig, cells=("gated", "single", "lstm"),
                  eval_fraction: float = 0.2) -> Tuple[pd.DataFrame, List[ToyTrainingResult]]:
    """Train each cell variant on one occluded dataset and tabulate held-out AUC"""
    train, evaluation = render_dataset(config).split(eval_fraction)
    results = []
    for cell in cells:
        variant = replace(config, cell=cell)
        results.append(train_toy_tracker(train, variant, evaluation))
    table = pd.DataFrame([{"cell": r.cell, **{f"auc@{k}": v for k, v in r.auc.items()},
                           "initial_loss": r.history["smoothed_loss"].iloc[0],
                           "final_loss": r.history["smoothed_loss"].iloc[-1]} for r in results])
    return table, results
