"""Gaussian trajectory predictors and the training loop.

Two predictors are provided: a closed-form constant-velocity baseline and a
small fully connected network trained with any of the losses in
:mod:`calibnav.losses`. Both map an 8-step observation to 12 bivariate
Gaussians.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .gaussian import validate_params
from .losses import BinCapWarning, KdeConfig, LossValueAndGrad, combined_loss, nll_loss, nll_mhd_loss

log = logging.getLogger(__name__)

OBS_LEN = 8
PRED_LEN = 12
FRAME_DT = 0.4  # seconds between frames at 2.5 fps
CHECKPOINT_FORMAT = "calibnav-checkpoint"
CHECKPOINT_VERSION = 1

# pre-activation clamps keep exp/tanh outputs inside the valid covariance set
LOG_SIGMA_CLIP = 8.0
RHO_PRE_CLIP = 5.0


@dataclass
class TrajectoryWindow:
    ped_id: int
    obs: np.ndarray  # (8, 2)
    future: np.ndarray  # (12, 2)
    scene_id: str = ""
    start_frame: int = 0

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float)
        self.future = np.asarray(self.future, dtype=float)
        if self.obs.shape != (OBS_LEN, 2) or self.future.shape != (PRED_LEN, 2):
            raise ValueError(
                f"window needs obs (8, 2) and future (12, 2); got {self.obs.shape}, {self.future.shape}"
            )

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "ped_id": self.ped_id,
            "start_frame": self.start_frame,
            "obs": self.obs.tolist(),
            "future": self.future.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryWindow":
        return cls(int(d["ped_id"]), d["obs"], d["future"], d.get("scene_id", ""), int(d.get("start_frame", 0)))


@dataclass
class PredictionBatch:
    """Per-window, per-step Gaussians ``params (W, 12, 5)`` aligned with ``truth (W, 12, 2)``."""

    params: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self.truth = np.asarray(self.truth, dtype=float)
        if self.params.shape[:-1] != self.truth.shape[:-1]:
            raise ValueError("predictions and ground truth are not aligned")

    def __len__(self):
        return self.params.shape[0]


def stack_obs(windows: Sequence[TrajectoryWindow]) -> np.ndarray:
    return np.stack([w.obs for w in windows]) if windows else np.zeros((0, OBS_LEN, 2))


def stack_future(windows: Sequence[TrajectoryWindow]) -> np.ndarray:
    return np.stack([w.future for w in windows]) if windows else np.zeros((0, PRED_LEN, 2))


class Predictor(Protocol):
    def predict(self, obs: np.ndarray) -> np.ndarray:
        """``obs (N, T, 2)`` observed positions to ``(N, 12, 5)`` Gaussians."""


def cv_params(obs: np.ndarray, sigma0: float, growth: float) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-2] < 2:
        raise ValueError("constant-velocity prediction needs at least 2 observed points")
    if sigma0 <= 0 or growth < 0:
        raise ValueError("need sigma0 > 0 and growth >= 0")
    last = obs[..., -1, :]
    vel = last - obs[..., -2, :]
    k = np.arange(1, PRED_LEN + 1, dtype=float)
    means = last[..., None, :] + k[:, None] * vel[..., None, :]
    out = np.zeros(obs.shape[:-2] + (PRED_LEN, 5))
    out[..., :2] = means
    out[..., 2] = out[..., 3] = sigma0 + k * growth
    return out


def predict_cv(window: TrajectoryWindow, sigma0: float = 0.1, growth: float = 0.05) -> np.ndarray:
    """Linear extrapolation of the last observed displacement with isotropic growing spread."""
    return cv_params(window.obs, sigma0, growth)


@dataclass
class CVPredictor:
    sigma0: float = 0.1
    growth: float = 0.05

    def predict(self, obs: np.ndarray) -> np.ndarray:
        return cv_params(obs, self.sigma0, self.growth)


# -- reference network -------------------------------------------------------


@dataclass
class ModelParams:
    vector: np.ndarray
    layer_sizes: tuple = (2 * (OBS_LEN - 1), 64, 64, 5 * PRED_LEN)
    seed: int = 0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.vector.size != param_count(self.layer_sizes):
            raise ValueError(
                f"parameter vector has {self.vector.size} entries, architecture needs {param_count(self.layer_sizes)}"
            )
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("non-finite model parameters")

    def copy(self) -> "ModelParams":
        return ModelParams(self.vector.copy(), self.layer_sizes, self.seed)


def param_count(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def unpack(vector: np.ndarray, sizes) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = vector[pos : pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((w, vector[pos : pos + b]))
        pos += b
    return layers


def init_params(seed: int = 0, hidden: int = 64, out_scale: float = 0.1) -> ModelParams:
    """Glorot-uniform hidden layers; the output layer is shrunk so training starts near
    "stay put, unit spread"."""
    sizes = (2 * (OBS_LEN - 1), hidden, hidden, 5 * PRED_LEN)
    rng = np.random.default_rng(seed)
    chunks = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = math.sqrt(6.0 / (a + b))
        if i == len(sizes) - 2:
            lim *= out_scale
        chunks.append(rng.uniform(-lim, lim, size=a * b))
        chunks.append(np.zeros(b))
    return ModelParams(np.concatenate(chunks), sizes, seed)


def features(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    rel = obs[:, :-1, :] - obs[:, -1:, :]
    return rel.reshape(obs.shape[0], -1)


def _forward(params: ModelParams, obs: np.ndarray):
    x = features(obs)
    layers = unpack(params.vector, params.layer_sizes)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    raw = acts[-1].reshape(obs.shape[0], PRED_LEN, 5)
    last = obs[:, -1, :]
    lsx = np.clip(raw[..., 2], -LOG_SIGMA_CLIP, LOG_SIGMA_CLIP)
    lsy = np.clip(raw[..., 3], -LOG_SIGMA_CLIP, LOG_SIGMA_CLIP)
    rpre = np.clip(raw[..., 4], -RHO_PRE_CLIP, RHO_PRE_CLIP)
    out = np.empty(raw.shape)
    out[..., :2] = raw[..., :2] + last[:, None, :]
    out[..., 2] = np.exp(lsx)
    out[..., 3] = np.exp(lsy)
    out[..., 4] = np.tanh(rpre)
    return out, (layers, acts, raw)


def predict_mlp(params: ModelParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    out, _ = _forward(params, obs)
    return out[0] if single else out


def backprop(params: ModelParams, obs: np.ndarray, dparams: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameter vector, given dL/d(output Gaussians)."""
    out, (layers, acts, raw) = _forward(params, obs)
    draw = np.array(dparams, dtype=float)
    draw[..., 2] *= out[..., 2] * (np.abs(raw[..., 2]) < LOG_SIGMA_CLIP)
    draw[..., 3] *= out[..., 3] * (np.abs(raw[..., 3]) < LOG_SIGMA_CLIP)
    draw[..., 4] *= (1.0 - out[..., 4] ** 2) * (np.abs(raw[..., 4]) < RHO_PRE_CLIP)
    delta = draw.reshape(obs.shape[0], -1)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    flat = []
    for gw, gb in reversed(grads):
        flat.append(gw.ravel())
        flat.append(gb)
    return np.concatenate(flat)


@dataclass
class MLPPredictor:
    params: ModelParams

    def predict(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-2] != OBS_LEN:
            raise ValueError(f"network needs {OBS_LEN} observed steps, got {obs.shape[-2]}")
        return predict_mlp(self.params, obs)


@dataclass
class ScaledCovariancePredictor:
    """Wraps another predictor and multiplies its covariances by ``factor``."""

    base: Predictor
    factor: float

    def predict(self, obs: np.ndarray) -> np.ndarray:
        out = np.array(self.base.predict(obs))
        out[..., 2:4] *= math.sqrt(self.factor)
        return out


# -- training ----------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={value})")
        self.epoch = epoch


LOSS_KINDS = ("nll", "nll_mhd", "cdf")


@dataclass
class TrainConfig:
    epochs: int = 600
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta: float = 1.0
    penalty_weight: float = 1.0
    batch_size: int = 64
    seed: int = 0
    loss: str = "cdf"
    kde: KdeConfig = field(default_factory=KdeConfig)

    def __post_init__(self):
        if isinstance(self.kde, dict):
            self.kde = KdeConfig(**self.kde)
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs and batch_size must be positive and lr non-negative")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}; expected one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate_loss(kind: str, params, truth, cfg: TrainConfig) -> LossValueAndGrad:
    if kind == "nll":
        return nll_loss(params, truth)
    if kind == "nll_mhd":
        return nll_mhd_loss(params, truth, cfg.penalty_weight)
    if kind == "cdf":
        return combined_loss(params, truth, cfg.beta, cfg.kde)
    raise ValueError(f"unknown loss kind {kind!r}")


def make_batches(windows: Sequence[TrajectoryWindow], batch_size: int) -> list[np.ndarray]:
    """Index batches of windows that are adjacent in (scene, start frame)."""
    order = sorted(range(len(windows)), key=lambda i: (windows[i].scene_id, windows[i].start_frame, windows[i].ped_id))
    order = np.asarray(order, dtype=int)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train(
    model: ModelParams,
    windows: Sequence[TrajectoryWindow],
    cfg: TrainConfig,
    val_windows: Sequence[TrajectoryWindow] | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[dict]]:
    if not windows:
        raise ValueError("empty training split")
    obs = stack_obs(windows)
    fut = stack_future(windows)
    batches = make_batches(windows, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    theta = model.vector.copy()
    opt = Adam(theta.size, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    trace = []
    with warnings.catch_warnings():
        # early epochs routinely produce huge distances; the bin cap is expected there
        warnings.simplefilter("ignore", BinCapWarning)
        for epoch in range(1, cfg.epochs + 1):
            totals: dict[str, float] = {}
            for b in rng.permutation(len(batches)):
                idx = batches[b]
                current = ModelParams(theta, model.layer_sizes, model.seed)
                res = evaluate_loss(cfg.loss, predict_mlp(current, obs[idx]), fut[idx], cfg)
                if not math.isfinite(res.value):
                    raise TrainingDiverged(epoch, res.value)
                grad = backprop(current, obs[idx], res.grad)
                if not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(epoch, float("nan"))
                theta = opt.step(theta, grad)
                totals["loss"] = totals.get("loss", 0.0) + res.value
                for key, val in res.components.items():
                    if key != "bins":
                        totals[key] = totals.get(key, 0.0) + float(val)
            row = {"epoch": epoch}
            row.update({k: v / len(batches) for k, v in totals.items()})
            if val_windows:
                p = predict_mlp(ModelParams(theta, model.layer_sizes, model.seed), stack_obs(val_windows))
                err = np.linalg.norm(p[..., :2] - stack_future(val_windows), axis=-1)
                row["val_ade"] = float(err.mean())
                row["val_fde"] = float(err[:, -1].mean())
            trace.append(row)
            if on_epoch is not None:
                on_epoch(row)
    return ModelParams(theta, model.layer_sizes, model.seed), trace


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "kind": "mlp",
            "layer_sizes": list(params.layer_sizes),
            "activation": "tanh",
            "obs_len": OBS_LEN,
            "pred_len": PRED_LEN,
        },
        "seed": params.seed,
        "train_config": cfg.to_dict() if cfg is not None else None,
        "params": [float(v) for v in params.vector],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arch = doc["architecture"]
    if arch["obs_len"] != OBS_LEN or arch["pred_len"] != PRED_LEN:
        raise ValueError("checkpoint window shape does not match 8 observed / 12 predicted steps")
    params = ModelParams(np.array(doc["params"], dtype=float), tuple(arch["layer_sizes"]), int(doc["seed"]))
    validate_params(predict_mlp(params, np.zeros((1, OBS_LEN, 2))))
    return params, doc
