"""Training and evaluation loops."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt_io
from . import functional as F
from .checkpoint import Checkpoint
from .data import Split, load_split
from .errors import ConfigError, NumericalInstabilityError
from .metrics import ConfusionMatrix, summary
from .network import ModelParams, NetConfig, asanet_forward, init_params
from .optim import AdamWHyper, AdamWState, adamw_step
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

IGNORE_INDEX = 255

# fixed K-entry palette for prediction PNGs (index -> RGB)
PALETTE = [
    (128, 128, 128),
    (0, 64, 255),
    (0, 128, 0),
    (255, 200, 0),
    (255, 0, 0),
    (255, 0, 255),
    (0, 255, 255),
    (128, 64, 0),
]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    batch_size: int = 8
    iterations: int = 2000
    eval_interval: int = 500
    seed: int = 0
    data: str = ""
    net: NetConfig = field(default_factory=NetConfig)
    flip: bool = True
    crop: Optional[int] = None
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        b1, b2 = self.betas
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.iterations < 1 or self.eval_interval < 1 or self.iterations < self.eval_interval:
            raise ConfigError("need iterations >= eval_interval >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.crop is not None and (self.crop != self.net.height or self.crop != self.net.width):
            raise ConfigError("crop size must equal the network input size")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.betas, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def to_inputs(rgb: np.ndarray, sar: np.ndarray, dtype=np.float32) -> Tuple[Tensor, Tensor]:
    """uint8 rasters -> [0, 1] tensors."""
    scale = dtype(1.0 / 255.0)
    return Tensor(rgb.astype(dtype) * scale), Tensor(sar.astype(dtype) * scale)


def augment(rng: np.random.Generator, rgb, sar, label, flip: bool, crop: Optional[int]):
    n, _, h, w = rgb.shape
    if crop is not None and crop < h:
        rgb_out = np.empty(rgb.shape[:2] + (crop, crop), rgb.dtype)
        sar_out = np.empty(sar.shape[:2] + (crop, crop), sar.dtype)
        lab_out = np.empty((n, crop, crop), label.dtype)
        for i in range(n):
            y, x = rng.integers(0, h - crop + 1), rng.integers(0, w - crop + 1)
            rgb_out[i] = rgb[i, :, y : y + crop, x : x + crop]
            sar_out[i] = sar[i, :, y : y + crop, x : x + crop]
            lab_out[i] = label[i, y : y + crop, x : x + crop]
        rgb, sar, label = rgb_out, sar_out, lab_out
    if flip:
        which = rng.random(n) < 0.5
        rgb = np.where(which[:, None, None, None], rgb[..., ::-1], rgb)
        sar = np.where(which[:, None, None, None], sar[..., ::-1], sar)
        label = np.where(which[:, None, None], label[..., ::-1], label)
    return rgb, sar, label


def predict(params: ModelParams, net: NetConfig, rgb: np.ndarray, sar: np.ndarray, batch: int = 32, dtype=np.float32) -> np.ndarray:
    """Argmax class map (lowest index wins ties) for uint8 inputs."""
    preds = []
    with no_grad():
        for i in range(0, len(rgb), batch):
            r, s = to_inputs(rgb[i : i + batch], sar[i : i + batch], dtype)
            logits = asanet_forward(r, s, net, params)
            preds.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(preds)


def evaluate_split(params: ModelParams, net: NetConfig, split: Split, batch: int = 32) -> Tuple[dict, np.ndarray]:
    if split.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {split.num_classes} classes, model expects {net.num_classes}")
    pred = predict(params, net, split.rgb, split.sar, batch)
    cm = ConfusionMatrix(net.num_classes).update(pred, split.label, IGNORE_INDEX)
    return summary(cm), pred


def write_png(path, pred: np.ndarray) -> None:
    from PIL import Image

    img = Image.fromarray(pred.astype(np.uint8), mode="P")
    flat = [v for rgb in PALETTE for v in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path, optimize=False)


def evaluate(ckpt: Checkpoint, split: Split, png_dir=None) -> dict:
    """Sweep a split with a checkpoint; optionally write indexed PNG maps."""
    net = NetConfig.from_dict(ckpt.config["net"])
    s, pred = evaluate_split(ckpt.params, net, split)
    if png_dir is not None:
        out = Path(png_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, p in zip(split.names, pred):
            write_png(out / (Path(name).stem + ".png"), p)
    return s


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[dict]
    seconds: float


def train(cfg: TrainConfig, train_split: Optional[Split] = None, val_split: Optional[Split] = None) -> TrainResult:
    """Seeded AdamW training with periodic validation and best-mIoU retention."""
    start = time.process_time()
    if train_split is None:
        train_split = load_split(cfg.data, "train")
    if val_split is None:
        val_split = load_split(cfg.data, "val")
    net = cfg.net
    for sp in (train_split, val_split):
        if sp.num_classes != net.num_classes:
            raise ConfigError(f"dataset has {sp.num_classes} classes, config expects {net.num_classes}")
    params = init_params(net, cfg.seed, cfg.dtype)
    state = AdamWState()
    hp = cfg.hyper
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    rows: List[dict] = []
    best = -math.inf
    best_params = params.copy()
    best_iter = 0
    last_finite = float("nan")
    n = len(train_split)
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, cfg.batch_size)
        rgb, sar, label = augment(
            rng, train_split.rgb[idx], train_split.sar[idx], train_split.label[idx], cfg.flip, cfg.crop
        )
        r, s = to_inputs(rgb, sar, cfg.dtype)
        loss = F.cross_entropy(asanet_forward(r, s, net, params), label, IGNORE_INDEX)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalInstabilityError(
                f"loss became {value} at iteration {it}; last finite loss {last_finite}"
            )
        last_finite = value
        loss.backward(free_graph=True)
        adamw_step(params, state, hp)
        params.zero_grad()
        row = {"iter": it, "loss": value, "val_miou": None}
        if it % cfg.eval_interval == 0:
            s_val, _ = evaluate_split(params, net, val_split)
            row["val_miou"] = s_val["miou"]
            if s_val["miou"] > best:
                best, best_params, best_iter = s_val["miou"], params.copy(), it
            log.info("iter %d loss %.4f val mIoU %.4f", it, value, s_val["miou"])
        rows.append(row)
    ck = Checkpoint(best_params, best_iter, float(best), {"net": net.to_dict(), "train": cfg.to_dict()})
    return TrainResult(ck, rows, time.process_time() - start)


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss", "val_miou"])
        for r in rows:
            w.writerow([r["iter"], repr(r["loss"]), "" if r["val_miou"] is None else repr(r["val_miou"])])


def save_checkpoint(ck: Checkpoint, path) -> None:
    ckpt_io.save(ck, path)
