"""Minibatch gradient-descent training with per-level supervision.

Every supervised prob-map is upsampled to ground-truth resolution before its
Dice term; the optimizer is Adam.  After each epoch the validation mean DSC
of the finest map is recorded, and the parameters of the best validation
epoch (ties resolved to the earliest) are kept as the run's checkpoint.  A
run is a deterministic function of its config and seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import NetworkConfig
from .data import SubImage, sample_patch, random_flip
from .loss import binarize, default_weights, dsc, evaluation_report, multiresolution_loss
from .resseg import MODEL_KINDS, PyramidOutput, build_model, save_model, supervised_maps


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass
class TrainConfig:
    model: str
    network: NetworkConfig
    epochs: int
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    patches_per_image: int = 4
    weights: list[float] | None = None  # None -> 1/4 per intermediate level, 1 final
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patches_per_image < 1:
            raise ValueError(f"patches_per_image must be >= 1, got {self.patches_per_image}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        network = doc.pop("network")
        if isinstance(network, dict):
            network = NetworkConfig(**network)
        return cls(network=network, **doc)


@dataclass
class TrainHistory:
    per_epoch: list[dict] = field(default_factory=list)  # {"epoch", "train_loss", "val_mean_dsc"}
    best_epoch: int = 0

    def to_json(self) -> str:
        return json.dumps({"per_epoch": self.per_epoch, "best_epoch": self.best_epoch}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainHistory":
        doc = json.loads(text)
        return cls(per_epoch=doc["per_epoch"], best_epoch=doc["best_epoch"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainHistory":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def resolved_weights(cfg: TrainConfig) -> list[float]:
    if cfg.weights is not None:
        return list(cfg.weights)
    return default_weights(num_supervised_maps(cfg))


def num_supervised_maps(cfg: TrainConfig) -> int:
    if cfg.model in ("ResSegFixed", "ResSegNonFixed"):
        return cfg.network.levels
    if cfg.model == "ResSegHorz":
        return 6
    return 1


def train(cfg: TrainConfig, train_images: list[SubImage], val_images: list[SubImage],
          checkpoint_path=None, log=None):
    """Run the full epoch budget and keep the best-validation parameters.

    Returns (model, TrainHistory); the returned model carries the best
    epoch's parameters, which are also written to `checkpoint_path` if given.
    """
    if not train_images or not val_images:
        raise ValueError("train and validation splits must be nonempty")
    patch_size = cfg.network.input_size
    for sub in train_images:
        if min(sub.mask.shape) < patch_size:
            raise ValueError(f"{sub.id}: smaller than patch size {patch_size}")

    model = build_model(cfg.model, cfg.network, seed=cfg.seed)
    weights = resolved_weights(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    history = TrainHistory()
    best_dsc = -1.0
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        entries = np.repeat(np.arange(len(train_images)), cfg.patches_per_image)
        rng.shuffle(entries)
        losses = []
        for batch_no, start in enumerate(range(0, len(entries), cfg.batch_size)):
            batch_idx = entries[start:start + cfg.batch_size]
            images, masks = [], []
            for i in batch_idx:
                img, msk = sample_patch(train_images[i], patch_size, rng)
                img, msk = random_flip(img, msk, rng)
                images.append(image_to_tensor(img))
                masks.append(torch.from_numpy(msk)[None].float())
            x = torch.stack(images)
            target = torch.stack(masks)

            optimizer.zero_grad()
            maps = supervised_maps(model, x)
            loss = multiresolution_loss(maps, target, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        val_dsc = evaluate(model, val_images, cfg.eval_threshold)["mean_dsc"]
        record = {
            "epoch": epoch,
            "train_loss": sum(losses) / len(losses),
            "val_mean_dsc": val_dsc,
        }
        history.per_epoch.append(record)
        if val_dsc > best_dsc:
            best_dsc = val_dsc
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if log is not None:
            log(f"epoch {epoch}: train_loss {record['train_loss']:+.4f} "
                f"val_dsc {val_dsc:.4f}")

    model.load_state_dict(best_state)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model)
    return model, history


def predict_full(model, image: np.ndarray, predictor=None) -> np.ndarray:
    """Full-image foreground probabilities from the finest prob-map.

    Images larger than the network input are covered by non-overlapping
    input-sized tiles, zero-padded at the right/bottom remainder.
    """
    if predictor is not None:
        return np.asarray(predictor(image), dtype=np.float64)
    size = model.config.input_size
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than network input {size}")
    model.eval()
    prob = np.zeros((h, w), dtype=np.float64)
    with torch.no_grad():
        for r0 in range(0, h, size):
            for c0 in range(0, w, size):
                tile = np.zeros((size, size, image.shape[2]), dtype=image.dtype)
                rs, cs = min(size, h - r0), min(size, w - c0)
                tile[:rs, :cs] = image[r0:r0 + rs, c0:c0 + cs]
                out = supervised_maps(model, image_to_tensor(tile)[None])[-1]
                prob[r0:r0 + rs, c0:c0 + cs] = out[0, 0, :rs, :cs].numpy()
    return prob


def evaluate(model, images: list[SubImage], threshold: float = 0.5, predictor=None) -> dict:
    """Per-image DSC of the binarized finest map, plus the macro mean.

    `predictor`, when given, replaces the model forward (hook for oracle
    tests); it maps an (H, W, 3) image array to an (H, W) probability array.
    """
    if not images:
        raise ValueError("evaluation split is empty")
    per_image = []
    for sub in images:
        prob = predict_full(model, sub.image, predictor=predictor)
        pred = binarize(prob, threshold)
        per_image.append((sub.id, dsc(pred, sub.mask)))
    return evaluation_report(per_image, threshold)
