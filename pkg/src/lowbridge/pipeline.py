"""Two-stage source-domain training, fine-tuning-free target inference, and
the no-adaptation / supervised reference baselines.

Stage 1 fits the generator to rebuild source images from their Canny edges.
Stage 2 freezes it and fits the segmenter on the regenerated images. At test
time a target image goes through edges -> generator -> segmenter; nothing is
updated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from lowbridge.data import AugmentationConfig, DatasetManifest, augment
from lowbridge.edge import CannyParams, extract_edges
from lowbridge.metrics import MetricsReport, evaluate_dataset
from lowbridge.model import (
    ModelSpec,
    ParameterSet,
    build_model,
    checkpoint_bytes,
    forward_generator,
    forward_segmenter,
    model_forward,
    save_checkpoint,
)
from lowbridge.objective import LossWeights, loss_gen, loss_seg, make_optimizer, optimizer_step
from lowbridge.tensor import Tensor, backward, no_grad

__all__ = [
    "TrainConfig",
    "RunRecord",
    "TrainResult",
    "TrainingDivergedError",
    "generator_config",
    "segmenter_config",
    "train_generator",
    "train_segmenter",
    "train_raw_segmenter",
    "generate_images",
    "adapt_and_segment",
    "predict_raw",
    "evaluate_predictions",
    "baseline",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    loss_weights: LossWeights = field(default_factory=LossWeights)
    input_size: int = 224
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    canny: CannyParams = field(default_factory=CannyParams)
    model: ModelSpec = field(default_factory=ModelSpec)
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.input_size % 2 ** self.model.depth:
            raise ValueError(f"input_size {self.input_size} not divisible by 2^depth={2 ** self.model.depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
        if isinstance(d.get("canny"), dict):
            d["canny"] = CannyParams.from_dict(d["canny"])
        if isinstance(d.get("model"), dict):
            d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)

    def config_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def config_hash(self) -> str:
        return hashlib.sha256(self.config_bytes()).hexdigest()


def generator_config(preset: str = "full", **overrides) -> TrainConfig:
    """Stage-1 defaults. ``full``: 224 px, UNet depth 4, Adam 1e-4, batch 6.
    ``desk``: 64 px, UNet depth 3 / base 8, Adam 2e-3, batch 6, 30 epochs."""
    if preset == "full":
        cfg = TrainConfig(epochs=100, batch_size=6, optimizer="adam", lr=1e-4, weight_decay=0.0,
                          input_size=224, model=ModelSpec.generator("unet", 16, 4))
    elif preset == "desk":
        cfg = TrainConfig(epochs=30, batch_size=6, optimizer="adam", lr=2e-3, weight_decay=0.0,
                          input_size=64, model=ModelSpec.generator("unet", 8, 3),
                          augmentation=AugmentationConfig(crop_scale=(0.85, 1.0), rotation_deg=15.0))
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return replace(cfg, **overrides)


def segmenter_config(num_classes: int, preset: str = "full", **overrides) -> TrainConfig:
    """Stage-2 defaults. ``full``: 224 px, UNet depth 4, AdamW 1e-3, batch 4.
    ``desk``: 64 px, UNet depth 3 / base 8, AdamW 2e-3, batch 4, 20 epochs."""
    if preset == "full":
        cfg = TrainConfig(epochs=100, batch_size=4, optimizer="adamw", lr=1e-3, weight_decay=0.01,
                          input_size=224, model=ModelSpec.segmenter(num_classes, "unet", 16, 4))
    elif preset == "desk":
        cfg = TrainConfig(epochs=20, batch_size=4, optimizer="adamw", lr=2e-3, weight_decay=0.01,
                          input_size=64, model=ModelSpec.segmenter(num_classes, "unet", 8, 3),
                          augmentation=AugmentationConfig(crop_scale=(0.85, 1.0), rotation_deg=15.0))
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return replace(cfg, **overrides)


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_id: str = ""
    config_hash: str = ""

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())


class TrainResult(NamedTuple):
    params: ParameterSet
    record: RunRecord


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf. ``last_good`` holds the parameters from the last finished epoch."""

    def __init__(self, msg: str, last_good: ParameterSet | None = None):
        super().__init__(msg)
        self.last_good = last_good


# ----------------------------------------------------------------------------
# data handling


def _load_split(manifest: DatasetManifest, need_labels: bool):
    if need_labels and not manifest.labeled:
        raise ValueError(f"manifest {manifest.modality!r} is unlabeled; labels are required here")
    images = [manifest.load_image(i) for i in range(len(manifest))]
    labels = [manifest.load_label(i) for i in range(len(manifest))] if need_labels else None
    return images, labels


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _augmented(cfg: TrainConfig, image, label, epoch: int, index: int):
    aug = replace(cfg.augmentation, output_size=cfg.input_size)
    return augment(image, label, aug, _sample_rng(cfg.seed, epoch, index))


def _edges_batch(images: Sequence[np.ndarray], canny: CannyParams) -> np.ndarray:
    return np.stack([extract_edges(im, canny).data for im in images])[:, None].astype(np.float32)


def generate_images(gen_params: ParameterSet, images: Sequence[np.ndarray], canny: CannyParams,
                    batch_size: int = 8) -> np.ndarray:
    """G(E(x)) for each image, as an (N, H, W) float32 array. No graph is recorded."""
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            edges = _edges_batch(images[s:s + batch_size], canny)
            out.append(forward_generator(gen_params, Tensor(edges)).data[:, 0])
    return np.concatenate(out, axis=0)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _optimize(params: ParameterSet, cfg: TrainConfig, n: int, batch_loss: Callable, tag: str) -> RunRecord:
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay if cfg.optimizer == "adamw" else None)
    record = RunRecord(config_hash=cfg.config_hash())
    last_good = params.copy()
    t_run = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
            params.zero_grad()
            loss = batch_loss(idx, epoch)
            value = loss.item()
            if not math.isfinite(value):
                if cfg.checkpoint_path:
                    save_checkpoint(last_good, cfg.checkpoint_path)
                raise TrainingDivergedError(
                    f"{tag}: loss became {value} at epoch {epoch}; last good epoch {last_good.epoch}", last_good
                )
            backward(loss)
            optimizer_step(opt, params)
            total += value * len(idx)
            count += len(idx)
        params.epoch = epoch + 1
        last_good = params.copy()
        entry = {"epoch": epoch + 1, "loss": total / max(count, 1), "seconds": round(time.perf_counter() - t0, 3)}
        record.epochs.append(entry)
        log.info("%s epoch %d/%d loss %.5f (%.1fs)", tag, epoch + 1, cfg.epochs, entry["loss"], entry["seconds"])
    record.wall_time = time.perf_counter() - t_run
    params.zero_grad()
    record.checkpoint_id = params.digest()
    if cfg.checkpoint_path:
        save_checkpoint(params, cfg.checkpoint_path)
    return record


# ----------------------------------------------------------------------------
# training


def train_generator(source: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Fit G so that G(E(x)) reproduces each source image x (weighted pixel MSE)."""
    spec = cfg.model
    if spec.final_activation != "sigmoid" or spec.in_channels != 1 or spec.out_channels != 1:
        raise ValueError("generator spec must map 1 channel to 1 channel with a sigmoid head")
    images, _ = _load_split(source, need_labels=False)
    params, _ = build_model(spec, cfg.seed)
    static = None
    if not cfg.augmentation.any_enabled:
        static = [_augmented(cfg, im, None, 0, i)[0] for i, im in enumerate(images)]
        static_edges = _edges_batch(static, cfg.canny)

    def batch_loss(idx, epoch):
        if static is not None:
            x = np.stack([static[i] for i in idx])[:, None]
            e = static_edges[idx]
        else:
            x = np.stack([_augmented(cfg, images[i], None, epoch, i)[0] for i in idx])[:, None]
            e = _edges_batch(x[:, 0], cfg.canny)
        g = model_forward(params, Tensor(e))
        return loss_gen(g, x, cfg.loss_weights)

    record = _optimize(params, cfg, len(images), batch_loss, "generator")
    return TrainResult(params, record)


def _train_seg(source: DatasetManifest, cfg: TrainConfig, to_input: Callable, tag: str) -> TrainResult:
    spec = cfg.model
    if spec.final_activation != "none" or spec.in_channels != 1:
        raise ValueError("segmenter spec must take 1 channel and emit logits")
    if spec.out_channels != source.num_classes:
        raise ValueError(f"segmenter has {spec.out_channels} outputs but the data has {source.num_classes} classes")
    if cfg.loss_weights.alpha_ce == 0 and cfg.loss_weights.alpha_dice == 0:
        raise ValueError("segmentation objective is degenerate: alpha_ce = alpha_dice = 0")
    images, labels = _load_split(source, need_labels=True)
    params, _ = build_model(spec, cfg.seed)
    static = None
    if not cfg.augmentation.any_enabled:
        pairs = [_augmented(cfg, im, lab, 0, i) for i, (im, lab) in enumerate(zip(images, labels))]
        static = to_input([p[0] for p in pairs])
        static_labels = np.stack([p[1] for p in pairs])

    def batch_loss(idx, epoch):
        if static is not None:
            x, y = static[idx], static_labels[idx]
        else:
            pairs = [_augmented(cfg, images[i], labels[i], epoch, i) for i in idx]
            x = to_input([p[0] for p in pairs])
            y = np.stack([p[1] for p in pairs])
        logits = model_forward(params, Tensor(x[:, None]))
        return loss_seg(logits, y, cfg.loss_weights)

    record = _optimize(params, cfg, len(images), batch_loss, tag)
    return TrainResult(params, record)


def train_segmenter(source: DatasetManifest, gen_params: ParameterSet, cfg: TrainConfig) -> TrainResult:
    """Fit S on regenerated source images G(E(augment(x))) with G frozen."""
    before = checkpoint_bytes(gen_params)
    frozen = gen_params.copy().requires_grad_(False)

    def to_input(imgs):
        return generate_images(frozen, imgs, cfg.canny, batch_size=max(cfg.batch_size, 8))

    result = _train_seg(source, cfg, to_input, "segmenter")
    if checkpoint_bytes(gen_params) != before:
        raise RuntimeError("generator parameters changed during segmenter training")
    return result


def train_raw_segmenter(source: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Fit S directly on raw images (no edges, no generator)."""
    return _train_seg(source, cfg, lambda imgs: np.stack(imgs).astype(np.float32), "raw-segmenter")


# ----------------------------------------------------------------------------
# inference


def _check_size(image: np.ndarray, spec: ModelSpec, what: str) -> None:
    f = 2 ** spec.depth
    if image.ndim != 2 or image.shape[0] % f or image.shape[1] % f:
        raise ValueError(f"{what}: image dims {image.shape} must be divisible by 2^depth={f}")


def _segment(seg_params: ParameterSet, x: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = forward_segmenter(seg_params, Tensor(x[:, None]))
    return np.argmax(logits.data, axis=1).astype(np.int64)


def adapt_and_segment(target: DatasetManifest, gen_params: ParameterSet, seg_params: ParameterSet,
                      canny: CannyParams | None = None, batch_size: int = 8) -> list[np.ndarray]:
    """Label maps argmax S(G(E(x))) for every target image; no parameter is modified."""
    canny = canny or CannyParams()
    if gen_params.spec is None or seg_params.spec is None:
        raise ValueError("checkpoints must carry their model specs")
    if gen_params.spec.out_channels != seg_params.spec.in_channels:
        raise ValueError("generator output channels do not match segmenter input channels")
    if seg_params.spec.out_channels != target.num_classes:
        raise ValueError(
            f"segmenter predicts {seg_params.spec.out_channels} classes, manifest declares {target.num_classes}"
        )
    before = (checkpoint_bytes(gen_params), checkpoint_bytes(seg_params))
    preds: list[np.ndarray] = []
    for s in range(0, len(target), batch_size):
        imgs = [target.load_image(i) for i in range(s, min(s + batch_size, len(target)))]
        for im in imgs:
            _check_size(im, gen_params.spec, "generator")
            _check_size(im, seg_params.spec, "segmenter")
        g = generate_images(gen_params, imgs, canny, batch_size)
        preds.extend(_segment(seg_params, g))
    if (checkpoint_bytes(gen_params), checkpoint_bytes(seg_params)) != before:
        raise RuntimeError("parameters changed during inference")
    return preds


def predict_raw(seg_params: ParameterSet, target: DatasetManifest, batch_size: int = 8) -> list[np.ndarray]:
    """Label maps argmax S(x) straight from the raw target images."""
    preds: list[np.ndarray] = []
    for s in range(0, len(target), batch_size):
        imgs = [target.load_image(i) for i in range(s, min(s + batch_size, len(target)))]
        for im in imgs:
            _check_size(im, seg_params.spec, "segmenter")
        preds.extend(_segment(seg_params, np.stack(imgs)))
    return preds


def evaluate_predictions(preds: Sequence[np.ndarray], truth: DatasetManifest) -> MetricsReport:
    truths = [truth.load_label(i) for i in range(len(truth))]
    spacings = [truth.spacing(i) for i in range(len(truth))]
    return evaluate_dataset(preds, truths, spacings, num_classes=truth.num_classes)


def baseline(mode: str, train: DatasetManifest, test: DatasetManifest, cfg: TrainConfig) -> MetricsReport:
    """Reference rows: ``no_adapt`` trains on raw source and tests on raw target;
    ``supervised`` trains and tests within the target modality."""
    if mode not in ("no_adapt", "supervised"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    if not train.labeled or not test.labeled:
        raise ValueError(f"baseline {mode} needs labeled train and test manifests")
    params, _ = train_raw_segmenter(train, cfg)
    return evaluate_predictions(predict_raw(params, test), test)
