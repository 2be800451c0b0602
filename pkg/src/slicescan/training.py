"""Training loop, learning-rate schedule, evaluation and gradient checking."""
from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .data import SegmentationData, augment_batch
from .errors import ConfigError, DivergenceError, NonFiniteError
from .losses import predict_labels, segmentation_loss
from .metrics import MetricsReport, mean_reports, segmentation_metrics
from .network import ModelConfig, build_model

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "loss", "dsc", "miou")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    initial_lr: float = 1e-3
    min_lr: float = 1e-5
    t_max: int = 50
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "bce_dice"
    deterministic: bool = True
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.initial_lr > self.min_lr > 0:
            raise ConfigError("need initial_lr > min_lr > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.t_max < 1:
            raise ConfigError("batch_size, epochs and t_max must be >= 1")
        if self.loss not in ("bce_dice", "ce_dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def full_train_config(**kw) -> TrainConfig:
    return replace(TrainConfig(batch_size=32, epochs=300, initial_lr=1e-3, min_lr=1e-5, t_max=50), **kw)


def desk_train_config(**kw) -> TrainConfig:
    return replace(TrainConfig(), **kw)


def overfit_train_config(**kw) -> TrainConfig:
    """Memorisation run on a handful of images: no augmentation, one cosine half-period."""
    return replace(TrainConfig(epochs=200, t_max=200, initial_lr=3e-3, augment=False), **kw)


def cosine_lr(epoch, initial_lr, min_lr, t_max):
    """Closed-form cosine annealing (period ``2 * t_max``)."""
    return min_lr + 0.5 * (initial_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / t_max))


@contextlib.contextmanager
def determinism(enabled=True):
    """Single-threaded, deterministic torch kernels for the duration of the block."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    prev = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.set_num_threads(threads)


def make_optimizer(model, tc: TrainConfig):
    return torch.optim.AdamW(
        model.parameters(), lr=tc.initial_lr, betas=tc.betas, eps=tc.adam_eps,
        weight_decay=tc.weight_decay, foreach=False,
    )


def _dice_iou(pred, target, num_classes):
    """Pooled foreground DSC and IoU (macro over foreground classes) from label tensors."""
    dsc, iou = [], []
    for k in range(1, max(num_classes, 2)):
        p = pred == k
        t = target == k
        tp = (p & t).sum().item()
        fp = (p & ~t).sum().item()
        fn = (~p & t).sum().item()
        dsc.append(1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        iou.append(1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn))
    return float(np.mean(dsc)), float(np.mean(iou))


def _train(model_config: ModelConfig, tc: TrainConfig, data: SegmentationData, sample_genotype=None,
           on_epoch=None):
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if tuple(data.images.shape[-2:]) != model_config.input_resolution:
        raise ConfigError(
            f"data resolution {tuple(data.images.shape[-2:])} does not match model {model_config.input_resolution}"
        )
    model = build_model(model_config, seed=tc.seed)
    opt = make_optimizer(model, tc)
    data_rng = np.random.default_rng([tc.seed, 1])
    geno_rng = np.random.default_rng([tc.seed, 2])
    history, genotypes = [], []
    n = len(data)
    step = 0
    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc.initial_lr, tc.min_lr, tc.t_max)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = data_rng.permutation(n)
        total, preds, targets = 0.0, [], []
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            imgs, masks = data.images[idx], data.masks[idx]
            if tc.augment:
                imgs, masks = augment_batch(imgs, masks, data_rng)
            x = torch.from_numpy(np.ascontiguousarray(imgs))
            y = torch.from_numpy(np.ascontiguousarray(masks))
            genotype = None
            if sample_genotype is not None:
                genotype = sample_genotype(geno_rng)
                genotypes.append((epoch, step, genotype))
            try:
                logits = model(x, genotype=genotype)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite activations at epoch {epoch}, step {step}") from exc
            loss = segmentation_loss(tc.loss, logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            preds.append(predict_labels(tc.loss, logits.detach()))
            targets.append(y)
            step += 1
        dsc, miou = _dice_iou(torch.cat(preds), torch.cat(targets), model_config.num_classes)
        row = {"epoch": epoch, "lr": lr, "loss": total / n, "dsc": dsc, "miou": miou}
        history.append(row)
        log.debug("epoch %d lr %.3g loss %.4f dsc %.4f", epoch, lr, row["loss"], dsc)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return model, history, genotypes


def fit(model_config: ModelConfig, train_config: TrainConfig, dataset: SegmentationData, on_epoch=None):
    """Train a fresh model; returns ``(model, history)``."""
    with determinism(train_config.deterministic):
        model, history, _ = _train(model_config, train_config, dataset, on_epoch=on_epoch)
    return model, history


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r["epoch"], repr(float(r["lr"])), repr(float(r["loss"])), repr(float(r["dsc"])), repr(float(r["miou"]))])
    return buf.getvalue()


@torch.no_grad()
def predict(model, images, loss_kind="bce_dice", genotype=None, batch_size=8):
    out = []
    model.eval()
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
        out.append(predict_labels(loss_kind, model(x, genotype=genotype)).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(images.shape[-2:]), np.int64)


def evaluate(model, data: SegmentationData, loss_kind="bce_dice", genotype=None, include_background=False) -> MetricsReport:
    """Per-image metrics averaged over the split, in file order."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    preds = predict(model, data.images, loss_kind, genotype)
    return mean_reports(
        segmentation_metrics(p, g, data.num_classes, include_background) for p, g in zip(preds, data.masks)
    )


# ---------------------------------------------------------------- gradient check


def grad_check_fn(loss_fn, params, eps=1e-3, n_samples=200, seed=0, floor=1e-6):
    """Compare autograd against central differences on ``n_samples`` random coordinates.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Returns ``(max_error, details)``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    coords = rng.choice(total, size=min(n_samples, total), replace=False)
    errors = []
    with torch.no_grad():
        for c in np.sort(coords):
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[k].view(-1)
            i = int(c - offsets[k])
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = analytic[k].view(-1)[i].item()
            errors.append(abs(a - num) / max(abs(a), abs(num), floor))
    errors = np.array(errors)
    return float(errors.max()), {"errors": errors, "coords": np.sort(coords)}


def grad_check(model_config: ModelConfig, eps=1e-3, n_samples=200, seed=0, loss_kind=None, batch=1):
    """Gradient check of the full network in float64 on a fixed random input/target."""
    loss_kind = loss_kind or ("bce_dice" if model_config.num_classes <= 2 else "ce_dice")
    with determinism(True):
        model = build_model(model_config, seed=seed, dtype=torch.float64)
        gen = torch.Generator().manual_seed(seed + 1)
        H, W = model_config.input_resolution
        x = torch.rand(batch, model_config.input_channels, H, W, generator=gen, dtype=torch.float64)
        K = max(model_config.num_classes, 2)
        y = torch.randint(0, K, (batch, H, W), generator=gen)

        def loss_fn():
            return segmentation_loss(loss_kind, model(x), y)

        err, _ = grad_check_fn(loss_fn, list(model.parameters()), eps=eps, n_samples=n_samples, seed=seed)
    return err
