"""Joint loss, SGD with warmup+cosine schedule, augmentations, and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import ParamStore
from .model import AuCvt, ModelOutput
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # cross-entropy (expression) weight
    beta: float = 1.0  # binary cross-entropy (AU) weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 1e-4
    warmup_epochs: int = 3
    cosine_epochs: int = 7
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def cosine_steps(self) -> int:
        return self.cosine_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.cosine_steps

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.cosine_epochs


def lr_at(step: int, sched: LRSchedule) -> float:
    """Linear warmup to base_lr, then cosine decay to exactly zero.

    Steps past the schedule clamp to the final value.
    """
    if step < 0:
        raise ContractError("step must be non-negative")
    ws = sched.warmup_steps
    if ws > 0 and step < ws:
        return sched.base_lr * (step + 1) / ws
    cs = sched.cosine_steps
    if cs == 0:
        return sched.base_lr
    t = min(step - ws + 1, cs)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / cs))


@dataclass
class BatchLabels:
    """Per-sample optional expression ids plus masked AU targets.

    `au_targets` and `au_mask` are [B x 21] float arrays; a zero mask row
    means the sample carries no AU annotation.
    """

    expression: Sequence[Optional[int]]
    au_targets: np.ndarray
    au_mask: np.ndarray

    def has_expression(self) -> bool:
        return any(e is not None for e in self.expression)

    def has_au(self) -> bool:
        return bool(self.au_mask.any())


def joint_loss(out: ModelOutput, labels: BatchLabels, w: LossWeights) -> Tensor:
    """alpha * CE(expression-labeled rows) + beta * masked BCE(AU entries).

    A term whose coefficient is zero, or with no eligible entries, is
    dropped from the graph entirely so it contributes exactly 0 to both
    the value and every gradient.
    """
    ce, bce = joint_loss_parts(out, labels, w)
    total = None
    if ce is not None:
        total = ce * w.alpha
    if bce is not None:
        scaled = bce * w.beta
        total = scaled if total is None else T.add(total, scaled)
    assert total is not None  # joint_loss_parts raises on fully unlabeled batches
    return total


def joint_loss_parts(out: ModelOutput, labels: BatchLabels, w: LossWeights):
    """(CE tensor or None, BCE tensor or None); raises if the batch is unlabeled."""
    if not labels.has_expression() and not labels.has_au():
        raise ContractError("batch carries neither expression nor AU labels")
    ce = bce = None
    if w.alpha != 0.0 and labels.has_expression():
        ce = T.cross_entropy_mean(out.emotion_logits, labels.expression)
    if w.beta != 0.0 and labels.has_au():
        bce = T.bce_with_logits_mean(out.au_logits, labels.au_targets, labels.au_mask)
    return ce, bce


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimConfig:
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 16


def sgd_step(
    params: ParamStore,
    lr: float,
    weight_decay: float,
    momentum: float,
    state: dict,
):
    """v <- mu*v + (g + wd*w); w <- w - lr*v. `state` maps path -> buffer."""
    for path, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {path} has no gradient")
        g = t.grad + weight_decay * t.data
        if momentum != 0.0:
            v = state.get(path)
            if v is None:
                v = np.zeros_like(t.data)
            v = momentum * v + g
            state[path] = v
        else:
            v = g
        t.data -= lr * v


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    gray_p: float = 0.1
    blur_p: float = 0.5
    blur_kernel: int = 5
    blur_sigma: tuple = (0.1, 2.0)


_LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float, size: int = 5) -> np.ndarray:
    """Separable Gaussian blur with reflective padding, channels-first."""
    k = _gaussian_kernel1d(size, sigma)
    pad = size // 2
    out = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    tmp = np.zeros((image.shape[0], image.shape[1], out.shape[2]))
    for i in range(size):
        tmp += k[i] * out[:, i : i + image.shape[1], :]
    res = np.zeros_like(image)
    for i in range(size):
        res += k[i] * tmp[:, :, i : i + image.shape[2]]
    return res


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Random horizontal flip, random grayscale, random Gaussian blur.

    Input and output are [3,H,W] with values in [0,1]. All transforms are
    label-preserving for both expression and AU annotations.
    """
    out = image
    if rng.random() < cfg.flip_p:
        out = out[:, :, ::-1].copy()
    if rng.random() < cfg.gray_p:
        luma = np.tensordot(_LUMA, out, axes=(0, 0))
        out = np.repeat(luma[None], 3, axis=0)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = gaussian_blur(out, sigma, cfg.blur_kernel)
    return np.clip(out, 0.0, 1.0)


def normalize_for_model(image: np.ndarray) -> np.ndarray:
    """[0,1] pixels -> [-1,1] as fed to the CNN stem."""
    return (image - 0.5) / 0.5


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        cm[y, p] += 1
    return cm


def macro_f1(preds: Sequence[int], labels: Sequence[int], num_classes: int = 6) -> float:
    """Unweighted mean of per-class F1 = 2TP/(2TP+FP+FN), zero when undefined."""
    if len(preds) != len(labels):
        raise ContractError("preds and labels differ in length")
    if not preds:
        raise ContractError("macro_f1 on empty input")
    if any(not 0 <= p < num_classes for p in preds) or any(not 0 <= y < num_classes for y in labels):
        raise ContractError("class id out of range")
    cm = confusion_matrix(preds, labels, num_classes)
    scores = []
    for c in range(num_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    if len(preds) != len(labels):
        raise ContractError("preds and labels differ in length")
    if not preds:
        raise ContractError("accuracy on empty input")
    return float(sum(p == y for p, y in zip(preds, labels)) / len(preds))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LoadedSample:
    """A decoded training example: [3,H,W] pixels in [0,1] plus labels."""

    image: np.ndarray
    expression: Optional[int] = None
    au_values: Optional[np.ndarray] = None  # [21] floats in {0,1}
    au_mask: Optional[np.ndarray] = None  # [21] validity bits


@dataclass
class HistoryRow:
    step: int
    lr: float
    loss: float
    ce: float
    bce: float
    acc: float
    f1: float


def _batch_labels(samples: Sequence[LoadedSample]) -> BatchLabels:
    n = len(samples)
    targets = np.zeros((n, 21))
    mask = np.zeros((n, 21))
    expr = []
    for i, s in enumerate(samples):
        expr.append(s.expression)
        if s.au_mask is not None:
            targets[i] = s.au_values
            mask[i] = s.au_mask
    return BatchLabels(expr, targets, mask)


def _make_batch_tensor(samples, rng, aug: Optional[AugmentConfig]) -> Tensor:
    imgs = []
    for s in samples:
        img = s.image if aug is None else augment(s.image, rng, aug)
        imgs.append(normalize_for_model(img))
    return Tensor(np.stack(imgs))


def train_loop(
    model: AuCvt,
    params: ParamStore,
    target: Sequence[LoadedSample],
    aux: Optional[Sequence[LoadedSample]],
    sched: LRSchedule,
    weights: LossWeights,
    opt: OptimConfig,
    aug: Optional[AugmentConfig],
    seed: int,
    on_epoch_end: Optional[Callable] = None,
    start_step: int = 0,
    rng: Optional[np.random.Generator] = None,
    momentum_state: Optional[dict] = None,
) -> list:
    """Joint training over a target (expression) and optional auxiliary (AU) set.

    Batches mix target and auxiliary samples 1:1 when an auxiliary set is
    in play; with beta=0 the auxiliary set is ignored entirely, so the run
    is bit-identical to expression-only training under the same seed.
    Fully deterministic single-threaded for a fixed seed.
    """
    if not target:
        raise ContractError("target dataset is empty")
    if aux is not None and not aux:
        raise ContractError("auxiliary dataset is empty")
    use_aux = aux is not None and weights.beta != 0.0
    if rng is None:
        rng = np.random.default_rng(seed)
    state = momentum_state if momentum_state is not None else {}
    history: list = []
    n_target = opt.batch_size - opt.batch_size // 2 if use_aux else opt.batch_size
    n_aux = opt.batch_size // 2 if use_aux else 0

    for step in range(start_step, sched.total_steps):
        idx = rng.integers(0, len(target), size=n_target)
        batch = [target[i] for i in idx]
        if use_aux:
            aidx = rng.integers(0, len(aux), size=n_aux)
            batch = batch + [aux[i] for i in aidx]
        images = _make_batch_tensor(batch, rng, aug)
        labels = _batch_labels(batch)

        T.reset_tape()
        out = model.forward(images, params)
        ce_t, bce_t = joint_loss_parts(out, labels, weights)
        total = None
        if ce_t is not None:
            total = ce_t * weights.alpha
        if bce_t is not None:
            scaled = bce_t * weights.beta
            total = scaled if total is None else T.add(total, scaled)
        T.backward(total)
        params.ensure_grads()
        lr = lr_at(step, sched)
        sgd_step(params, lr, opt.weight_decay, opt.momentum, state)
        params.zero_grads()
        T.reset_tape()

        labeled = [(i, e) for i, e in enumerate(labels.expression) if e is not None]
        if labeled:
            pred_rows = out.emotion_logits.data[[i for i, _ in labeled]]
            preds = list(np.argmax(pred_rows, axis=1))
            ys = [e for _, e in labeled]
            acc = accuracy(preds, ys)
            f1 = macro_f1(preds, ys, model.cfg.num_classes)
        else:
            acc = f1 = 0.0
        history.append(
            HistoryRow(
                step=step,
                lr=lr,
                loss=total.item(),
                ce=ce_t.item() if ce_t is not None else 0.0,
                bce=bce_t.item() if bce_t is not None else 0.0,
                acc=acc,
                f1=f1,
            )
        )
        if on_epoch_end is not None and (step + 1) % sched.steps_per_epoch == 0:
            epoch = (step + 1) // sched.steps_per_epoch
            on_epoch_end(epoch, step, rng, state)
    return history


def evaluate(model: AuCvt, params: ParamStore, samples: Sequence[LoadedSample], batch_size: int = 16):
    """Deterministic metrics over a dataset; no augmentation applied."""
    labeled = [s for s in samples if s.expression is not None]
    if not labeled:
        raise ContractError("evaluation set has no expression labels")
    preds, ys = [], []
    with T.no_grad():
        for i in range(0, len(labeled), batch_size):
            chunk = labeled[i : i + batch_size]
            images = _make_batch_tensor(chunk, None, None)
            out = model.forward(images, params)
            preds.extend(np.argmax(out.emotion_logits.data, axis=1).tolist())
            ys.extend(s.expression for s in chunk)
    return {
        "macro_f1": macro_f1(preds, ys, model.cfg.num_classes),
        "accuracy": accuracy(preds, ys),
    }
