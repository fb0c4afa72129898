"""Training regimes, AdamW, and the epoch loop.

Four regimes share one loop; they differ only in which parameters train:

  ti       nothing trains (zero-shot only; train() refuses it)
  fe       frozen backbone, classifier head only
  lora     frozen backbone, low-rank adapters + head
  vit_fs   every backbone parameter + head

The optimizer keeps two groups: backbone-side parameters at model_lr and
head parameters at head_lr.  Shuffling uses a counter-based generator keyed
by (seed, epoch), so epoch order never depends on how many batches an
earlier epoch produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from . import tensor as T
from .data import ImageDataset, hflip
from .errors import (ConfigError, DataError, NumericError, ParameterError,
                     StateError)
from .head import ClassifierHead, batch_bce
from .lora import AdaptedBackbone
from .tensor import Tape, Tensor
from .vit import VitBackbone

REGIMES = ("ti", "fe", "lora", "vit_fs")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "lora"
    epochs: int = 40
    batch_size: int = 256
    model_lr: float = 1e-5
    head_lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lora_r: int = 2
    lora_alpha: float = 4.0
    lora_dropout: float = 0.4
    lora_per_head: bool = False
    lora_rank_stabilized: bool = True
    flip_prob: float = 0.5
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; "
                              f"expected one of {REGIMES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")


# Published-scale defaults plus desk-scale variants sized for a laptop CPU.
# Desk learning rates are larger because the desk backbone starts from a
# random initialisation rather than a pretrained optimum neighbourhood.
TRAIN_PRESETS: dict[str, TrainConfig] = {
    "lora-vit-b": TrainConfig(regime="lora", model_lr=1e-5, head_lr=1e-4,
                              lora_r=2, lora_alpha=4.0, lora_dropout=0.4),
    "lora-vit-l": TrainConfig(regime="lora", model_lr=1e-5, head_lr=1e-4,
                              lora_r=2, lora_alpha=8.0, lora_dropout=0.2),
    "fe": TrainConfig(regime="fe", head_lr=1e-2),
    "vit-fs-b": TrainConfig(regime="vit_fs", model_lr=1e-5, head_lr=5e-5),
    "vit-fs-l": TrainConfig(regime="vit_fs", model_lr=1e-4, head_lr=1e-4),
    "desk-lora": TrainConfig(regime="lora", epochs=15, batch_size=32,
                             model_lr=2e-3, head_lr=1e-2, lora_r=2,
                             lora_alpha=4.0, lora_dropout=0.0),
    "desk-fe": TrainConfig(regime="fe", epochs=15, batch_size=32,
                           head_lr=1e-2),
    "desk-vit-fs": TrainConfig(regime="vit_fs", epochs=15, batch_size=32,
                               model_lr=1e-3, head_lr=5e-3),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown training preset {name!r}; expected one "
                          f"of {sorted(TRAIN_PRESETS)}")
    return replace(TRAIN_PRESETS[name], **overrides)


@dataclass
class Detector:
    """A backbone (plain or adapted) paired with the detection head."""

    backbone: VitBackbone | AdaptedBackbone
    head: ClassifierHead

    @property
    def config(self):
        return self.backbone.config

    def attack_scores(self, images, training=False, rng=None) -> np.ndarray:
        emb = self.backbone.encode(images, training=training, rng=rng)
        return self.head.attack_scores(emb).data


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    One instance handles several (params, lr) groups sharing the betas,
    eps and decay; state is per parameter, the step count is shared.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {}
        self._v = {}
        for params, _ in self.groups:
            for p in params:
                if p.frozen:
                    raise StateError(
                        f"frozen parameter {p.name!r} passed to the optimizer"
                    )
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def step(self):
        """Apply one update; every managed parameter must carry a gradient."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    raise StateError(
                        f"parameter {p.name!r} has no gradient; "
                        "run backward before step"
                    )
                g = p.grad
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    p.data -= lr * self.weight_decay * p.data
                p.data -= lr * update

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.grad = None


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
    """Single-parameter update, in place; exposed for unit verification."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    if weight_decay:
        p -= lr * weight_decay * p
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def build_trainable_set(detector: Detector, regime: str):
    """(model_params, head_params) that the regime trains.

    Freezes whatever the regime leaves fixed, so a later backward pass
    cannot deposit gradients outside the returned sets.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    head_params = list(detector.head.named_parameters().values())
    backbone = detector.backbone
    if regime == "ti":
        raise ConfigError("regime 'ti' performs no training")
    if regime == "fe":
        if isinstance(backbone, AdaptedBackbone):
            raise ConfigError("regime 'fe' expects a plain backbone")
        backbone.freeze()
        return [], head_params
    if regime == "lora":
        if not isinstance(backbone, AdaptedBackbone):
            raise ConfigError("regime 'lora' needs an adapter-injected "
                              "backbone")
        backbone.base.freeze()
        return list(backbone.named_adapter_parameters().values()), head_params
    if isinstance(backbone, AdaptedBackbone):
        raise ConfigError("regime 'vit_fs' expects a plain backbone")
    for p in backbone.named_parameters().values():
        p.frozen = False
    return list(backbone.named_parameters().values()), head_params


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Permutation from a counter-based generator keyed by (seed, epoch)."""
    bits = np.random.Philox(key=np.uint64(seed),
                            counter=[0, 0, 0, np.uint64(epoch)])
    return np.random.Generator(bits).permutation(n)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_eer: float


def epoch_log_csv(rows: list[EpochLog]) -> str:
    lines = ["epoch,mean_loss,train_eer"]
    for r in rows:
        lines.append(f"{r.epoch},{repr(r.mean_loss)},{repr(r.train_eer)}")
    return "\n".join(lines) + "\n"


def train(detector: Detector, dataset: ImageDataset, config: TrainConfig,
          on_epoch=None) -> list[EpochLog]:
    """Optimise the detector in place; returns the per-epoch log.

    on_epoch, when given, is called as on_epoch(epoch, log) after each
    epoch (checkpoint emission hooks in here).  Raises DataError when the
    dataset misses a class and NumericError (with the failing step index)
    if the loss goes non-finite.
    """
    labels = dataset.labels
    if np.all(labels == labels[0]):
        raise DataError("training data contains a single class")
    model_params, head_params = build_trainable_set(detector, config.regime)
    groups = []
    if model_params:
        groups.append((model_params, config.model_lr))
    groups.append((head_params, config.head_lr))
    opt = AdamW(groups, beta1=config.beta1, beta2=config.beta2,
                eps=config.eps, weight_decay=config.weight_decay)

    n = len(dataset)
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(config.epochs):
        order = _epoch_order(config.seed, epoch, n)
        aug_rng = np.random.default_rng([config.seed, epoch, 0xA06])
        losses: list[float] = []
        epoch_scores = np.empty(n)
        epoch_labels = np.empty(n, dtype=np.int64)
        filled = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = dataset.images[idx].copy()
            yb = labels[idx]
            for i in range(xb.shape[0]):
                if aug_rng.random() < config.flip_prob:
                    xb[i] = hflip(xb[i])
            with Tape():
                emb = detector.backbone.encode(xb, training=True,
                                               rng=aug_rng)
                probs = detector.head.attack_scores(emb)
                loss = batch_bce(probs, yb)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at optimisation step {step}"
                    )
                T.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss_val)
            epoch_scores[filled:filled + len(idx)] = probs.data
            epoch_labels[filled:filled + len(idx)] = yb
            filled += len(idx)
            step += 1
        train_eer = metrics.eer(metrics.ScoreSet(epoch_scores, epoch_labels))
        logs.append(EpochLog(epoch, float(np.mean(losses)), train_eer))
        if on_epoch is not None:
            on_epoch(epoch, logs[-1])
    return logs


def evaluate_scores(detector: Detector, dataset: ImageDataset,
                    batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Attack scores for a dataset in eval mode; order follows the dataset.

    threads > 1 shards batches across a thread pool; results are stitched
    back by index, so the output never depends on scheduling.
    """
    n = len(dataset)
    spans = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    out = np.empty(n)

    def run(span):
        s, e = span
        out[s:e] = detector.attack_scores(dataset.images[s:e])

    if threads <= 1 or len(spans) <= 1:
        for span in spans:
            run(span)
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, spans))
    return out
