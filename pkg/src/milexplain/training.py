"""Bag-label training of a :class:`~milexplain.model.WsiClassifier`."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SlideBag
from .evaluation import roc_auc
from .model import WsiClassifier, forward_slide

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    l2_weight_decay: float = 0.03
    batch_size: int = 8
    seed: int = 42
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate < 0 or self.l2_weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_auc: float | None
    test_auc: float | None


@dataclass
class ClassificationResult:
    auc: float
    slide_ids: list[str]
    labels: np.ndarray
    probabilities: np.ndarray  # slides x C
    predicted: np.ndarray

    def members(self, c: int) -> list[str]:
        """Slides predicted to be in class ``c``."""
        return [s for s, p in zip(self.slide_ids, self.predicted) if p == c]


class NonFiniteLossError(ad.NonFiniteError):
    pass


def cross_entropy_loss(probs, label: int) -> ad.Tensor:
    """``-log max(P[label], 1e-12)``."""
    probs = probs if isinstance(probs, ad.Tensor) else ad.Tensor(probs)
    if not 0 <= label < probs.size:
        raise ValueError(f"label {label} out of range for {probs.size} classes")
    p = ad.clamp_min(ad.index(probs, label), PROB_FLOOR)
    return ad.mul(ad.log(p), -1.0)


def slide_loss_and_grads(model: WsiClassifier, bag: SlideBag) -> tuple[float, list[np.ndarray]]:
    """Loss of one bag and its gradient for every parameter, on a private tape."""
    with ad.Tape() as tape:
        fwd = forward_slide(model, bag)
        loss = cross_entropy_loss(fwd.prediction, bag.slide_label)
    ad.backward(loss, tape, attach=False)
    return loss.item(), [tape.grad(p) for p in model.parameters()]


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        c = self.cfg
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            m_hat = m / (1 - c.beta1**self.t)
            v_hat = v / (1 - c.beta2**self.t)
            p.data = p.data - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


class _Sgd:
    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g


def predict(model: WsiClassifier, bags: Sequence[SlideBag], threads: int = 1) -> np.ndarray:
    """Class probabilities, one row per bag."""
    def run(bag):
        return forward_slide(model, bag).prediction.data

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(run, bags))
    else:
        rows = [run(b) for b in bags]
    return np.array(rows)


def evaluate_classification(
    model: WsiClassifier, bags: Sequence[SlideBag], positive_class: int = 1, threads: int = 1
) -> ClassificationResult:
    """Slide-level AUC of the positive-class probability, plus per-slide predictions."""
    if not bags:
        raise ValueError("no slides to evaluate")
    labels = np.array([b.slide_label for b in bags])
    if np.any(labels < 0):
        raise ValueError("every evaluated slide needs a label")
    probs = predict(model, bags, threads)
    binary = (labels == positive_class).astype(int)
    auc = roc_auc(probs[:, positive_class], binary).auc
    return ClassificationResult(
        auc, [b.slide_id for b in bags], labels, probs, probs.argmax(axis=1)
    )


def _safe_auc(model, bags, threads):
    if not bags or len({b.slide_label for b in bags}) < 2:
        return None
    return evaluate_classification(model, bags, threads=threads).auc


def train(
    model: WsiClassifier,
    train_bags: Sequence[SlideBag],
    cfg: TrainConfig,
    test_bags: Sequence[SlideBag] = (),
    track_auc: bool = True,
) -> list[EpochRecord]:
    """Mini-batch training on slide labels; updates ``model`` in place.

    Per-slide gradients are computed independently (optionally on worker threads)
    and summed in slide order, so results do not depend on ``cfg.threads``.
    """
    cfg.validate()
    if not train_bags:
        raise ValueError("training split is empty")
    for b in train_bags:
        if not 0 <= b.slide_label < model.dims.C:
            raise ValueError(f"slide {b.slide_id}: label {b.slide_label} is not a valid class")
    params = model.parameters()
    opt = _Adam(params, cfg) if cfg.optimizer == "adam" else _Sgd(params, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_bags))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_bags[i] for i in order[start : start + cfg.batch_size]]
                if pool is not None:
                    results = list(pool.map(lambda b: slide_loss_and_grads(model, b), batch))
                else:
                    results = [slide_loss_and_grads(model, b) for b in batch]
                total = [np.zeros_like(p.data) for p in params]
                for loss, grads in results:
                    if not np.isfinite(loss):
                        raise NonFiniteLossError(f"non-finite loss at epoch {epoch}")
                    losses.append(loss)
                    for acc, g in zip(total, grads):
                        acc += g
                n = len(batch)
                grads = [
                    g / n + cfg.l2_weight_decay * p.data for g, p in zip(total, params)
                ]
                opt.step(grads)
                for p in params:
                    if not np.all(np.isfinite(p.data)):
                        raise NonFiniteLossError(f"parameters diverged at epoch {epoch}")
            rec = EpochRecord(
                epoch,
                float(np.mean(losses)),
                _safe_auc(model, train_bags, cfg.threads) if track_auc else None,
                _safe_auc(model, test_bags, cfg.threads) if track_auc else None,
            )
            logger.info("epoch %d loss %.4f train_auc %s test_auc %s", *asdict(rec).values())
            history.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(asdict(rec)) + "\n")
