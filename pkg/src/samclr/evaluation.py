"""Frozen-feature evaluation: KNN top-1 and linear probing."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .image_ops import CropRect, crop, resize_bilinear, to_tensor_array
from .tensor import Tape, Tensor


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    weighting: str = "cosine"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.weighting not in ("uniform", "cosine"):
            raise ValueError("weighting must be 'uniform' or 'cosine'")


@dataclass(frozen=True)
class ProbeConfig:
    weight_decay: float = 1e-4
    steps: int = 500
    lr: float = 0.1

    def __post_init__(self):
        if self.weight_decay < 0 or self.steps < 1 or self.lr <= 0:
            raise ValueError("need weight_decay >= 0, steps >= 1, lr > 0")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x ** 2).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def center_view(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    r = CropRect((w - side) // 2, (h - side) // 2, side, side)
    return to_tensor_array(resize_bilinear(crop(img, r), size, size))


def extract_features(images: Sequence[np.ndarray], model, view_size: int) -> np.ndarray:
    """Center-crop, resize, encode (no head) and L2-normalize each image."""
    if len(images) == 0:
        raise ValueError("no images to encode")
    views = np.stack([center_view(img, view_size) for img in images])
    return normalize_rows(model.features(views))


def make_bank(images: Sequence[np.ndarray], labels: Sequence[int], model, view_size: int,
              num_classes: int | None = None) -> FeatureBank:
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return FeatureBank(extract_features(images, model, view_size), labels, k)


def knn_predict_many(bank: FeatureBank, queries: np.ndarray, cfg: KnnConfig = KnnConfig()) -> np.ndarray:
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    if cfg.k > len(bank):
        raise ValueError(f"k={cfg.k} exceeds bank size {len(bank)}")
    queries = np.atleast_2d(queries)
    sims = queries @ bank.features.T
    # stable sort: equal similarities keep bank order
    top = np.argsort(-sims, axis=1, kind="stable")[:, :cfg.k]
    weights = np.take_along_axis(sims, top, axis=1) if cfg.weighting == "cosine" else np.ones(top.shape)
    votes = np.zeros((len(queries), bank.num_classes))
    np.add.at(votes, (np.arange(len(queries))[:, None], bank.labels[top]), weights)
    return np.argmax(votes, axis=1)


def knn_predict(bank: FeatureBank, query: np.ndarray, cfg: KnnConfig = KnnConfig()) -> int:
    return int(knn_predict_many(bank, query, cfg)[0])


def knn_accuracy(train: FeatureBank, test: FeatureBank, cfg: KnnConfig = KnnConfig()) -> float:
    if len(test) == 0:
        raise ValueError("empty test bank")
    pred = knn_predict_many(train, test.features, cfg)
    return float(np.mean(pred == test.labels))


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    losses: list[float] = field(default_factory=list)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(feats), axis=1)


def train_linear_probe(bank: FeatureBank, cfg: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent from zero init."""
    present = np.unique(bank.labels)
    if present.size < 2:
        raise ValueError("linear probe needs at least two classes")
    n, d = bank.features.shape
    c = bank.num_classes
    w = T.parameter(np.zeros((d, c)), "probe.weight")
    b = T.parameter(np.zeros((1, c)), "probe.bias")
    x = Tensor(bank.features)
    losses = []
    for _ in range(cfg.steps):
        w.zero_grad()
        b.zero_grad()
        with Tape() as tape:
            logits = T.add(T.matmul(x, w), b)
            ce = T.mean(T.sub(T.logsumexp_rows(logits), T.pick(logits, bank.labels)))
            loss = T.add(ce, T.scale(T.sum(T.mul(w, w)), 0.5 * cfg.weight_decay))
            tape.backward(loss)
        losses.append(loss.item())
        w.data = w.data - cfg.lr * w.grad
        b.data = b.data - cfg.lr * b.grad
    return LinearProbe(w.data.copy(), b.data[0].copy(), losses)


def linear_accuracy(probe: LinearProbe, test: FeatureBank) -> float:
    if test.features.shape[1] != probe.weight.shape[0]:
        raise ValueError("feature dimension does not match the probe")
    return float(np.mean(probe.predict(test.features) == test.labels))


def report_csv(rows: Sequence[tuple[str, str, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "dataset", "mode", "value"])
    for metric, dataset, mode, value in rows:
        w.writerow([metric, dataset, mode, f"{value:.6f}"])
    return buf.getvalue()
