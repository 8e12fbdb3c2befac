"""Encoder, projection head, NT-Xent loss and the contrastive training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .image_ops import JitterParams, augment_view, to_tensor_array
from .rng import RngStreamKey, derive_stream
from .sampling import SamplerConfig, ViewPair, sample_pair
from .tensor import AdamState, Tape, Tensor, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValueError("encoder needs >= 1 block with positive widths")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def output_side(self, view_size: int) -> int:
        s = view_size
        for _ in self.widths:
            s = (s - self.kernel) // self.stride + 1
        return s


@dataclass(frozen=True)
class HeadConfig:
    hidden: Optional[int] = None  # None -> encoder feature dim
    out_dim: int = 64

    def __post_init__(self):
        if self.out_dim < 1 or (self.hidden is not None and self.hidden < 1):
            raise ValueError("head dims must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    temperature: float = 0.07
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.epochs < 0 or self.eval_every < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, eval_every >= 1, lr > 0")


class Model:
    """Conv encoder (valid conv + relu blocks, global average pool) and MLP head."""

    def __init__(self, enc: EncoderConfig, head: HeadConfig, seed: int = 0, in_channels: int = 3):
        self.enc = enc
        self.head = head
        rng = derive_stream(RngStreamKey(seed, "init"))
        self.params: dict[str, Tensor] = {}
        c = in_channels
        for i, f in enumerate(enc.widths):
            fan_in = c * enc.kernel * enc.kernel
            self._add(f"encoder.conv{i}.weight", rng.normal(0, math.sqrt(2 / fan_in), (f, c, enc.kernel, enc.kernel)))
            self._add(f"encoder.conv{i}.bias", np.zeros((1, f, 1, 1)))
            c = f
        d = enc.feature_dim
        hidden = head.hidden or d
        self._add("head.fc1.weight", rng.normal(0, math.sqrt(2 / d), (d, hidden)))
        self._add("head.fc1.bias", np.zeros((1, hidden)))
        self._add("head.fc2.weight", rng.normal(0, math.sqrt(1 / hidden), (hidden, head.out_dim)))
        self._add("head.fc2.bias", np.zeros((1, head.out_dim)))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(value, name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v.data) for k, v in self.params.items()]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def encode(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.enc.widths)):
            h = T.conv2d(h, self.params[f"encoder.conv{i}.weight"], self.enc.stride)
            h = T.relu(T.add(h, self.params[f"encoder.conv{i}.bias"]))
        return T.global_avg_pool(h)

    def project(self, feats: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(feats, self.params["head.fc1.weight"]), self.params["head.fc1.bias"]))
        return T.add(T.matmul(h, self.params["head.fc2.weight"]), self.params["head.fc2.bias"])

    def features(self, views: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Encoder output for N×3×S×S views, no tape."""
        return np.concatenate([self.encode(Tensor(views[i:i + chunk])).data
                               for i in range(0, len(views), chunk)], axis=0)


def encode_project(views: Tensor, model: Model) -> Tensor:
    if views.data.ndim != 4 or views.shape[1] != 3:
        raise ValueError(f"views must be 2n×3×S×S, got {views.shape}")
    if views.shape[0] % 2:
        raise ValueError("view count must be even")
    if model.enc.output_side(views.shape[2]) < 1 or model.enc.output_side(views.shape[3]) < 1:
        raise ValueError(f"view size {views.shape[2:]} too small for the encoder")
    return T.l2_normalize(model.project(model.encode(views)))


def partner_index(m: int) -> np.ndarray:
    """Rows 2i and 2i+1 are the positive pair of image i."""
    return np.arange(m) ^ 1


def nt_xent(z: Tensor, temperature: float) -> Tensor:
    """Mean over all 2n ordered positive pairs of -log softmax(sim/τ)[partner].

    The softmax runs over every other row of the batch (k != i).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    m = z.shape[0]
    if z.data.ndim != 2 or m < 2 or m % 2:
        raise ValueError(f"embedding batch must be 2n×d with n >= 1, got {z.shape}")
    norms = np.sqrt((z.data ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("embedding rows are not L2-normalized")
    logits = T.scale(T.matmul(z, T.transpose(z)), 1.0 / temperature)
    lse = T.logsumexp_rows(logits, exclude=np.eye(m, dtype=bool))
    pos = T.pick(logits, partner_index(m))
    return T.mean(T.sub(lse, pos))


# -- training ------------------------------------------------------------------

class TrainingAborted(RuntimeError):
    def __init__(self, step: int, image_ids: Sequence[str], loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}; batch ids: {', '.join(image_ids)}")
        self.step = step
        self.image_ids = list(image_ids)


def worker_count() -> int:
    env = os.environ.get("SAMCLR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class TrainState:
    model: Model
    adam: AdamState
    step: int = 0


def make_views(samples, indices: Sequence[int], epoch: int, sampler: SamplerConfig,
               jitter: JitterParams, seed: int, pool: Optional[ThreadPoolExecutor] = None
               ) -> tuple[np.ndarray, list[ViewPair]]:
    """Sample a pair per image and augment both views; returns (2n×3×S×S, pairs)."""
    size = sampler.view_size

    def one(idx: int):
        s = samples[idx]
        h, w = s.image.shape[:2]
        pair = sample_pair(s.regions, w, h, sampler, derive_stream(RngStreamKey(seed, "sampling", epoch, idx, 0)),
                           s.image_id)
        views = []
        for v, rect in enumerate(pair.crops):
            rng = derive_stream(RngStreamKey(seed, "jitter", epoch, idx, v))
            views.append(to_tensor_array(augment_view(s.image, rect, size, jitter, rng, sampler.flip_p)))
        return pair, views

    results = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
    arr = np.stack([v for _, views in results for v in views])
    return arr, [p for p, _ in results]


def loss_and_grads(model: Model, views: np.ndarray, temperature: float) -> float:
    for p in model.parameters():
        p.zero_grad()
    with Tape() as tape:
        loss = nt_xent(encode_project(Tensor(views), model), temperature)
        tape.backward(loss)
    return loss.item()


def train_step(state: TrainState, views: np.ndarray, cfg: TrainConfig, image_ids: Sequence[str] = ()) -> float:
    if not np.isfinite(views).all():
        raise TrainingAborted(state.step, image_ids, float("nan"))
    value = loss_and_grads(state.model, views, cfg.temperature)
    if not math.isfinite(value):
        raise TrainingAborted(state.step, image_ids, value)
    params = state.model.parameters()
    adam_step(params, [p.grad for p in params], state.adam)
    state.step += 1
    return value


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    return derive_stream(RngStreamKey(seed, "sampling", epoch, -1, 0)).permutation(n)


@dataclass
class MetricsRow:
    step: int
    epoch: int
    loss: float
    knn_acc: float


@dataclass
class TrainResult:
    model: Model
    metrics: list[MetricsRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss", "knn_acc"])
    for r in rows:
        w.writerow([r.step, r.epoch, repr(float(r.loss)), repr(float(r.knn_acc))])
    return buf.getvalue()


def train_loop(samples, cfg: TrainConfig, sampler: SamplerConfig, enc: EncoderConfig = EncoderConfig(),
               head: HeadConfig = HeadConfig(), jitter: JitterParams = JitterParams(),
               evaluate: Optional[Callable[[Model], float]] = None,
               checkpoint: Optional[str | Path] = None, progress: Optional[Callable[[str], None]] = None
               ) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; log (step, epoch, loss, knn) every ``eval_every`` steps and at step 0."""
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 training images")
    if sampler.mode == "samclr" and any(s.regions is None for s in samples):
        raise ValueError("samclr mode needs region sets for every sample")
    if enc.output_side(sampler.view_size) < 1:
        raise ValueError(f"view size {sampler.view_size} too small for the encoder")
    model = Model(enc, head, cfg.seed)
    state = TrainState(model, AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps))
    result = TrainResult(model)
    batch = min(cfg.batch_size, n)
    per_epoch = n // batch
    workers = worker_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def record(epoch: int, loss: float) -> None:
        acc = evaluate(model) if evaluate is not None else float("nan")
        result.metrics.append(MetricsRow(state.step, epoch, loss, acc))
        if progress:
            progress(f"step {state.step} epoch {epoch} loss {loss:.4f} knn {acc:.4f}")

    try:
        first = epoch_order(n, 0, cfg.seed)[:batch]
        views, _ = make_views(samples, first, 0, sampler, jitter, cfg.seed, pool)
        # step-0 row: loss of the first batch before any update
        init_loss = nt_xent(encode_project(Tensor(views), model), cfg.temperature).item()
        record(0, init_loss)
        for epoch in range(cfg.epochs):
            order = epoch_order(n, epoch, cfg.seed)
            for b in range(per_epoch):
                idx = order[b * batch:(b + 1) * batch]
                views, _ = make_views(samples, idx, epoch, sampler, jitter, cfg.seed, pool)
                loss = train_step(state, views, cfg, [samples[i].image_id for i in idx])
                result.losses.append(loss)
                if state.step % cfg.eval_every == 0:
                    record(epoch, loss)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint is not None:
        T.save_checkpoint(checkpoint, model.named_arrays())
    return result
