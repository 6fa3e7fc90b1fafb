"""Training loop (adaptive-moment gradient descent over trainable
parameters only) and the deterministic evaluation pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import batch_arrays, get_corpora
from .errors import TrainingError
from .losses import cls_probs, image_score, model_loss
from .metrics import MetricsReport, auroc, average_precision, gate_entropy
from .model import build_model
from .tensor import grad, no_grad

EVAL_BATCH = 16


class Adam:
    """Standard bias-corrected Adam; parameters stepped in sorted-name order."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.names = sorted(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}

    def step(self, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in self.names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params[name].data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _batch_indices(n, batch_size, rng):
    """Endless epoch-shuffled index batches (ragged tail dropped)."""
    if n <= batch_size:
        while True:
            yield rng.permutation(n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)  # (step, total, seg, cls)
    train_samples: list = field(default_factory=list)
    test_samples: list = field(default_factory=list)


def train(config: RunConfig, corpora=None) -> TrainResult:
    """Deterministic training run; aborts with the trace on divergence."""
    config.validate()
    model = build_model(config)
    train_samples, test_samples = corpora if corpora is not None else get_corpora(config)
    lc = config.loss_config()
    opt = Adam(model.trainable_params(), config.lr)
    batches = _batch_indices(len(train_samples), config.batch_size,
                             np.random.default_rng(config.data_seed + 10_000))
    trace = []
    for step in range(config.steps):
        idx = next(batches)
        images, masks, labels = batch_arrays([train_samples[i] for i in idx])
        try:
            total, seg, cls, _ = model_loss(model, images, masks, labels, lc)
            grads = grad(total, model.trainable_params())
        except TrainingError as exc:
            exc.trace = trace
            raise
        opt.step(grads)
        trace.append((step, float(total.data), float(seg.data), float(cls.data)))
    return TrainResult(model=model, trace=trace,
                       train_samples=train_samples, test_samples=test_samples)


def evaluate(model, samples, batch_size=EVAL_BATCH) -> MetricsReport:
    """Pixel metrics pool every test pixel; image metrics use image_score."""
    pixel_scores, pixel_labels = [], []
    image_scores, image_labels = [], []
    weight_rows = {}
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, masks, labels = batch_arrays(chunk)
            out = model.forward(images)
            up = out.amap.upsampled.data
            p_abn = cls_probs(out.v_cls, out.anchor, model.config.temperature).data[:, 1]
            image_scores.append(image_score(p_abn, up))
            image_labels.append(labels)
            pixel_scores.append(up.reshape(-1))
            pixel_labels.append(masks.reshape(-1).astype(np.int64))
            for key, rows in out.amap.fusion_weights.items():
                weight_rows.setdefault(key, []).append(rows)
    pixel_scores = np.concatenate(pixel_scores)
    pixel_labels = np.concatenate(pixel_labels)
    image_scores = np.concatenate(image_scores)
    image_labels = np.concatenate(image_labels)
    from .gateway import STATES
    entropy = {(i, STATES[s]): gate_entropy(np.concatenate(rows))
               for (i, s), rows in weight_rows.items()}
    return MetricsReport(
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        pixel_ap=average_precision(pixel_scores, pixel_labels),
        image_auroc=auroc(image_scores, image_labels),
        image_ap=average_precision(image_scores, image_labels),
        n_images=len(samples),
        n_pixels=int(pixel_labels.size),
        n_anomalous_images=int(image_labels.sum()),
        n_anomalous_pixels=int(pixel_labels.sum()),
        config_echo=model.config.echo_lines(),
        level_entropy=entropy,
    )
