"""Linear probes on pooled hidden states of the (frozen) toy model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kvroute.attention import HiddenStates


@dataclass(frozen=True)
class ProbeConfig:
    layers: tuple[int, ...] = (-1,)
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.3

    def __post_init__(self):
        if not self.layers:
            raise ValueError("probe needs at least one layer")
        if self.learning_rate <= 0 or self.epochs < 0 or self.l2 < 0:
            raise ValueError("learning_rate must be > 0, epochs and l2 >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class LinearProbe:
    weight: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)
    classes: tuple = ()
    losses: tuple[float, ...] = ()

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> list:
        idx = np.argmax(self.logits(features), axis=1)
        return [self.classes[i] for i in idx]


def pool_hidden(hidden: HiddenStates, layers: Sequence[int]) -> np.ndarray:
    """Mean of the final-token residual vectors over ``layers`` (indices into ``residual``)."""
    if len(layers) == 0:
        raise ValueError("no probed layers")
    n = hidden.residual.shape[0]
    for l in layers:
        if not -n <= l < n:
            raise IndexError(f"layer {l} outside residual stream of depth {n}")
    return np.mean([hidden.residual[l, -1] for l in layers], axis=0)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, covering train/val index arrays."""
    perm = np.random.default_rng([seed, 0x5350]).permutation(n)
    n_val = max(1, min(n - 1, int(round(n * val_fraction))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(weight: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray,
                  l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy plus ``l2/2 * ||W||^2``; ``y`` holds class indices."""
    n = x.shape[0]
    z = x @ weight.T + bias
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(weight * weight))
    g = np.exp(log_p)
    g[np.arange(n), y] -= 1.0
    g /= n
    return float(loss), g.T @ x + l2 * weight, g.sum(axis=0)


def train_probe(features: np.ndarray, labels: Sequence, cfg: ProbeConfig = ProbeConfig(),
                classes: Sequence | None = None) -> LinearProbe:
    """Full-batch gradient descent on softmax cross-entropy.

    The step is capped at the inverse smoothness bound of the loss so the
    objective never increases, whatever the feature scale.
    """
    x = np.asarray(features, dtype=np.float64)
    cls = tuple(sorted(set(labels))) if classes is None else tuple(classes)
    if len(set(labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    index = {c: i for i, c in enumerate(cls)}
    y = np.array([index[l] for l in labels])
    n, d = x.shape
    rng = np.random.default_rng([cfg.seed, 0x5052])
    weight = 0.01 * rng.standard_normal((len(cls), d))
    bias = np.zeros(len(cls))
    # softmax CE Hessian <= 0.5 * lambda_max(X~^T X~ / n) with X~ = [X, 1]
    x_aug = np.hstack([x, np.ones((n, 1))])
    smooth = 0.5 * float(np.linalg.eigvalsh(x_aug.T @ x_aug / n)[-1]) + cfg.l2
    step = min(cfg.learning_rate, 1.0 / smooth)
    losses = []
    for _ in range(cfg.epochs):
        loss, gw, gb = loss_and_grad(weight, bias, x, y, cfg.l2)
        losses.append(loss)
        weight = weight - step * gw
        bias = bias - step * gb
    losses.append(loss_and_grad(weight, bias, x, y, cfg.l2)[0])
    return LinearProbe(weight, bias, cls, tuple(losses))


def per_class_f1(predicted: Sequence, gold: Sequence) -> dict:
    """F1 for every class with gold support."""
    if len(gold) == 0:
        raise ValueError("empty evaluation set")
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold lengths differ")
    out = {}
    for c in sorted(set(gold), key=str):
        tp = sum(p == c and g == c for p, g in zip(predicted, gold))
        fp = sum(p == c and g != c for p, g in zip(predicted, gold))
        fn = sum(p != c and g == c for p, g in zip(predicted, gold))
        out[c] = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return out


def macro_f1(predicted: Sequence, gold: Sequence) -> float:
    scores = per_class_f1(predicted, gold)
    return sum(scores.values()) / len(scores)


def eval_macro_f1(probe: LinearProbe, features: np.ndarray, labels: Sequence) -> float:
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    unknown = set(labels) - set(probe.classes)
    if unknown:
        raise ValueError(f"labels outside the probe's classes: {sorted(unknown, key=str)}")
    return macro_f1(probe.predict(features), list(labels))
