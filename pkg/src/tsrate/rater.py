"""Trainable block scorer: frozen feature encoder + 3-layer MLP head.

The head maps a 24-entry feature vector through two hidden layers of width
256 (affine, layer norm, ReLU; the second hidden block carries a residual
skip from the first) to a scalar score.  Gradients for the pairwise
binary-cross-entropy loss are computed analytically in double precision;
there is no autodiff dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from tsrate.core import CriterionKind
from tsrate.features import ENCODER_VERSION, FEATURE_DIM
from tsrate.numutil import sigmoid, softplus

HIDDEN = 256
LN_EPS = 1e-5

DEFAULT_ARCH = {
    "input_dim": FEATURE_DIM,
    "hidden": HIDDEN,
    "layers": 3,
    "layer_norm": True,
    "residual": "hidden",
}

WEIGHTS_MAGIC = "tsrater-weights-v1"


def parameter_count(arch: dict = DEFAULT_ARCH) -> int:
    f, h = arch["input_dim"], arch["hidden"]
    return (f * h + 3 * h) + (h * h + 3 * h) + (h + 1)


@dataclass
class _Views:
    """Named views into one flat parameter (or gradient) vector."""

    w1: np.ndarray
    b1: np.ndarray
    g1: np.ndarray
    beta1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    g2: np.ndarray
    beta2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def _views(theta: np.ndarray, arch: dict) -> _Views:
    f, h = arch["input_dim"], arch["hidden"]
    sizes = [f * h, h, h, h, h * h, h, h, h, h, 1]
    if theta.size != sum(sizes):
        raise ValueError(
            f"parameter vector has {theta.size} entries, architecture needs {sum(sizes)}"
        )
    parts = []
    offset = 0
    for size in sizes:
        parts.append(theta[offset : offset + size])
        offset += size
    return _Views(
        w1=parts[0].reshape(f, h),
        b1=parts[1],
        g1=parts[2],
        beta1=parts[3],
        w2=parts[4].reshape(h, h),
        b2=parts[5],
        g2=parts[6],
        beta2=parts[7],
        w3=parts[8].reshape(h, 1),
        b3=parts[9],
    )


@dataclass
class RaterWeights:
    """Flat parameter vector plus the metadata needed to reuse it safely."""

    theta: np.ndarray
    criterion: CriterionKind | None = None
    encoder_version: str = ENCODER_VERSION
    seed: int | None = None
    arch: dict = field(default_factory=lambda: dict(DEFAULT_ARCH))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = parameter_count(self.arch)
        if self.theta.size != expected:
            raise ValueError(
                f"parameter count {self.theta.size} does not match architecture ({expected})"
            )
        if not np.isfinite(self.theta).all():
            raise ValueError("non-finite parameters")

    def copy(self) -> "RaterWeights":
        return RaterWeights(
            theta=self.theta.copy(),
            criterion=self.criterion,
            encoder_version=self.encoder_version,
            seed=self.seed,
            arch=dict(self.arch),
        )

    def save(self, path):
        header = {
            "magic": WEIGHTS_MAGIC,
            "arch": self.arch,
            "criterion": str(self.criterion) if self.criterion else None,
            "encoder_version": self.encoder_version,
            "seed": self.seed,
            "n_params": int(self.theta.size),
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "RaterWeights":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("magic") != WEIGHTS_MAGIC:
            raise ValueError(f"not a rater weights file: {path}")
        theta = np.frombuffer(payload, dtype="<f8")
        if theta.size != header["n_params"]:
            raise ValueError(
                f"weights payload has {theta.size} values, header says {header['n_params']}"
            )
        if header["encoder_version"] != ENCODER_VERSION:
            raise ValueError(
                f"weights were trained against encoder {header['encoder_version']!r}, "
                f"this build provides {ENCODER_VERSION!r}"
            )
        return cls(
            theta=theta.copy(),
            criterion=CriterionKind(header["criterion"]) if header["criterion"] else None,
            encoder_version=header["encoder_version"],
            seed=header["seed"],
            arch=header["arch"],
        )


def init_weights(
    seed: int, criterion: CriterionKind | None = None, arch: dict = DEFAULT_ARCH
) -> RaterWeights:
    """Seeded Glorot-uniform affine weights; layer-norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(parameter_count(arch))
    views = _views(theta, arch)
    for w in (views.w1, views.w2, views.w3):
        fan_in, fan_out = w.shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    views.g1[:] = 1.0
    views.g2[:] = 1.0
    return RaterWeights(theta=theta, criterion=criterion, seed=seed, arch=dict(arch))


def _layer_norm(z: np.ndarray):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    zhat = (z - mu) * inv
    return zhat, inv


def _forward_cached(theta: np.ndarray, x: np.ndarray, arch: dict):
    """Batched forward pass keeping every intermediate for backprop."""
    v = _views(theta, arch)
    z1 = x @ v.w1 + v.b1
    zhat1, inv1 = _layer_norm(z1)
    a1 = v.g1 * zhat1 + v.beta1
    h1 = np.maximum(a1, 0.0)

    z2 = h1 @ v.w2 + v.b2
    zhat2, inv2 = _layer_norm(z2)
    a2 = v.g2 * zhat2 + v.beta2
    r2 = np.maximum(a2, 0.0)
    h2 = r2 + h1

    scores = (h2 @ v.w3)[:, 0] + v.b3[0]
    cache = {
        "x": x,
        "zhat1": zhat1,
        "inv1": inv1,
        "a1": a1,
        "h1": h1,
        "zhat2": zhat2,
        "inv2": inv2,
        "a2": a2,
        "h2": h2,
    }
    return scores, cache


def _ln_backward(d_a: np.ndarray, zhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    """Backprop through y = gain * zhat + beta for one layer-norm block."""
    d_beta = d_a.sum(axis=0)
    d_gain = (d_a * zhat).sum(axis=0)
    d_zhat = d_a * gain
    mean_dz = d_zhat.mean(axis=1, keepdims=True)
    mean_dzz = (d_zhat * zhat).mean(axis=1, keepdims=True)
    d_z = inv * (d_zhat - mean_dz - zhat * mean_dzz)
    return d_z, d_gain, d_beta


def _backward(theta: np.ndarray, cache: dict, d_scores: np.ndarray, arch: dict) -> np.ndarray:
    """Gradient of sum(d_scores * scores) with respect to theta."""
    v = _views(theta, arch)
    grad = np.zeros_like(theta)
    g = _views(grad, arch)

    d_h2 = d_scores[:, None] * v.w3[:, 0][None, :]
    g.w3[:, 0] = cache["h2"].T @ d_scores
    g.b3[0] = d_scores.sum()

    d_a2 = d_h2 * (cache["a2"] > 0.0)
    d_z2, d_g2, d_beta2 = _ln_backward(d_a2, cache["zhat2"], cache["inv2"], v.g2)
    g.g2[:] = d_g2
    g.beta2[:] = d_beta2
    g.w2[:] = cache["h1"].T @ d_z2
    g.b2[:] = d_z2.sum(axis=0)

    d_h1 = d_h2 + d_z2 @ v.w2.T  # residual skip plus the layer-2 path
    d_a1 = d_h1 * (cache["a1"] > 0.0)
    d_z1, d_g1, d_beta1 = _ln_backward(d_a1, cache["zhat1"], cache["inv1"], v.g1)
    g.g1[:] = d_g1
    g.beta1[:] = d_beta1
    g.w1[:] = cache["x"].T @ d_z1
    g.b1[:] = d_z1.sum(axis=0)
    return grad


def forward(weights: RaterWeights, features) -> float:
    """Score one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1 or x.size != weights.arch["input_dim"]:
        raise ValueError(
            f"feature vector has shape {x.shape}, expected ({weights.arch['input_dim']},)"
        )
    scores, _ = _forward_cached(weights.theta, x[None, :], weights.arch)
    return float(scores[0])


def forward_many(weights: RaterWeights, features: np.ndarray) -> np.ndarray:
    """Score a stack of feature vectors, preserving input order."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weights.arch["input_dim"]:
        raise ValueError(f"feature matrix has shape {x.shape}")
    scores, _ = _forward_cached(weights.theta, x, weights.arch)
    return scores


@dataclass(frozen=True)
class PairBatch:
    """A batch of judged pairs ready for training: features and confidence."""

    features_i: np.ndarray
    features_j: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        fi = np.asarray(self.features_i, dtype=np.float64)
        fj = np.asarray(self.features_j, dtype=np.float64)
        pp = np.asarray(self.p, dtype=np.float64)
        if fi.ndim != 2 or fj.shape != fi.shape or pp.shape != (fi.shape[0],):
            raise ValueError("inconsistent batch shapes")
        if fi.shape[0] < 1:
            raise ValueError("batch must contain at least one pair")
        if not (np.isfinite(fi).all() and np.isfinite(fj).all() and np.isfinite(pp).all()):
            raise ValueError("non-finite batch inputs")
        if ((pp < 0) | (pp > 1)).any():
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "features_i", fi)
        object.__setattr__(self, "features_j", fj)
        object.__setattr__(self, "p", pp)

    def __len__(self) -> int:
        return int(self.p.shape[0])

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.features_i[idx], self.features_j[idx], self.p[idx])

    @classmethod
    def concat(cls, batches) -> "PairBatch":
        return cls(
            np.concatenate([b.features_i for b in batches]),
            np.concatenate([b.features_j for b in batches]),
            np.concatenate([b.p for b in batches]),
        )


def pairs_from_judgments(records, features_by_block: dict[str, np.ndarray]) -> PairBatch:
    """Assemble a PairBatch from judgment records and encoded features."""
    fi, fj, ps = [], [], []
    for r in records:
        fi.append(features_by_block[r.block_i])
        fj.append(features_by_block[r.block_j])
        ps.append(r.confidence_p)
    if not fi:
        raise ValueError("no judgments with available features")
    return PairBatch(np.stack(fi), np.stack(fj), np.array(ps))


def pairwise_loss_and_grad(weights: RaterWeights, batch: PairBatch):
    """Mean pairwise BCE loss and its exact gradient.

    loss = mean_k [ p_k * softplus(-delta_k) + (1 - p_k) * softplus(delta_k) ]
    with delta_k = s(B_i) - s(B_j); both forward passes share the weights and
    the two backward passes are accumulated i-side first for determinism.
    """
    s_i, cache_i = _forward_cached(weights.theta, batch.features_i, weights.arch)
    s_j, cache_j = _forward_cached(weights.theta, batch.features_j, weights.arch)
    delta = s_i - s_j
    losses = batch.p * softplus(-delta) + (1.0 - batch.p) * softplus(delta)
    loss = float(losses.mean())
    d_delta = (sigmoid(delta) - batch.p) / len(batch)
    grad = _backward(weights.theta, cache_i, d_delta, weights.arch)
    grad += _backward(weights.theta, cache_j, -d_delta, weights.arch)
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise ArithmeticError("non-finite loss or gradient")
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")


def train_single(
    batch: PairBatch,
    config: TrainConfig,
    criterion: CriterionKind | None = None,
    init: RaterWeights | None = None,
):
    """Plain minibatch gradient descent on the pairwise loss.

    Returns (weights, per-epoch mean loss trace).  The pair order is
    reshuffled each epoch from a seeded stream, so identical configs give
    bitwise-identical weights.
    """
    if len(batch) < 1:
        raise ValueError("no training pairs")
    weights = init.copy() if init is not None else init_weights(config.seed, criterion)
    rng = np.random.default_rng(config.seed)
    trace = []
    n = len(batch)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            mini = batch.take(order[start : start + config.batch_size])
            loss, grad = pairwise_loss_and_grad(weights, mini)
            weights.theta -= config.learning_rate * grad
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return weights, trace


def pairwise_accuracy(weights: RaterWeights, batch: PairBatch) -> float:
    """Fraction of decisive pairs ranked the same way the judge ranked them.

    Pairs with p = 0.5 leave the denominator; a zero score difference counts
    as incorrect.
    """
    decisive = batch.p != 0.5
    if not decisive.any():
        raise ValueError("no non-tie pairs to evaluate")
    sub = batch.take(np.flatnonzero(decisive))
    delta = forward_many(weights, sub.features_i) - forward_many(weights, sub.features_j)
    want_positive = sub.p > 0.5
    correct = np.where(want_positive, delta > 0.0, delta < 0.0)
    return float(correct.mean())
