"""Aggregation analysis: optimal convex combination of local models,
random sampling of the combination simplex, and loss probes along model
interpolations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .fedsim import evaluate
from .nn import ModelSpec, ModelWeights, backward, cross_entropy, forward
from .seeding import make_rng

SIMPLEX_TOL = 1e-12


def check_simplex(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if (lam < 0).any() or abs(lam.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"not a simplex point: {lam}")
    return lam


def combine(weight_sets: list[ModelWeights], lam: np.ndarray) -> ModelWeights:
    """Element-wise convex combination of aligned weight containers."""
    lam = check_simplex(lam)
    if len(lam) != len(weight_sets):
        raise ValueError("one coefficient per model required")
    acc = weight_sets[0].scale(lam[0])
    for w, c in zip(weight_sets[1:], lam[1:]):
        acc = acc + w.scale(c)
    return acc


def softmax(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max())
    return e / e.sum()


@dataclass
class ConvexAggConfig:
    lr: float = 1e-5        # descent on the eval-set cross-entropy
    epochs: int = 20
    batch_size: int = 32
    n_random_inits: int = 3
    seed: int = 0


@dataclass
class Candidate:
    label: str
    lam: np.ndarray
    accuracy: float
    loss: float


@dataclass
class ConvexAggReport:
    candidates: list[Candidate]
    chosen: Candidate
    note: str = ("coefficients were tuned on the evaluation set itself; "
                 "this is an analysis oracle, not a deployable aggregator")


def _lambda_descent(flat_models: np.ndarray, template: ModelWeights,
                    spec: ModelSpec, images, labels, u0: np.ndarray,
                    config: ConvexAggConfig) -> np.ndarray:
    """Minimize eval cross-entropy over lambda = softmax(u) by SGD."""
    u = u0.copy()
    n = len(labels)
    for epoch in range(config.epochs):
        order = make_rng(config.seed, 0x1A3B, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lam = softmax(u)
            w = template.unflatten_like(lam @ flat_models)
            logits, cache = forward(spec, w, images[idx])
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                return None
            g_flat = backward(cache, dlogits).flatten()
            dlam = flat_models @ g_flat
            du = lam * (dlam - float(lam @ dlam))
            u = u - config.lr * du
    return softmax(u)


def optimal_convex_aggregation(weight_sets: list[ModelWeights],
                               sizes: list[int], spec: ModelSpec,
                               eval_images, eval_labels,
                               config: ConvexAggConfig | None = None):
    """Search the simplex for the best-accuracy combination.

    Multiple restarts (uniform, data-size coefficients, random draws); every
    starting point is itself kept as a candidate, so the reported accuracy
    can never fall below the data-size-coefficient aggregate.
    Returns (lambda_star, combined weights, report).
    """
    if len(weight_sets) < 2:
        raise ValueError("need at least two models")
    if len(eval_labels) == 0:
        raise ValueError("evaluation set is empty")
    config = config or ConvexAggConfig()
    m = len(weight_sets)
    flat_models = np.stack([w.flatten() for w in weight_sets])
    template = weight_sets[0]

    sizes = np.asarray(sizes, dtype=np.float64)
    inits = [("uniform", np.full(m, 1.0 / m)),
             ("data-size", sizes / sizes.sum())]
    rng = make_rng(config.seed, 0x1A3A)
    for i in range(config.n_random_inits):
        inits.append((f"random-{i}", softmax(rng.normal(size=m))))

    def score(label, lam) -> Candidate:
        w = combine(weight_sets, lam)
        correct, total, loss = evaluate(spec, w, eval_images, eval_labels)
        return Candidate(label=label, lam=lam, accuracy=correct / total,
                         loss=loss)

    candidates = []
    for label, lam0 in inits:
        candidates.append(score(label, lam0))
        # log-space start so softmax(u0) reproduces lam0
        u0 = np.log(np.maximum(lam0, 1e-12))
        lam = _lambda_descent(flat_models, template, spec, eval_images,
                              eval_labels, u0, config)
        if lam is not None:
            candidates.append(score(label + "+descent", lam))
    best = max(candidates, key=lambda c: c.accuracy)
    return best.lam, combine(weight_sets, best.lam), ConvexAggReport(
        candidates=candidates, chosen=best)


@dataclass
class SurfaceSample:
    lam: np.ndarray
    loss: float
    accuracy: float


def sample_simplex(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the (m-1)-simplex via exponential normalization."""
    e = rng.exponential(size=m)
    return e / e.sum()


def sample_surface(weight_sets: list[ModelWeights], spec: ModelSpec,
                   eval_images, eval_labels, n: int = 300,
                   rng: np.random.Generator | None = None):
    """Loss/accuracy at n random simplex points, with a 95% loss CI.

    Returns (samples, mean loss, (2.5th, 97.5th) empirical percentiles).
    """
    if len(weight_sets) < 2:
        raise ValueError("need at least two models")
    rng = rng if rng is not None else make_rng(0)
    samples = []
    for _ in range(n):
        lam = sample_simplex(len(weight_sets), rng)
        w = combine(weight_sets, lam)
        correct, total, loss = evaluate(spec, w, eval_images, eval_labels)
        samples.append(SurfaceSample(lam=lam, loss=loss,
                                     accuracy=correct / total))
    losses = np.array([s.loss for s in samples])
    ci = (float(np.percentile(losses, 2.5)), float(np.percentile(losses, 97.5)))
    return samples, float(losses.mean()), ci


def surface_to_csv(samples: list[SurfaceSample], path) -> None:
    m = len(samples[0].lam) if samples else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"lambda_{i + 1}" for i in range(m)] + ["loss", "acc"])
        for s in samples:
            writer.writerow([repr(v) for v in s.lam]
                            + [repr(s.loss), repr(s.accuracy)])


def segment_loss(w_a: ModelWeights, w_b: ModelWeights, steps: int,
                 spec: ModelSpec, eval_images, eval_labels) -> np.ndarray:
    """Eval losses along the straight segment from w_a to w_b."""
    if steps < 2:
        raise ValueError("need at least the two endpoints")
    losses = []
    for t in np.linspace(0.0, 1.0, steps):
        w = w_a.scale(1.0 - t) + w_b.scale(t)
        _, _, loss = evaluate(spec, w, eval_images, eval_labels)
        losses.append(loss)
    return np.array(losses)
