"""Federated simulation: non-IID partitioning, local training, weighted
aggregation, and the per-round accuracy-gain decomposition.

Accuracies inside the decomposition are exact rationals (correct/total),
so the telescoping identity A_prev + delta_L + delta_G = A_new holds with
no floating-point slack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .nn import (ModelSpec, ModelWeights, NonFiniteError, SgdState,
                 StepSchedule, backward, cross_entropy, forward, sgd_step)
from .seeding import make_rng, mix64

PARTICIPANT_TAG = 0xA77E
LOCAL_TAG = 0x10CA


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    class_counts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


def apportion(q: np.ndarray, n: int) -> np.ndarray:
    """Split n items proportionally to q with largest-remainder rounding."""
    q = np.asarray(q, dtype=np.float64)
    target = q / q.sum() * n
    counts = np.floor(target).astype(int)
    remainder = target - counts
    short = n - counts.sum()
    # ties broken toward lower index for determinism
    order = np.lexsort((np.arange(len(q)), -remainder))
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: np.ndarray, n_clients: int, alpha: float,
                        rng: np.random.Generator,
                        proportions: np.ndarray | None = None) -> list[ClientShard]:
    """Partition by drawing per-class client proportions from Dirichlet(alpha).

    ``proportions`` (shape (n_classes, n_clients)) overrides the Dirichlet
    draws, used to pin the apportionment down in tests. Shards may come out
    empty under small alpha; callers decide how to handle them.
    """
    if n_clients < 1 or alpha <= 0:
        raise ValueError("need n_clients >= 1 and alpha > 0")
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    counts = np.zeros((n_clients, n_classes), dtype=int)
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        if proportions is not None:
            q = np.asarray(proportions[c], dtype=np.float64)
        else:
            q = rng.dirichlet(np.full(n_clients, alpha))
        split = apportion(q, len(idx))
        off = 0
        for m in range(n_clients):
            per_client[m].append(idx[off:off + split[m]])
            counts[m, c] = split[m]
            off += split[m]
    return [ClientShard(client_id=m,
                        indices=np.sort(np.concatenate(per_client[m]))
                        if per_client[m] else np.zeros(0, dtype=int),
                        class_counts=counts[m])
            for m in range(n_clients)]


@dataclass
class FederationConfig:
    n_clients: int = 10
    alpha: float = 0.3
    participation: float = 1.0
    rounds: int = 100
    local_epochs: int = 5
    algorithm: str = "fedavg"   # "fedavg" | "fedprox"
    mu: float = 0.0             # proximal strength, fedprox only
    batch_size: int = 32
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_factor: float = 0.1
    lr_period: int = 30
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.participation <= 1):
            raise ValueError("participation must be in (0, 1]")
        if self.mu < 0 or self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("mu, rounds, local_epochs must be nonnegative")

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.base_lr, self.lr_factor, self.lr_period)


def local_train(images: np.ndarray, labels: np.ndarray, init: ModelWeights,
                spec: ModelSpec, config: FederationConfig, lr: float,
                seed: int, anchor: ModelWeights | None = None) -> ModelWeights:
    """E epochs of momentum SGD from ``init``; velocity starts at zero.

    With algorithm "fedprox", adds the proximal pull mu*(w - anchor) to
    every gradient, where ``anchor`` is the round's global model.
    """
    n = len(labels)
    if n == 0 or config.local_epochs == 0:
        return init.copy()
    prox = config.algorithm == "fedprox" and config.mu > 0
    if prox and anchor is None:
        raise ValueError("fedprox local training needs the global anchor")
    w = init
    state = SgdState(lr=lr, momentum=config.momentum,
                     weight_decay=config.weight_decay)
    for epoch in range(config.local_epochs):
        order = make_rng(seed, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, cache = forward(spec, w, images[idx])
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite local loss (seed {seed})")
            grads = backward(cache, dlogits)
            if prox:
                grads = grads + (w - anchor).scale(config.mu)
            w = sgd_step(w, grads, state)
    return w


def fedavg_aggregate(models: list[tuple[ModelWeights, int]]) -> ModelWeights:
    """Element-wise average weighted by data sizes (sizes must be > 0)."""
    if not models:
        raise ValueError("nothing to aggregate")
    if any(size <= 0 for _, size in models):
        raise ValueError("sizes must be positive; drop empty clients upstream")
    total = sum(size for _, size in models)
    acc = models[0][0].scale(models[0][1] / total)
    for w, size in models[1:]:
        acc = acc + w.scale(size / total)
    return acc


def evaluate(spec: ModelSpec, w: ModelWeights, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 256):
    """Returns (n_correct, total, mean loss)."""
    n = len(labels)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits, _ = forward(spec, w, x)
        loss, _ = cross_entropy(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct, n, loss_sum / n


@dataclass
class RoundMetrics:
    round: int
    lr: float
    n_participants: int
    acc_global_prev: Fraction
    acc_local_mean: Fraction
    delta_local: Fraction
    delta_global: Fraction
    acc_global: Fraction
    loss_global: float
    client_accuracies: list[Fraction] = field(default_factory=list)
    client_sizes: list[int] = field(default_factory=list)

    def identity_holds(self) -> bool:
        return (self.acc_global_prev + self.delta_local + self.delta_global
                == self.acc_global)


CSV_HEADERS = ["round", "lr", "n_participants", "acc_global_prev",
               "acc_local_mean", "delta_L", "delta_G", "acc_global",
               "loss_global"]


def metrics_to_csv(metrics: list[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADERS)
        for m in metrics:
            writer.writerow([m.round, repr(m.lr), m.n_participants,
                             repr(float(m.acc_global_prev)),
                             repr(float(m.acc_local_mean)),
                             repr(float(m.delta_local)),
                             repr(float(m.delta_global)),
                             repr(float(m.acc_global)),
                             repr(m.loss_global)])


@dataclass
class FederationState:
    weights: ModelWeights
    shards: list[ClientShard]


def sample_participants(config: FederationConfig, t: int) -> np.ndarray:
    """Round t's participant ids: uniform without replacement, sorted."""
    k = int(np.ceil(config.participation * config.n_clients))
    rng = make_rng(config.seed, PARTICIPANT_TAG, t)
    return np.sort(rng.choice(config.n_clients, size=k, replace=False))


def run_round(state: FederationState, spec: ModelSpec, config: FederationConfig,
              t: int, train_images, train_labels, test_images, test_labels):
    """One FedAvg round plus the local/global gain decomposition."""
    lr = config.schedule().lr(t)
    participants = [state.shards[int(m)] for m in sample_participants(config, t)]
    active = [s for s in participants if s.size > 0]
    if not active:
        raise RuntimeError(f"round {t}: every sampled client is empty")

    prev_correct, n_test, _ = evaluate(spec, state.weights, test_images, test_labels)
    acc_prev = Fraction(prev_correct, n_test)

    trained: list[tuple[ModelWeights, int]] = []
    client_accs: list[Fraction] = []
    for shard in active:  # ascending client id: deterministic fp summation
        w_m = local_train(train_images[shard.indices], train_labels[shard.indices],
                          state.weights, spec, config, lr,
                          seed=mix64(config.seed, LOCAL_TAG, t, shard.client_id),
                          anchor=state.weights)
        trained.append((w_m, shard.size))
        c_m, _, _ = evaluate(spec, w_m, test_images, test_labels)
        client_accs.append(Fraction(c_m, n_test))

    new_global = fedavg_aggregate(trained)
    new_correct, _, new_loss = evaluate(spec, new_global, test_images, test_labels)
    acc_new = Fraction(new_correct, n_test)

    total = sum(size for _, size in trained)
    local_mean = sum((Fraction(size, total) * a
                      for (_, size), a in zip(trained, client_accs)),
                     Fraction(0))
    metrics = RoundMetrics(
        round=t, lr=lr, n_participants=len(active),
        acc_global_prev=acc_prev, acc_local_mean=local_mean,
        delta_local=local_mean - acc_prev,
        delta_global=acc_new - local_mean,
        acc_global=acc_new, loss_global=new_loss,
        client_accuracies=client_accs,
        client_sizes=[size for _, size in trained])
    state.weights = new_global
    return state, metrics


def run_federation(config: FederationConfig, spec: ModelSpec,
                   init: ModelWeights, train_images, train_labels,
                   test_images, test_labels,
                   shards: list[ClientShard] | None = None):
    """Full protocol: partition, T rounds, metrics row per round."""
    if shards is None:
        shards = dirichlet_partition(train_labels, config.n_clients,
                                     config.alpha, make_rng(config.seed, 0xD1B1))
    state = FederationState(weights=init.copy(), shards=shards)
    metrics: list[RoundMetrics] = []
    for t in range(config.rounds):
        try:
            state, m = run_round(state, spec, config, t, train_images,
                                 train_labels, test_images, test_labels)
        except Exception as exc:
            raise RuntimeError(f"federation failed at round {t}") from exc
        metrics.append(m)
    return state.weights, metrics


def centralized_train(config: FederationConfig, spec: ModelSpec,
                      init: ModelWeights, train_images, train_labels):
    """Round-structured centralized SGD; the M=1 degenerate protocol."""
    w = init.copy()
    for t in range(config.rounds):
        w = local_train(train_images, train_labels, w, spec, config,
                        config.schedule().lr(t),
                        seed=mix64(config.seed, LOCAL_TAG, t, 0), anchor=w)
    return w
