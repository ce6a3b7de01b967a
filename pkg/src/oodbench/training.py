"""Losses, pairing, Adam, and the training loop.

Three out-of-distribution approaches are expressible through TrainConfig:
a longer epoch budget (late stopping), a tuned BatchNorm momentum, and an
invariance penalty on probe activations of same-category pairs, refreshed
every ``pair_refresh_interval`` epochs. Training restarts from scratch with
a 10x smaller learning rate when validation accuracy is stuck at chance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .errors import (
    InvalidArgumentError,
    NumericError,
    ShapeError,
    TrainingFailure,
)
from .neuralcore import (
    NetworkSpec,
    ParamStore,
    backward,
    forward,
    init_params,
    is_trainable,
    set_bn_momentum,
    update_running_stats,
)
from .seeding import hash_seed
from .splits import SplitBundle

APPROACH_FLAGS = frozenset({"late_stopping", "tuned_bn", "invariance_loss"})

CSV_HEADER = "epoch,ind_val_acc,ood_acc,ce_loss,inv_loss,restarted"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int | None = None  # None resolves from approach_flags
    batch_size: int = 256
    bn_momentum: float = 0.99
    invariance_weight: float = 0.0
    pair_refresh_interval: int = 100
    seed: int = 0
    approach_flags: frozenset = frozenset()
    restart_rule_enabled: bool = True
    max_restarts: int = 3
    eval_batch_size: int = 256

    def validate(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs is not None and self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidArgumentError(
                f"batch_size must be >= 2 for train-mode BN, got {self.batch_size}"
            )
        if not (0.0 <= self.bn_momentum <= 1.0):
            raise InvalidArgumentError(f"bn_momentum must lie in [0, 1], got {self.bn_momentum}")
        if self.invariance_weight < 0:
            raise InvalidArgumentError(
                f"invariance_weight must be >= 0, got {self.invariance_weight}"
            )
        if self.invariance_weight > 0 and self.pair_refresh_interval < 1:
            raise InvalidArgumentError(
                "invariance_weight > 0 requires pair_refresh_interval >= 1"
            )
        unknown = set(self.approach_flags) - APPROACH_FLAGS
        if unknown:
            raise InvalidArgumentError(f"unknown approach flags {sorted(unknown)}")
        if self.max_restarts < 0:
            raise InvalidArgumentError("max_restarts must be >= 0")

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1000 if "late_stopping" in self.approach_flags else 100


@dataclass
class PairIndex:
    partner: np.ndarray  # partner[i] = index of the same-category pair of item i
    categories: np.ndarray
    refresh_count: int

    def validate(self):
        if self.partner.shape != self.categories.shape:
            raise ShapeError("partner and categories must be index-parallel")
        if not np.array_equal(self.categories[self.partner], self.categories):
            raise InvalidArgumentError("pair partners must share their item's category")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamStore) -> "AdamState":
        m = {n: np.zeros_like(a) for n, a in params.tensors.items() if is_trainable(n)}
        v = {n: np.zeros_like(a) for n, a in params.tensors.items() if is_trainable(n)}
        return cls(m=m, v=v)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    ind_val_accuracy: float
    ood_accuracy: float
    train_ce_loss: float
    train_inv_loss: float
    restarted: bool

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.ind_val_accuracy:.10g},{self.ood_accuracy:.10g},"
            f"{self.train_ce_loss:.10g},{self.train_inv_loss:.10g},{int(self.restarted)}"
        )


def cross_entropy(logits, labels):
    """Mean batch cross-entropy and its logit gradient (softmax - onehot)/B.

    Per row the loss is computed as log1p(sum of exp(z_j - z_y) over j != y)
    when the true logit is near the max, which keeps huge-margin losses exact
    instead of rounding them through exp/log cancellation.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"logits must be batch x classes, got shape {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise InvalidArgumentError("label out of range")
    b = z.shape[0]
    rows = np.arange(b)
    z_true = z[rows, labels]
    m = z.max(axis=1)
    # Row loss = log(sum_j exp(z_j - z_true)).
    shifted = z - z_true[:, None]
    near_max = (m - z_true) < 30.0
    losses = np.empty(b)
    if np.any(near_max):
        expd = np.exp(shifted[near_max])
        expd[np.arange(expd.shape[0]), labels[near_max]] = 0.0  # drop the j = y term
        losses[near_max] = np.log1p(expd.sum(axis=1))
    if np.any(~near_max):
        shifted_m = z[~near_max] - m[~near_max, None]
        lse = m[~near_max] + np.log(np.exp(shifted_m).sum(axis=1))
        losses[~near_max] = lse - z_true[~near_max]
    loss = float(losses.mean())
    # Gradient via shifted softmax; stable for both branches.
    p = np.exp(z - m[:, None])
    p /= p.sum(axis=1, keepdims=True)
    grad = p
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def invariance_loss(probe_acts, pair_probe_acts):
    """Mean Euclidean distance between pair activations, with gradients.

    Returns (loss, grad_a, grad_b); the gradient at an exactly-zero distance
    is the zero subgradient.
    """
    a = np.asarray(probe_acts, dtype=np.float64)
    b = np.asarray(pair_probe_acts, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"pair activation shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    dist = np.sqrt((diff * diff).sum(axis=1))
    loss = float(dist.mean())
    n = a.shape[0]
    safe = np.where(dist > 0, dist, 1.0)
    grad_a = diff / (safe[:, None] * n)
    grad_a[dist == 0] = 0.0
    return loss, grad_a, -grad_a


def total_loss(ce: float, inv: float, weight: float) -> float:
    if weight < 0:
        raise InvalidArgumentError(f"invariance weight must be >= 0, got {weight}")
    return ce + weight * inv


def make_pairs(train_labels, seed: int, refresh_count: int = 0) -> PairIndex:
    """Uniform same-category partner per item; self only in singleton classes."""
    labels = np.asarray(train_labels)
    n = labels.shape[0]
    partner = np.empty(n, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x70]))
    for cat in np.unique(labels):
        members = np.flatnonzero(labels == cat)
        if members.size == 1:
            partner[members[0]] = members[0]
            continue
        # Draw an offset in [1, size) per member: uniform over the others.
        offsets = rng.integers(1, members.size, size=members.size)
        positions = (np.arange(members.size) + offsets) % members.size
        partner[members] = members[positions]
    index = PairIndex(partner=partner, categories=labels.copy(), refresh_count=refresh_count)
    index.validate()
    return index


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the trainable tensors."""
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if not is_trainable(name):
            continue
        g = g.astype(params.tensors[name].dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        params.tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def _batch_slices(order: np.ndarray, batch_size: int):
    """Consecutive chunks; a trailing chunk of one merges into its predecessor."""
    n = order.shape[0]
    starts = list(range(0, n, batch_size))
    chunks = [order[s : s + batch_size] for s in starts]
    if len(chunks) > 1 and chunks[-1].shape[0] < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _accuracy(params: ParamStore, spec: NetworkSpec, x: np.ndarray, y: np.ndarray,
              batch_size: int) -> float:
    hits = 0
    for s in range(0, x.shape[0], batch_size):
        trace = forward(spec, params, x[s : s + batch_size], mode="eval")
        hits += int((np.argmax(trace.logits, axis=1) == y[s : s + batch_size]).sum())
    return hits / x.shape[0]


def evaluate(params: ParamStore, spec: NetworkSpec, dataset: Dataset,
             batch_size: int = 256) -> float:
    """Fraction of items whose argmax logit (eval-mode forward) is the label."""
    if not dataset.items:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    x = dataset.stacked_pixels()
    y = np.array([item.category for item in dataset.items], dtype=np.int64)
    return _accuracy(params, spec, x, y, batch_size)


def train(
    config: TrainConfig,
    split: SplitBundle,
    spec: NetworkSpec,
    csv_path=None,
) -> tuple[ParamStore, list]:
    """Run the full loop; returns final parameters and per-epoch records.

    Deterministic per config.seed. When the restart rule fires with the
    restart budget exhausted, raises TrainingFailure carrying the records.
    """
    config.validate()
    split.validate()
    net = set_bn_momentum(spec, config.bn_momentum)
    num_classes = split.train.num_categories
    if net.num_classes != num_classes:
        raise ShapeError(
            f"network has {net.num_classes} classes but split has {num_classes}"
        )
    x_train = split.train.stacked_pixels()
    y_train = np.array([it.category for it in split.train.items], dtype=np.int64)
    x_val = split.val.stacked_pixels()
    y_val = np.array([it.category for it in split.val.items], dtype=np.int64)
    x_ood = split.ood.stacked_pixels()
    y_ood = np.array([it.category for it in split.ood.items], dtype=np.int64)
    if x_train.shape[0] < 2:
        raise InvalidArgumentError("training set must hold at least 2 items")

    epochs = config.resolved_epochs()
    chance_bar = 1.1 / num_classes
    # Eval-mode accuracy sits at chance while BN running stats catch up to a
    # net that already fits the batch stats; that transient clears well before
    # half the budget, so only the second half counts as stuck.
    restart_grace = max(10, epochs // 2)
    weight = config.invariance_weight
    refresh_t = config.pair_refresh_interval
    records: list = []

    writer = None
    if csv_path is not None:
        writer = open(csv_path, "w", newline="")
        writer.write(CSV_HEADER + "\n")
        writer.flush()
    try:
        attempt = 0
        lr = config.learning_rate
        while True:
            params = init_params(net, hash_seed(config.seed, "init", attempt))
            adam = AdamState.fresh(params)
            pairs = None
            refresh_count = 0
            failed = False
            for epoch in range(epochs):
                if weight > 0 and epoch % refresh_t == 0:
                    refresh_count = epoch // refresh_t
                    pairs = make_pairs(
                        y_train,
                        hash_seed(config.seed, "pairs", attempt, refresh_count),
                        refresh_count=refresh_count,
                    )
                shuffle = np.random.default_rng(
                    hash_seed(config.seed, "shuffle", attempt, epoch)
                )
                order = shuffle.permutation(x_train.shape[0])
                ce_sum = 0.0
                inv_sum = 0.0
                item_count = 0
                for batch_idx in _batch_slices(order, config.batch_size):
                    xb = x_train[batch_idx]
                    yb = y_train[batch_idx]
                    b = xb.shape[0]
                    if weight > 0:
                        xp = x_train[pairs.partner[batch_idx]]
                        stacked = np.concatenate([xb, xp], axis=0)
                        trace = forward(net, params, stacked, mode="train")
                        ce, ce_grad_half = cross_entropy(trace.logits[:b], yb)
                        logit_grad = np.zeros_like(trace.logits)
                        logit_grad[:b] = ce_grad_half
                        inv, ga, gb = invariance_loss(trace.probe[:b], trace.probe[b:])
                        probe_grad = weight * np.concatenate([ga, gb], axis=0)
                        grads = backward(net, params, trace, logit_grad, probe_grad)
                        inv_sum += inv * b
                    else:
                        trace = forward(net, params, xb, mode="train")
                        ce, ce_grad = cross_entropy(trace.logits, yb)
                        grads = backward(net, params, trace, ce_grad)
                    ce_sum += ce * b
                    item_count += b
                    adam_step(params, grads, adam, lr)
                    update_running_stats(net, params, trace)
                val_acc = _accuracy(params, net, x_val, y_val, config.eval_batch_size)
                ood_acc = _accuracy(params, net, x_ood, y_ood, config.eval_batch_size)
                record = EpochRecord(
                    epoch=epoch,
                    ind_val_accuracy=val_acc,
                    ood_accuracy=ood_acc,
                    train_ce_loss=ce_sum / item_count,
                    train_inv_loss=inv_sum / item_count if weight > 0 else 0.0,
                    restarted=(attempt > 0 and epoch == 0),
                )
                records.append(record)
                if writer is not None:
                    writer.write(record.csv_row() + "\n")
                    writer.flush()
                if (
                    config.restart_rule_enabled
                    and epoch >= restart_grace
                    and val_acc <= chance_bar
                ):
                    if attempt >= config.max_restarts:
                        raise TrainingFailure(
                            f"validation accuracy stuck at chance after "
                            f"{config.max_restarts} restarts",
                            records=records,
                        )
                    failed = True
                    break
            if not failed:
                break
            attempt += 1
            lr *= 0.1
    finally:
        if writer is not None:
            writer.close()
    return params, records


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for record in records:
            fh.write(record.csv_row() + "\n")


def read_records_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                EpochRecord(
                    epoch=int(row["epoch"]),
                    ind_val_accuracy=float(row["ind_val_acc"]),
                    ood_accuracy=float(row["ood_acc"]),
                    train_ce_loss=float(row["ce_loss"]),
                    train_inv_loss=float(row["inv_loss"]),
                    restarted=bool(int(row["restarted"])),
                )
            )
    return out
