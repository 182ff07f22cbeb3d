"""Matrix-factorization recommender trained with pairwise ranking loss.

The same model serves as teacher (large dim) and student (small dim).
Per batch, the loss is

    L = -(1/B) sum ln sigmoid(x_ui - x_uj) + l2_reg * sum ||touched rows||^2

where x_ui is the user-item inner product and the regularizer runs over
the distinct embedding rows referenced by the batch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, SplitDataset, sample_batches
from .util import rng_for

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

INIT_STD = 0.01


@dataclass
class EmbeddingModel:
    user_table: np.ndarray
    item_table: np.ndarray

    @property
    def dim(self) -> int:
        return self.user_table.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    @classmethod
    def init(
        cls, num_users: int, num_items: int, dim: int, rng: np.random.Generator
    ) -> "EmbeddingModel":
        if dim < 1:
            raise ValueError("dim must be >= 1")
        return cls(
            user_table=rng.normal(0.0, INIT_STD, size=(num_users, dim)),
            item_table=rng.normal(0.0, INIT_STD, size=(num_items, dim)),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    l2_reg: float = 1e-4
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 1024
    seed: int = 0
    phi: float = 1.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.phi <= 1:
            raise ValueError("phi must lie in (0, 1]")


def score(model: EmbeddingModel, u: int, i: int) -> float:
    if not (0 <= u < model.num_users and 0 <= i < model.num_items):
        raise IndexError(f"index ({u}, {i}) out of range")
    return float(model.user_table[u] @ model.item_table[i])


def _consolidate(idx: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inv = np.unique(idx, return_inverse=True)
    out = np.zeros((len(uniq), grads.shape[1]))
    np.add.at(out, inv, grads)
    return uniq, out


def merge_row_grads(
    idx_a: np.ndarray, grad_a: np.ndarray, idx_b: np.ndarray, grad_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sum two sparse row-gradient sets into one consolidated set."""
    return _consolidate(np.concatenate([idx_a, idx_b]), np.vstack([grad_a, grad_b]))


def bpr_loss_and_grad(
    model: EmbeddingModel, batch: Batch, l2_reg: float
) -> tuple[float, tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Pairwise ranking loss and gradients for the touched rows only.

    Returns (loss, (user_rows, user_grads), (item_rows, item_grads)) with
    row indices unique and gradients consolidated.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    u_emb = model.user_table[batch.users]
    p_emb = model.item_table[batch.pos_items]
    n_emb = model.item_table[batch.neg_items]
    margin = np.einsum("ij,ij->i", u_emb, p_emb - n_emb)
    # -ln sigmoid(m) = softplus(-m); d/dm = -sigmoid(-m)
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    coeff = -np.exp(-np.logaddexp(0.0, margin)) / len(batch)

    user_rows, user_grads = _consolidate(batch.users, coeff[:, None] * (p_emb - n_emb))
    item_rows, item_grads = _consolidate(
        np.concatenate([batch.pos_items, batch.neg_items]),
        np.vstack([coeff[:, None] * u_emb, -coeff[:, None] * u_emb]),
    )
    if l2_reg > 0:
        u_touched = model.user_table[user_rows]
        i_touched = model.item_table[item_rows]
        loss += l2_reg * float(np.sum(u_touched**2) + np.sum(i_touched**2))
        user_grads += 2.0 * l2_reg * u_touched
        item_grads += 2.0 * l2_reg * i_touched
    return loss, (user_rows, user_grads), (item_rows, item_grads)


class SparseAdam:
    """Adam whose moments and step counts advance only for touched rows."""

    def __init__(self, shape: tuple[int, int]):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(
        self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray, lr: float
    ) -> None:
        self.t[rows] += 1
        t = self.t[rows][:, None].astype(np.float64)
        m = ADAM_BETA1 * self.m[rows] + (1 - ADAM_BETA1) * grads
        v = ADAM_BETA2 * self.v[rows] + (1 - ADAM_BETA2) * grads**2
        self.m[rows] = m
        self.v[rows] = v
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        table[rows] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class DenseAdam:
    """Adam over a list of dense parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1 - ADAM_BETA1**self.t
        bc2 = 1 - ADAM_BETA2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g**2
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_recall: float = float("-inf")


def train(
    model: EmbeddingModel,
    split: SplitDataset,
    cfg: TrainConfig,
    distiller=None,
    eval_fn=None,
    on_epoch=None,
) -> TrainResult:
    """Train in place; keep the checkpoint with the best validation recall.

    distiller, when present and weighted, adds its loss to the ranking loss
    each batch and updates its own auxiliary parameters. eval_fn defaults to
    validation Recall@50 and is called once per epoch for early stopping
    (stop after `patience` epochs without improvement).
    """
    if eval_fn is None:
        from .evaluate import validation_recall

        eval_fn = lambda m, s: validation_recall(m, s, n=50)

    active = distiller is not None and distiller.cfg.lambda_td > 0
    lam = distiller.cfg.lambda_td if active else 0.0
    user_opt = SparseAdam(model.user_table.shape)
    item_opt = SparseAdam(model.item_table.shape)
    result = TrainResult()
    best_tables = None
    bad_epochs = 0

    for epoch in range(cfg.max_epochs):
        ep_rng = rng_for(cfg.seed, f"epoch:{epoch}")
        base_sum = td_sum = 0.0
        num_batches = 0
        for batch in sample_batches(split.train, cfg.batch_size, ep_rng):
            loss, (urows, ugrads), (irows, igrads) = bpr_loss_and_grad(
                model, batch, cfg.l2_reg
            )
            td_loss = 0.0
            if active:
                td_loss, (du, dug), (di, dig) = distiller.batch_grads(model, batch)
                urows, ugrads = merge_row_grads(urows, ugrads, du, lam * dug)
                irows, igrads = merge_row_grads(irows, igrads, di, lam * dig)
                distiller.update_params(cfg.learning_rate)
            total = loss + lam * td_loss
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {num_batches}: "
                    f"base={loss} td={td_loss}"
                )
            user_opt.step(model.user_table, urows, ugrads, cfg.learning_rate)
            item_opt.step(model.item_table, irows, igrads, cfg.learning_rate)
            base_sum += loss
            td_sum += td_loss
            num_batches += 1

        val = float(eval_fn(model, split))
        entry = {
            "epoch": epoch,
            "base_loss": base_sum / max(1, num_batches),
            "td_loss": td_sum / max(1, num_batches),
            "val_recall": val,
        }
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if val > result.best_val_recall:
            result.best_val_recall = val
            result.best_epoch = epoch
            best_tables = (model.user_table.copy(), model.item_table.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    if best_tables is not None:
        model.user_table, model.item_table = best_tables
    return result
