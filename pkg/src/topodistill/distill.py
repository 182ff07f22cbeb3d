"""Distillation losses over the entities of a training batch.

Given a batch, the entity set is the deduplicated union of its users and
items (positives and negatives pooled). The teacher and student rows of
those entities are compared either point-wise through projection heads
(fitnet, de) or through relation matrices built from pairwise
similarities (ftd, htd). htd splits the relations hierarchically:
preference groups are assigned in the teacher space, prototype rows
summarize each group, and only intra-group entity relations plus
prototype-level relations are matched.

All gradients here are hand-derived and verified against central
differences in the test suite. Teacher rows are constants throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Batch
from .kernels import similarity_backward, similarity_forward
from .model import DenseAdam, EmbeddingModel
from .util import rng_for

METHODS = ("none", "fitnet", "de", "ftd", "htd")
GROUP_TOPOLOGIES = ("proto_proto", "proto_entity")
ASSIGNERS = ("learned", "kmeans")


@dataclass
class DistillConfig:
    method: str = "none"
    lambda_td: float = 1e-3
    gamma: float = 0.5
    num_groups: int = 30
    tau: float = 0.1
    group_topology: str = "proto_entity"
    assigner: str = "learned"
    similarity: str = "cosine"
    # raw_sums keeps every term an unnormalized sum; the default divides
    # topology terms by their relation counts and the hint term by the
    # entity count so gamma trades off comparable magnitudes.
    raw_sums: bool = False
    # log_alpha feeds log-probabilities instead of probabilities into the
    # perturbed softmax that samples group assignments.
    log_alpha: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lambda_td < 0:
            raise ValueError("lambda_td must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.group_topology not in GROUP_TOPOLOGIES:
            raise ValueError(f"group_topology must be one of {GROUP_TOPOLOGIES}")
        if self.assigner not in ASSIGNERS:
            raise ValueError(f"assigner must be one of {ASSIGNERS}")


@dataclass
class BatchEntities:
    user_rows: np.ndarray
    item_rows: np.ndarray

    def __len__(self) -> int:
        return len(self.user_rows) + len(self.item_rows)


def gather_batch_entities(
    batch: Batch, teacher: EmbeddingModel, student: EmbeddingModel
) -> tuple[np.ndarray, np.ndarray, BatchEntities]:
    """Aligned teacher/student representation matrices of the batch entities.

    Row i of both outputs refers to the same entity: first the unique
    users, then the unique items.
    """
    uu = np.unique(batch.users)
    ii = np.unique(np.concatenate([batch.pos_items, batch.neg_items]))
    e_t = np.vstack([teacher.user_table[uu], teacher.item_table[ii]])
    e_s = np.vstack([student.user_table[uu], student.item_table[ii]])
    return e_t, e_s, BatchEntities(user_rows=uu, item_rows=ii)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_vjp(s: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return s * (upstream - (upstream * s).sum(axis=1, keepdims=True))


def one_hot(labels: np.ndarray, num_groups: int) -> np.ndarray:
    z = np.zeros((len(labels), num_groups))
    z[np.arange(len(labels)), labels] = 1.0
    return z


@dataclass
class Assignment:
    """Hard group assignment of batch entities, one group per row.

    z_soft, alpha and logits are retained when the assignment came from
    the learned sampler; the backward pass routes gradients of the hard
    sample through the relaxed one (straight-through).
    """

    z: np.ndarray  # (b, K) one-hot rows
    group_sizes: np.ndarray  # (K,)
    tau: float = 1.0
    log_alpha: bool = False
    z_soft: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    @property
    def num_groups(self) -> int:
        return self.z.shape[1]

    @property
    def z_norm(self) -> np.ndarray:
        """Columns divided by group size; empty groups stay all-zero."""
        denom = np.maximum(self.group_sizes, 1).astype(np.float64)
        return self.z / denom[None, :]

    def mask(self) -> np.ndarray:
        """Same-group indicator matrix z z^T (binary, symmetric, unit diag)."""
        return self.z @ self.z.T

    def groups(self) -> list[np.ndarray]:
        labels = self.z.argmax(axis=1)
        return [np.nonzero(labels == k)[0] for k in range(self.num_groups)]


class AssignmentNetwork:
    """Linear layer with softmax output scoring group membership."""

    def __init__(self, dim_in: int, num_groups: int, rng: np.random.Generator):
        self.w = rng.normal(0.0, 1.0 / np.sqrt(dim_in), size=(num_groups, dim_in))
        self.b = np.zeros(num_groups)

    def params(self) -> list[np.ndarray]:
        return [self.w, self.b]

    def probabilities(self, e_t: np.ndarray) -> np.ndarray:
        return _softmax(e_t @ self.w.T + self.b[None, :])


def assign_groups(
    e_t: np.ndarray,
    net: AssignmentNetwork,
    tau: float,
    rng: np.random.Generator,
    log_alpha: bool = False,
) -> Assignment:
    """Sample one preference group per entity from the learned scorer.

    Probabilities are perturbed with Gumbel(0, 1) noise, pushed through a
    temperature-tau softmax, then hardened to the argmax one-hot. The soft
    sample is kept for the straight-through backward pass.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    alpha = net.probabilities(e_t)
    gumbel = rng.gumbel(size=alpha.shape)
    base = np.log(np.maximum(alpha, 1e-30)) if log_alpha else alpha
    z_soft = _softmax((base + gumbel) / tau)
    labels = z_soft.argmax(axis=1)
    return Assignment(
        z=one_hot(labels, alpha.shape[1]),
        group_sizes=np.bincount(labels, minlength=alpha.shape[1]),
        tau=tau,
        log_alpha=log_alpha,
        z_soft=z_soft,
        alpha=alpha,
    )


def assignment_backward(
    assignment: Assignment, e_t: np.ndarray, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the assignment network given dL/dZ of the hard sample.

    Straight-through: the hard one-hot is treated as the soft sample, then
    the chain runs through the perturbed softmax and the probability head.
    """
    if assignment.z_soft is None or assignment.alpha is None:
        raise ValueError("assignment was not produced by the learned sampler")
    dbase = _softmax_vjp(assignment.z_soft, dz) / assignment.tau
    if assignment.log_alpha:
        # base = log softmax(logits)
        dlogits = dbase - dbase.sum(axis=1, keepdims=True) * assignment.alpha
    else:
        dlogits = _softmax_vjp(assignment.alpha, dbase)
    return dlogits.T @ e_t, dlogits.sum(axis=0)


def kmeans_fit(
    x: np.ndarray,
    num_groups: int,
    rng: np.random.Generator,
    iterations: int = 50,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, labels, sse_history); sse_history records the
    within-cluster squared error after each assignment step. Empty
    clusters are reseeded to the point farthest from its centroid.
    """
    n = len(x)
    if n < num_groups:
        raise ValueError(f"need at least {num_groups} points, got {n}")
    centroids = np.empty((num_groups, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, num_groups):
        total = d2.sum()
        if total > 0:
            centroids[k] = x[rng.choice(n, p=d2 / total)]
        else:
            centroids[k] = x[rng.integers(n)]
        d2 = np.minimum(d2, ((x - centroids[k]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    sse_history = []
    for _ in range(iterations):
        dists = (
            np.einsum("ij,ij->i", x, x)[:, None]
            - 2.0 * (x @ centroids.T)
            + np.einsum("ij,ij->i", centroids, centroids)[None, :]
        )
        new_labels = dists.argmin(axis=1)
        sse_history.append(float(np.maximum(dists[np.arange(n), new_labels], 0.0).sum()))
        counts = np.bincount(new_labels, minlength=num_groups)
        updated = centroids.copy()
        for k in range(num_groups):
            if counts[k] > 0:
                updated[k] = x[new_labels == k].mean(axis=0)
            else:
                updated[k] = x[np.argmax(dists[np.arange(n), new_labels])]
        if np.array_equal(new_labels, labels) and len(sse_history) > 1:
            labels = new_labels
            break
        labels = new_labels
        centroids = updated
    return centroids, labels, np.asarray(sse_history)


def kmeans_assign(
    e_t: np.ndarray,
    num_groups: int,
    rng: np.random.Generator,
    iterations: int = 50,
) -> Assignment:
    """Cluster teacher rows and wrap the labels as a hard Assignment."""
    _, labels, _ = kmeans_fit(e_t, num_groups, rng, iterations)
    return Assignment(
        z=one_hot(labels, num_groups),
        group_sizes=np.bincount(labels, minlength=num_groups),
    )


def nearest_centroid_assign(e_t: np.ndarray, centroids: np.ndarray) -> Assignment:
    dists = (
        np.einsum("ij,ij->i", e_t, e_t)[:, None]
        - 2.0 * (e_t @ centroids.T)
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    labels = dists.argmin(axis=1)
    return Assignment(
        z=one_hot(labels, len(centroids)),
        group_sizes=np.bincount(labels, minlength=len(centroids)),
    )


def prototypes(e: np.ndarray, z_norm: np.ndarray) -> np.ndarray:
    """Per-group mean rows, P = Z_norm^T E; empty groups give zero rows."""
    return z_norm.T @ e


class ProjectionHeads:
    """K two-layer relu MLPs lifting student rows to the teacher dimension.

    Weights are stacked along the first axis so head k is w1[k], b1[k],
    w2[k], b2[k]. Heads exist only during training.
    """

    def __init__(
        self,
        num_heads: int,
        dim_student: int,
        dim_teacher: int,
        rng: np.random.Generator,
        hidden: int | None = None,
    ):
        h = (dim_student + dim_teacher) // 2 if hidden is None else hidden
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / dim_student), size=(num_heads, h, dim_student))
        self.b1 = np.zeros((num_heads, h))
        self.w2 = rng.normal(0.0, np.sqrt(1.0 / h), size=(num_heads, dim_teacher, h))
        self.b2 = np.zeros((num_heads, dim_teacher))

    @property
    def num_heads(self) -> int:
        return self.w1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def apply(self, k: int, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.w1[k].T + self.b1[k], 0.0)
        return hidden @ self.w2[k].T + self.b2[k]


def _zero_head_grads(heads: ProjectionHeads) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in heads.params()]


def hint_loss(
    e_t: np.ndarray,
    e_s: np.ndarray,
    heads: ProjectionHeads,
    assignment: Assignment | None = None,
    normalize: bool = True,
) -> tuple[float, np.ndarray, list[np.ndarray], np.ndarray]:
    """Reconstruction of teacher rows from student rows through the heads.

    Each entity is projected by the head of its assigned group (a single
    shared head when assignment is None). Returns
    (loss, dL/dE_s, head parameter grads, residual matrix).
    """
    b = len(e_t)
    if assignment is None:
        if heads.num_heads != 1:
            raise ValueError("assignment required when more than one head exists")
        group_indices = [np.arange(b)]
    else:
        if len(assignment.z) != b:
            raise ValueError("assignment size does not match entity count")
        group_indices = assignment.groups()

    denom = float(b) if normalize else 1.0
    residual = np.zeros_like(e_t)
    de_s = np.zeros_like(e_s)
    grads = _zero_head_grads(heads)
    caches = []
    for k, idx in enumerate(group_indices):
        if len(idx) == 0:
            caches.append(None)
            continue
        pre = e_s[idx] @ heads.w1[k].T + heads.b1[k]
        act = np.maximum(pre, 0.0)
        out = act @ heads.w2[k].T + heads.b2[k]
        residual[idx] = e_t[idx] - out
        caches.append((idx, pre, act))
    loss = float(np.einsum("ij,ij->", residual, residual)) / denom

    for k, cache in enumerate(caches):
        if cache is None:
            continue
        idx, pre, act = cache
        dout = (-2.0 / denom) * residual[idx]
        grads[2][k] = dout.T @ act
        grads[3][k] = dout.sum(axis=0)
        dact = dout @ heads.w2[k]
        dpre = dact * (pre > 0.0)
        grads[0][k] = dpre.T @ e_s[idx]
        grads[1][k] = dpre.sum(axis=0)
        de_s[idx] = dpre @ heads.w1[k]
    return loss, de_s, grads, residual


def hint_assignment_grad(
    e_s: np.ndarray,
    residual: np.ndarray,
    heads: ProjectionHeads,
    normalize: bool = True,
) -> np.ndarray:
    """dL/dZ of the hint term, needing every head's output per entity.

    Only inner products between residuals and head outputs are required,
    so the full (b, dim_teacher) projections are never materialized.
    """
    b = len(e_s)
    denom = float(b) if normalize else 1.0
    dz = np.empty((b, heads.num_heads))
    for m in range(heads.num_heads):
        act = np.maximum(e_s @ heads.w1[m].T + heads.b1[m], 0.0)
        rw2 = residual @ heads.w2[m]
        dz[:, m] = (-2.0 / denom) * (
            np.einsum("ij,ij->i", act, rw2) + residual @ heads.b2[m]
        )
    return dz


def de_loss(
    e_t: np.ndarray,
    e_s: np.ndarray,
    assignment: Assignment,
    heads: ProjectionHeads,
    normalize: bool = True,
) -> tuple[float, np.ndarray, list[np.ndarray], np.ndarray]:
    """Group-wise hint regression: every group owns a projection head."""
    return hint_loss(e_t, e_s, heads, assignment, normalize)


def ftd_loss(
    e_t: np.ndarray,
    e_s: np.ndarray,
    similarity: str = "cosine",
    normalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Distance between the full pairwise-similarity matrices of the spaces."""
    a_t = similarity_forward(e_t, e_t, similarity)[0]
    a_s, cache = similarity_forward(e_s, e_s, similarity)
    diff = a_t - a_s
    denom = float(diff.size) if normalize else 1.0
    loss = float(np.einsum("ij,ij->", diff, diff)) / denom
    upstream = (-2.0 / denom) * diff
    db, dd = similarity_backward(upstream, cache)
    return loss, db + dd


def group_topology(
    p: np.ndarray,
    e: np.ndarray,
    variant: str,
    assignment: Assignment,
    similarity: str = "cosine",
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Group-level relation matrix H plus its inclusion mask.

    proto_proto relates prototypes pairwise (K x K); proto_entity relates
    each prototype to the entities of the other groups (K x b), excluding
    intra-group entries. Empty groups are excluded everywhere.
    """
    nonempty = (assignment.group_sizes > 0).astype(np.float64)
    if variant == "proto_proto":
        h, cache = similarity_forward(p, p, similarity)
        mask = np.outer(nonempty, nonempty)
    elif variant == "proto_entity":
        h, cache = similarity_forward(p, e, similarity)
        mask = nonempty[:, None] * (1.0 - assignment.z.T)
    else:
        raise ValueError(f"unknown group topology {variant!r}")
    return h, mask, cache


def _group_level_loss_and_grad(
    e_t: np.ndarray,
    e_s: np.ndarray,
    assignment: Assignment,
    variant: str,
    similarity: str,
    normalize: bool,
) -> tuple[float, np.ndarray]:
    z_norm = assignment.z_norm
    p_t = prototypes(e_t, z_norm)
    p_s = prototypes(e_s, z_norm)
    h_t, mask, _ = group_topology(p_t, e_t, variant, assignment, similarity)
    h_s, mask_s, cache = group_topology(p_s, e_s, variant, assignment, similarity)
    diff = (h_t - h_s) * mask
    denom = max(1.0, float(mask.sum())) if normalize else 1.0
    loss = float(np.einsum("ij,ij->", diff, diff)) / denom
    upstream = (-2.0 / denom) * diff
    if variant == "proto_proto":
        da, db = similarity_backward(upstream, cache)
        de_s = z_norm @ (da + db)
    else:
        dp, de_direct = similarity_backward(upstream, cache)
        de_s = z_norm @ dp + de_direct
    return loss, de_s


def _entity_level_loss_and_grad(
    e_t: np.ndarray,
    e_s: np.ndarray,
    assignment: Assignment,
    similarity: str,
    normalize: bool,
) -> tuple[float, np.ndarray]:
    # the same-group mask makes the relation matrix block diagonal up to a
    # permutation, so only per-group blocks are ever formed
    nnz = float((assignment.group_sizes.astype(np.float64) ** 2).sum())
    denom = max(1.0, nnz) if normalize else 1.0
    loss = 0.0
    de_s = np.zeros_like(e_s)
    for idx in assignment.groups():
        if len(idx) == 0:
            continue
        s_t = similarity_forward(e_t[idx], e_t[idx], similarity)[0]
        s_s, cache = similarity_forward(e_s[idx], e_s[idx], similarity)
        diff = s_t - s_s
        loss += float(np.einsum("ij,ij->", diff, diff))
        da, db = similarity_backward((-2.0 / denom) * diff, cache)
        de_s[idx] += da + db
    return loss / denom, de_s


def htd_loss(
    e_t: np.ndarray,
    e_s: np.ndarray,
    assignment: Assignment,
    heads: ProjectionHeads,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray, list[np.ndarray], np.ndarray | None]:
    """Hierarchical topology loss.

    gamma weighs the two topology terms (group-level plus masked
    entity-level) against the group-wise hint term. Returns
    (loss, dL/dE_s, head grads, dL/dZ or None); the assignment gradient
    comes from the hint term, which is the differentiable route into the
    group sampler.
    """
    normalize = not cfg.raw_sums
    gamma = cfg.gamma
    loss = 0.0
    de_s = np.zeros_like(e_s)
    head_grads = _zero_head_grads(heads)
    dz = None

    if gamma > 0.0:
        g_loss, g_de = _group_level_loss_and_grad(
            e_t, e_s, assignment, cfg.group_topology, cfg.similarity, normalize
        )
        e_loss, e_de = _entity_level_loss_and_grad(
            e_t, e_s, assignment, cfg.similarity, normalize
        )
        loss += gamma * (g_loss + e_loss)
        de_s += gamma * (g_de + e_de)

    if gamma < 1.0:
        h_loss, h_de, h_grads, residual = hint_loss(
            e_t, e_s, heads, assignment, normalize
        )
        loss += (1.0 - gamma) * h_loss
        de_s += (1.0 - gamma) * h_de
        head_grads = [(1.0 - gamma) * g for g in h_grads]
        if assignment.z_soft is not None:
            dz = (1.0 - gamma) * hint_assignment_grad(e_s, residual, heads, normalize)
    return loss, de_s, head_grads, dz


class Distiller:
    """Owns the auxiliary distillation parameters and computes batch losses.

    batch_grads returns the raw distillation loss and sparse student-row
    gradients; the trainer scales them by lambda_td. update_params applies
    the lambda-scaled Adam step to the heads and the assignment network.
    """

    def __init__(
        self,
        cfg: DistillConfig,
        teacher: EmbeddingModel,
        student_dim: int,
        seed: int,
    ):
        if cfg.method == "none":
            raise ValueError("no distiller for method 'none'")
        self.cfg = cfg
        self.teacher = teacher
        self.heads: ProjectionHeads | None = None
        self.assign_net: AssignmentNetwork | None = None
        self.centroids: np.ndarray | None = None
        self._head_opt: DenseAdam | None = None
        self._assign_opt: DenseAdam | None = None
        self._pending_head_grads: list[np.ndarray] | None = None
        self._pending_assign_grads: list[np.ndarray] | None = None

        num_heads = 1 if cfg.method == "fitnet" else cfg.num_groups
        if cfg.method in ("fitnet", "de", "htd"):
            self.heads = ProjectionHeads(
                num_heads, student_dim, teacher.dim, rng_for(seed, "head-init")
            )
            self._head_opt = DenseAdam(self.heads.params())
        if cfg.method in ("de", "htd"):
            if cfg.assigner == "learned":
                self.assign_net = AssignmentNetwork(
                    teacher.dim, cfg.num_groups, rng_for(seed, "assign-init")
                )
                self._assign_opt = DenseAdam(self.assign_net.params())
                self._gumbel_rng = rng_for(seed, "gumbel")
            else:
                all_rows = np.vstack([teacher.user_table, teacher.item_table])
                self.centroids, _, _ = kmeans_fit(
                    all_rows, cfg.num_groups, rng_for(seed, "kmeans")
                )

    def _assign(self, e_t: np.ndarray) -> Assignment:
        if self.assign_net is not None:
            return assign_groups(
                e_t, self.assign_net, self.cfg.tau, self._gumbel_rng, self.cfg.log_alpha
            )
        return nearest_centroid_assign(e_t, self.centroids)

    def batch_grads(
        self, student: EmbeddingModel, batch: Batch
    ) -> tuple[float, tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        e_t, e_s, entities = gather_batch_entities(batch, self.teacher, student)
        normalize = not self.cfg.raw_sums
        dz = None
        assignment = None

        if self.cfg.method == "fitnet":
            loss, de_s, head_grads, _ = hint_loss(
                e_t, e_s, self.heads, None, normalize
            )
        elif self.cfg.method == "de":
            assignment = self._assign(e_t)
            loss, de_s, head_grads, residual = de_loss(
                e_t, e_s, assignment, self.heads, normalize
            )
            if assignment.z_soft is not None:
                dz = hint_assignment_grad(e_s, residual, self.heads, normalize)
        elif self.cfg.method == "ftd":
            loss, de_s = ftd_loss(e_t, e_s, self.cfg.similarity, normalize)
            head_grads = None
        elif self.cfg.method == "htd":
            assignment = self._assign(e_t)
            loss, de_s, head_grads, dz = htd_loss(
                e_t, e_s, assignment, self.heads, self.cfg
            )
        else:
            raise ValueError(f"unsupported method {self.cfg.method!r}")

        self._pending_head_grads = head_grads
        if dz is not None:
            dw, db = assignment_backward(assignment, e_t, dz)
            self._pending_assign_grads = [dw, db]
        else:
            self._pending_assign_grads = None

        n_users = len(entities.user_rows)
        return (
            loss,
            (entities.user_rows, de_s[:n_users]),
            (entities.item_rows, de_s[n_users:]),
        )

    def update_params(self, lr: float) -> None:
        lam = self.cfg.lambda_td
        if self._pending_head_grads is not None and self._head_opt is not None:
            self._head_opt.step(
                self.heads.params(),
                [lam * g for g in self._pending_head_grads],
                lr,
            )
            self._pending_head_grads = None
        if self._pending_assign_grads is not None and self._assign_opt is not None:
            self._assign_opt.step(
                self.assign_net.params(),
                [lam * g for g in self._pending_assign_grads],
                lr,
            )
            self._pending_assign_grads = None


def build_distiller(
    cfg: DistillConfig, teacher: EmbeddingModel, student_dim: int, seed: int
) -> Distiller | None:
    if cfg.method == "none":
        return None
    return Distiller(cfg, teacher, student_dim, seed)
