"""Graph-convolutional collaborative filtering teacher.

The model stacks, over the joint user+item vertex set: batch norm, a
spectral graph convolution, two feature-crossing layers, batch norm, and a
second convolution.  Final embeddings concatenate the base embeddings with
the first and last propagated layers, tripling the width.  Training
minimizes a pairwise ranking (BPR) loss with L2 regularization, full batch,
one sampled negative per training positive per epoch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sparse

from . import autodiff as ad
from .autodiff import BatchNormState, Node, Tape
from .checkpoint import load_container, save_container
from .config import Hyperparams
from .data import BprEpoch, SplitDataset, build_laplacian, sample_bpr_epoch
from .errors import CheckpointError, NumericError
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 10
CONVERGENCE_TOL = 1e-4


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class TeacherParams:
    """All trainable teacher state.

    ``cross1_weight``/``cross2_weight`` carry one weight row per graph
    vertex, matching the per-row feature crossing.
    """

    user_base: np.ndarray
    item_base: np.ndarray
    conv1_weight: np.ndarray
    conv2_weight: np.ndarray
    cross1_weight: np.ndarray
    cross2_weight: np.ndarray
    norm1: BatchNormState
    norm2: BatchNormState
    activation: str = "sigmoid"

    @classmethod
    def init(
        cls,
        num_users: int,
        num_items: int,
        dim: int,
        seed: int,
        activation: str = "sigmoid",
    ) -> "TeacherParams":
        rng = np.random.default_rng(seed)
        total = num_users + num_items
        return cls(
            user_base=glorot_uniform(rng, num_users, dim),
            item_base=glorot_uniform(rng, num_items, dim),
            conv1_weight=glorot_uniform(rng, dim, dim),
            conv2_weight=glorot_uniform(rng, dim, dim),
            cross1_weight=glorot_uniform(rng, total, dim),
            cross2_weight=glorot_uniform(rng, total, dim),
            norm1=BatchNormState.create(dim),
            norm2=BatchNormState.create(dim),
            activation=activation,
        )

    @property
    def num_users(self) -> int:
        return self.user_base.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_base.shape[0]

    @property
    def dim(self) -> int:
        return self.user_base.shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (shared, not copied)."""
        return {
            "user_base": self.user_base,
            "item_base": self.item_base,
            "conv1_weight": self.conv1_weight,
            "conv2_weight": self.conv2_weight,
            "cross1_weight": self.cross1_weight,
            "cross2_weight": self.cross2_weight,
            "norm1.gamma": self.norm1.gamma,
            "norm1.beta": self.norm1.beta,
            "norm2.gamma": self.norm2.gamma,
            "norm2.beta": self.norm2.beta,
        }

    def set_mode(self, mode: str) -> None:
        self.norm1.mode = mode
        self.norm2.mode = mode


def _activate(h: Node, activation: str) -> Node:
    if activation == "identity":
        return h
    if activation == "sigmoid":
        return ad.sigmoid(h)
    if activation == "tanh":
        return ad.tanh(h)
    raise NumericError(f"unknown activation {activation!r}")


def spectral_conv(x: Node, lap: sparse.spmatrix, weight: Node, activation: str) -> Node:
    """One propagation layer: ``activation((X + L @ X) @ weight)``."""
    return _activate(ad.matmul(ad.add(x, ad.sparse_dense_matmul(lap, x)), weight), activation)


def cross_layer(x: Node, weight: Node) -> Node:
    """Per-row feature crossing: row ``x`` becomes ``(w . x) * x + x``.

    Implemented with row-wise reductions only; no vertex ever materializes
    a ``dim x dim`` outer product.
    """
    row_dot = ad.reduce_sum(ad.hadamard(x, weight), axis=1)
    return ad.add(ad.scale_rows(x, row_dot), x)


def teacher_forward(
    leaves: dict[str, Node],
    norm1: BatchNormState,
    norm2: BatchNormState,
    lap: sparse.spmatrix,
    num_users: int,
    activation: str,
    update_running: bool = False,
) -> tuple[Node, Node]:
    """Run the full stack; returns (user, item) embedding nodes.

    ``leaves`` must hold one node per key of
    :meth:`TeacherParams.trainable`, all on the same tape.
    """
    base = ad.concat_rows(leaves["user_base"], leaves["item_base"])
    normed = ad.batch_norm(base, leaves["norm1.gamma"], leaves["norm1.beta"], norm1, update_running)
    layer1 = spectral_conv(normed, lap, leaves["conv1_weight"], activation)
    crossed = cross_layer(cross_layer(layer1, leaves["cross1_weight"]), leaves["cross2_weight"])
    normed2 = ad.batch_norm(crossed, leaves["norm2.gamma"], leaves["norm2.beta"], norm2, update_running)
    layer2 = spectral_conv(normed2, lap, leaves["conv2_weight"], activation)

    total = base.shape[0]
    user_rows = np.arange(num_users)
    item_rows = np.arange(num_users, total)
    users = ad.concat_cols(
        leaves["user_base"], ad.gather_rows(layer1, user_rows), ad.gather_rows(layer2, user_rows)
    )
    items = ad.concat_cols(
        leaves["item_base"], ad.gather_rows(layer1, item_rows), ad.gather_rows(layer2, item_rows)
    )
    return users, items


def ranking_loss(users: Node, items: Node, epoch: BprEpoch) -> Node:
    """Summed pairwise loss ``-log sigmoid(u . (v_pos - v_neg))``."""
    u = ad.gather_rows(users, epoch.users)
    diff = ad.sub(ad.gather_rows(items, epoch.pos_items), ad.gather_rows(items, epoch.neg_items))
    margins = ad.reduce_sum(ad.hadamard(u, diff), axis=1)
    return ad.reduce_sum(ad.softplus(ad.scale(margins, -1.0)))


def bpr_loss(users: Node, items: Node, epoch: BprEpoch, reg_lambda: float = 0.0) -> Node:
    """Ranking loss plus ``reg_lambda`` times the squared Frobenius norms."""
    loss = ranking_loss(users, items, epoch)
    if reg_lambda != 0.0:
        reg = ad.add(ad.reduce_sum(ad.square(users)), ad.reduce_sum(ad.square(items)))
        loss = ad.add(loss, ad.scale(reg, reg_lambda))
    return loss


def teacher_embeddings(params: TeacherParams, lap: sparse.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass under running statistics; returns plain arrays."""
    params.set_mode("eval")
    try:
        tape = Tape()
        leaves = {key: tape.leaf(arr) for key, arr in params.trainable().items()}
        users, items = teacher_forward(
            leaves, params.norm1, params.norm2, lap, params.num_users, params.activation
        )
        return users.value, items.value
    finally:
        params.set_mode("train")


def converged(losses: list[float], window: int = CONVERGENCE_WINDOW, tol: float = CONVERGENCE_TOL) -> bool:
    """True once the relative loss change across ``window`` epochs is tiny."""
    if len(losses) <= window:
        return False
    prev, cur = losses[-1 - window], losses[-1]
    return abs(cur - prev) / max(abs(prev), 1e-12) < tol


def _norms(arrays: dict[str, np.ndarray]) -> str:
    return ", ".join(f"{key}={float(np.linalg.norm(val)):.3e}" for key, val in arrays.items())


@dataclass
class TeacherRun:
    params: TeacherParams
    user_factors: np.ndarray
    item_factors: np.ndarray
    losses: list[float]


def train_teacher(
    split: SplitDataset, hyper: Hyperparams, cross_layers: bool = True
) -> TeacherRun:
    """Train the teacher on the split's train graph.

    Each epoch resamples negatives, runs a full-batch forward/backward, and
    takes one Adam step.  Stops early once the loss plateaus; aborts with
    diagnostics if the loss or any gradient goes non-finite.

    With ``cross_layers=False`` the cross weights are pinned to zero and left
    out of the optimizer, which reduces both cross layers to the identity.
    """
    hyper.validate()
    graph = split.train
    lap = build_laplacian(graph)
    init_seed, sample_seed = np.random.SeedSequence(hyper.seed).spawn(2)
    params = TeacherParams.init(
        graph.num_users, graph.num_items, hyper.dim, init_seed, hyper.activation
    )
    sampler = np.random.default_rng(sample_seed)
    adam = AdamState(lr=hyper.lr)
    trainable = params.trainable()
    if not cross_layers:
        params.cross1_weight[:] = 0.0
        params.cross2_weight[:] = 0.0
        trainable = {
            key: arr for key, arr in trainable.items()
            if key not in ("cross1_weight", "cross2_weight")
        }
    losses: list[float] = []

    for epoch_no in range(hyper.epochs):
        triples = sample_bpr_epoch(graph, sampler)
        tape = Tape()
        leaves = {key: tape.leaf(arr) for key, arr in trainable.items()}
        if not cross_layers:
            leaves["cross1_weight"] = tape.leaf(params.cross1_weight)
            leaves["cross2_weight"] = tape.leaf(params.cross2_weight)
        users, items = teacher_forward(
            leaves, params.norm1, params.norm2, lap, graph.num_users,
            params.activation, update_running=True,
        )
        loss = bpr_loss(users, items, triples, hyper.reg_lambda)
        loss_value = float(loss.value)
        losses.append(loss_value)
        if not np.isfinite(loss_value):
            raise NumericError(
                f"teacher training diverged at epoch {epoch_no}: loss={loss_value!r}; "
                f"gradients unavailable; parameter norms: {_norms(trainable)}"
            )
        tape.backward(loss)
        grads = {
            key: leaves[key].grad if leaves[key].grad is not None else np.zeros_like(arr)
            for key, arr in trainable.items()
        }
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericError(
                f"teacher training diverged at epoch {epoch_no}: loss={loss_value!r}; "
                f"gradient norms: {_norms(grads)}"
            )
        adam_step(trainable, grads, adam)
        if converged(losses):
            log.info("teacher loss plateaued at epoch %d (loss %.6g)", epoch_no, loss_value)
            break

    user_factors, item_factors = teacher_embeddings(params, lap)
    return TeacherRun(params=params, user_factors=user_factors, item_factors=item_factors, losses=losses)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_TEACHER_ARRAY_COUNT = 10


def _norm_block(state: BatchNormState) -> np.ndarray:
    return np.stack([state.gamma, state.beta, state.running_mean, state.running_var])


def _norm_from_block(block: np.ndarray) -> BatchNormState:
    gamma, beta, running_mean, running_var = (row.astype(np.float64) for row in block)
    return BatchNormState(gamma=gamma, beta=beta, running_mean=running_mean, running_var=running_var)


def save_teacher(path: Path | str, run: TeacherRun) -> None:
    params = run.params
    save_container(
        path,
        num_users=params.num_users,
        num_items=params.num_items,
        dim=params.dim,
        activation=params.activation,
        arrays=[
            params.user_base,
            params.item_base,
            params.conv1_weight,
            params.conv2_weight,
            params.cross1_weight,
            params.cross2_weight,
            _norm_block(params.norm1),
            _norm_block(params.norm2),
            run.user_factors,
            run.item_factors,
        ],
    )


def load_teacher(path: Path | str) -> TeacherRun:
    box = load_container(path, expect_arrays=_TEACHER_ARRAY_COUNT)
    arrays = [arr.astype(np.float64) for arr in box.arrays]
    expected_shapes = [
        (box.num_users, box.dim),
        (box.num_items, box.dim),
        (box.dim, box.dim),
        (box.dim, box.dim),
        (box.num_users + box.num_items, box.dim),
        (box.num_users + box.num_items, box.dim),
        (4, box.dim),
        (4, box.dim),
        (box.num_users, 3 * box.dim),
        (box.num_items, 3 * box.dim),
    ]
    for arr, want in zip(arrays, expected_shapes):
        if arr.shape != want:
            raise CheckpointError(
                f"{path}: array shape {arr.shape} does not match expected {want}; "
                f"not a teacher checkpoint"
            )
    params = TeacherParams(
        user_base=arrays[0],
        item_base=arrays[1],
        conv1_weight=arrays[2],
        conv2_weight=arrays[3],
        cross1_weight=arrays[4],
        cross2_weight=arrays[5],
        norm1=_norm_from_block(arrays[6]),
        norm2=_norm_from_block(arrays[7]),
        activation=box.activation,
    )
    return TeacherRun(params=params, user_factors=arrays[8], item_factors=arrays[9], losses=[])
