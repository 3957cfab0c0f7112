"""Binary-code student distilled from the teacher's embeddings.

The student keeps one unconstrained real matrix per side; ``tanh`` maps it
into (-1, 1) ("relaxed codes"), and training pushes entries toward the
hypercube corners so that the final ``sign`` rounding is nearly lossless.
The objective combines:

* a pairwise ranking loss on the relaxed codes,
* a listwise distillation term matching, per user, the teacher's softmax
  over that user's positives (and over sampled negatives) at a temperature,
* the expected squared rounding noise of stochastic binarization, and
* a corner penalty ``sum((|x| - 1)^2)`` that is zero exactly on {-1, 1}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape, index_add_rows
from .checkpoint import load_container, save_container
from .config import Hyperparams
from .data import (
    BprEpoch,
    BipartiteGraph,
    SplitDataset,
    sample_negatives_without_replacement,
)
from .errors import CheckpointError, ConfigError, NumericError
from .optim import AdamState, adam_step
from .teacher import TeacherRun, _norms, converged, ranking_loss

log = logging.getLogger(__name__)


@dataclass
class StudentParams:
    """Unconstrained code parameters; relaxed codes are their ``tanh``."""

    user_raw: np.ndarray
    item_raw: np.ndarray

    @classmethod
    def from_teacher(cls, user_factors: np.ndarray, item_factors: np.ndarray) -> "StudentParams":
        """Initialize so that ``tanh`` of the result mirrors the teacher.

        Each side is scaled by its largest absolute entry into [-0.99, 0.99]
        and mapped through ``arctanh``; the clamp keeps the inverse finite.
        """
        return cls(user_raw=_atanh_scaled(user_factors), item_raw=_atanh_scaled(item_factors))

    def trainable(self) -> dict[str, np.ndarray]:
        return {"user_raw": self.user_raw, "item_raw": self.item_raw}

    def relaxed(self) -> tuple[np.ndarray, np.ndarray]:
        return np.tanh(self.user_raw), np.tanh(self.item_raw)


def _atanh_scaled(factors: np.ndarray) -> np.ndarray:
    factors = np.asarray(factors, dtype=np.float64)
    peak = np.max(np.abs(factors)) if factors.size else 0.0
    if peak == 0.0:
        return np.zeros_like(factors)
    return np.arctanh(np.clip(factors / peak, -0.99, 0.99))


def binarize(raw: np.ndarray) -> np.ndarray:
    """Sign rounding with ties going to +1; returns an int8 matrix in {-1, 1}."""
    return np.where(np.asarray(raw) >= 0, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# corner and rounding-noise penalties
# ---------------------------------------------------------------------------


def corner_penalty(x: Node) -> Node:
    """``sum((|x| - 1)^2)``: zero exactly on the hypercube corners."""
    ones = x.tape.leaf(np.ones_like(x.value))
    return ad.reduce_sum(ad.square(ad.sub(ad.absolute(x), ones)))


def corner_penalty_value(x: np.ndarray) -> float:
    return float(((np.abs(x) - 1.0) ** 2).sum())


def noise_penalty(x: Node, tau: float) -> Node:
    """Expected squared rounding noise of stochastic binarization.

    Entry ``x`` rounds up to +1 with probability ``sigmoid(x / tau)`` and
    down to -1 otherwise; the penalty is the closed-form expectation of the
    squared perturbation, summed over all entries (no sampling involved).
    """
    if tau <= 0:
        raise ConfigError(f"noise penalty temperature must be positive, got {tau}")
    ones = x.tape.leaf(np.ones_like(x.value))
    up_prob = ad.sigmoid(ad.scale(x, 1.0 / tau))
    to_pos = ad.square(ad.sub(ones, x))
    to_neg = ad.square(ad.add(ones, x))
    down_prob = ad.sub(ones, up_prob)
    return ad.reduce_sum(ad.add(ad.hadamard(up_prob, to_pos), ad.hadamard(down_prob, to_neg)))


def noise_penalty_value(x: np.ndarray, tau: float) -> float:
    if tau <= 0:
        raise ConfigError(f"noise penalty temperature must be positive, got {tau}")
    from scipy.special import expit

    p = expit(x / tau)
    return float((p * (1.0 - x) ** 2 + (1.0 - p) * (1.0 + x) ** 2).sum())


# ---------------------------------------------------------------------------
# listwise distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillBatch:
    """Per-user item lists flattened into contiguous segments.

    ``pos_*`` covers every training positive of each user;``neg_*`` holds as
    many sampled non-interacted items per user.  ``*_starts`` are segment
    offsets into the flat arrays.  ``triples`` pairs the same positives and
    negatives for the pairwise term.
    """

    pos_users: np.ndarray
    pos_items: np.ndarray
    pos_starts: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray
    neg_starts: np.ndarray
    triples: BprEpoch


def build_distill_batch(graph: BipartiteGraph, rng: np.random.Generator) -> DistillBatch:
    """Assemble one epoch's lists: all positives, equal-size sampled negatives."""
    pos_users: list[np.ndarray] = []
    pos_items: list[np.ndarray] = []
    neg_users: list[np.ndarray] = []
    neg_items: list[np.ndarray] = []
    triple_negs: list[np.ndarray] = []
    pos_starts: list[int] = []
    neg_starts: list[int] = []
    pos_total = neg_total = 0
    for u in range(graph.num_users):
        positives = graph.user_positives[u]
        n = len(positives)
        if n == 0:
            continue
        available = graph.num_items - n
        if available == 0:
            log.warning("user %s interacted with every item; skipping in distillation", graph.user_keys[u])
            continue
        draw = min(n, available)
        negatives = sample_negatives_without_replacement(rng, positives, draw, graph.num_items)
        pos_starts.append(pos_total)
        neg_starts.append(neg_total)
        pos_total += n
        neg_total += draw
        pos_users.append(np.full(n, u, dtype=np.int64))
        pos_items.append(positives)
        neg_users.append(np.full(draw, u, dtype=np.int64))
        neg_items.append(negatives)
        triple_negs.append(negatives if draw == n else np.resize(negatives, n))

    def cat(parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    triples = BprEpoch(cat(pos_users), cat(pos_items), cat(triple_negs))
    return DistillBatch(
        pos_users=cat(pos_users),
        pos_items=cat(pos_items),
        pos_starts=np.asarray(pos_starts, dtype=np.int64),
        neg_users=cat(neg_users),
        neg_items=cat(neg_items),
        neg_starts=np.asarray(neg_starts, dtype=np.int64),
        triples=triples,
    )


def _segment_lengths(starts: np.ndarray, total: int) -> np.ndarray:
    return np.diff(np.r_[starts, total])


def segment_softmax(scores: np.ndarray, starts: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax over each contiguous segment of a flat score array."""
    if len(scores) == 0:
        return np.zeros(0)
    lengths = _segment_lengths(starts, len(scores))
    z = scores / temperature
    z = z - np.repeat(np.maximum.reduceat(z, starts), lengths)
    e = np.exp(z)
    return e / np.repeat(np.add.reduceat(e, starts), lengths)


def teacher_listwise_probs(
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    users: np.ndarray,
    items: np.ndarray,
    starts: np.ndarray,
    temperature: float,
) -> np.ndarray:
    """The teacher's per-user softmax distribution over an item list."""
    scores = np.einsum("fd,fd->f", user_factors[users], item_factors[items])
    return segment_softmax(scores, starts, temperature)


def listwise_ce(
    code_users: Node,
    code_items: Node,
    users: np.ndarray,
    items: np.ndarray,
    starts: np.ndarray,
    teacher_probs: np.ndarray,
    temperature: float,
) -> Node:
    """Cross-entropy between teacher list distributions and the student's.

    Scores are ``x_u . x_i / temperature`` with a softmax per segment; the
    whole term is one fused tape op so that large flat batches avoid
    per-node bookkeeping.  A single-item segment has softmax 1 and
    contributes exactly zero.
    """
    if temperature <= 0:
        raise ConfigError(f"distillation temperature must be positive, got {temperature}")
    if code_users.tape is not code_items.tape:
        raise NumericError("listwise_ce: operands recorded on different tapes")
    tape = code_users.tape
    if len(users) == 0:
        return tape.record(0.0, lambda g: None, "listwise_ce")

    picked_u = code_users.value[users]
    picked_i = code_items.value[items]
    scores = np.einsum("fd,fd->f", picked_u, picked_i) / temperature
    lengths = _segment_lengths(starts, len(scores))
    shifted = scores - np.repeat(np.maximum.reduceat(scores, starts), lengths)
    exp = np.exp(shifted)
    seg_sum = np.add.reduceat(exp, starts)
    log_probs = shifted - np.repeat(np.log(seg_sum), lengths)
    value = -np.sum(teacher_probs * log_probs)

    def pull(g):
        gain = float(g)
        probs = exp / np.repeat(seg_sum, lengths)
        teacher_mass = np.repeat(np.add.reduceat(teacher_probs, starts), lengths)
        dscores = gain * (probs * teacher_mass - teacher_probs) / temperature
        if code_users.grad is None:
            code_users.grad = np.zeros_like(code_users.value)
        if code_items.grad is None:
            code_items.grad = np.zeros_like(code_items.value)
        index_add_rows(code_users.grad, users, dscores[:, None] * picked_i)
        index_add_rows(code_items.grad, items, dscores[:, None] * picked_u)

    return tape.record(value, pull, "listwise_ce")


def rank_distill_loss(
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    code_users: Node,
    code_items: Node,
    batch: DistillBatch,
    temperature: float,
) -> Node:
    """Distillation over the positive lists plus the sampled negative lists."""
    pos_probs = teacher_listwise_probs(
        user_factors, item_factors, batch.pos_users, batch.pos_items, batch.pos_starts, temperature
    )
    neg_probs = teacher_listwise_probs(
        user_factors, item_factors, batch.neg_users, batch.neg_items, batch.neg_starts, temperature
    )
    return ad.add(
        listwise_ce(code_users, code_items, batch.pos_users, batch.pos_items, batch.pos_starts, pos_probs, temperature),
        listwise_ce(code_users, code_items, batch.neg_users, batch.neg_items, batch.neg_starts, neg_probs, temperature),
    )


# ---------------------------------------------------------------------------
# objective and training
# ---------------------------------------------------------------------------


def student_loss(
    code_users: Node,
    code_items: Node,
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    batch: DistillBatch,
    hyper: Hyperparams,
) -> Node:
    """Full relaxed objective on (already tanh-mapped) code nodes.

    With ``alpha = beta = nu = 0`` this is exactly the pairwise ranking
    loss; zero-weighted terms are skipped rather than multiplied by zero.
    """
    loss = ranking_loss(code_users, code_items, batch.triples)
    if hyper.alpha != 0.0:
        rank = rank_distill_loss(
            user_factors, item_factors, code_users, code_items, batch, hyper.temp
        )
        loss = ad.add(loss, ad.scale(rank, hyper.alpha * hyper.temp**2))
    if hyper.nu != 0.0:
        noise = ad.add(noise_penalty(code_users, hyper.tau), noise_penalty(code_items, hyper.tau))
        loss = ad.add(loss, ad.scale(noise, hyper.nu))
    if hyper.beta != 0.0:
        corner = ad.add(corner_penalty(code_users), corner_penalty(code_items))
        loss = ad.add(loss, ad.scale(corner, hyper.beta))
    return loss


def student_objective(
    leaves: dict[str, Node],
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    batch: DistillBatch,
    hyper: Hyperparams,
) -> Node:
    """Objective as a function of the raw (pre-tanh) parameter leaves."""
    return student_loss(
        ad.tanh(leaves["user_raw"]),
        ad.tanh(leaves["item_raw"]),
        user_factors,
        item_factors,
        batch,
        hyper,
    )


@dataclass
class StudentRun:
    params: StudentParams
    losses: list[float]


def train_student(teacher: TeacherRun, split: SplitDataset, hyper: Hyperparams) -> StudentRun:
    """Distill the teacher into code parameters over the train graph.

    Initializes from the teacher's embeddings, then per epoch: resample the
    negative lists, evaluate the relaxed objective full batch, and take one
    Adam step.  Stops early on a loss plateau; aborts on non-finite values.
    """
    hyper.validate()
    code_dim = teacher.user_factors.shape[1]
    if code_dim != hyper.code_dim:
        raise ConfigError(
            f"teacher embeddings have {code_dim} columns but dim={hyper.dim} implies "
            f"{hyper.code_dim}-bit codes; pass the dim the teacher was trained with"
        )
    graph = split.train
    params = StudentParams.from_teacher(teacher.user_factors, teacher.item_factors)
    sampler = np.random.default_rng(hyper.seed)
    adam = AdamState(lr=hyper.lr)
    trainable = params.trainable()
    losses: list[float] = []

    for epoch_no in range(hyper.epochs):
        batch = build_distill_batch(graph, sampler)
        tape = Tape()
        leaves = {key: tape.leaf(arr) for key, arr in trainable.items()}
        loss = student_objective(leaves, teacher.user_factors, teacher.item_factors, batch, hyper)
        loss_value = float(loss.value)
        losses.append(loss_value)
        if not np.isfinite(loss_value):
            raise NumericError(
                f"student training diverged at epoch {epoch_no}: loss={loss_value!r}; "
                f"gradients unavailable; parameter norms: {_norms(trainable)}"
            )
        tape.backward(loss)
        grads = {
            key: leaves[key].grad if leaves[key].grad is not None else np.zeros_like(arr)
            for key, arr in trainable.items()
        }
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericError(
                f"student training diverged at epoch {epoch_no}: loss={loss_value!r}; "
                f"gradient norms: {_norms(grads)}"
            )
        adam_step(trainable, grads, adam)
        if converged(losses):
            log.info("student loss plateaued at epoch %d (loss %.6g)", epoch_no, loss_value)
            break

    return StudentRun(params=params, losses=losses)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_STUDENT_ARRAY_COUNT = 3
_HYPER_FIELDS = ("alpha", "temp", "tau", "beta", "nu", "lr", "reg_lambda")


def save_student(path: Path | str, run: StudentRun, hyper: Hyperparams) -> None:
    rows, code_dim = run.params.user_raw.shape
    if code_dim % 3:
        raise CheckpointError(f"student code width {code_dim} is not 3x a base width")
    hyper_block = np.asarray([[getattr(hyper, name) for name in _HYPER_FIELDS]])
    save_container(
        path,
        num_users=rows,
        num_items=run.params.item_raw.shape[0],
        dim=code_dim // 3,
        activation="tanh",
        arrays=[run.params.user_raw, run.params.item_raw, hyper_block],
    )


def load_student(path: Path | str) -> tuple[StudentParams, dict[str, float]]:
    box = load_container(path, expect_arrays=_STUDENT_ARRAY_COUNT)
    code_dim = 3 * box.dim
    user_raw, item_raw, hyper_block = (arr.astype(np.float64) for arr in box.arrays)
    expected = [(box.num_users, code_dim), (box.num_items, code_dim), (1, len(_HYPER_FIELDS))]
    for arr, want in zip((user_raw, item_raw, hyper_block), expected):
        if arr.shape != want:
            raise CheckpointError(
                f"{path}: array shape {arr.shape} does not match expected {want}; "
                f"not a student checkpoint"
            )
    hyper = dict(zip(_HYPER_FIELDS, hyper_block[0].tolist()))
    return StudentParams(user_raw=user_raw, item_raw=item_raw), hyper
