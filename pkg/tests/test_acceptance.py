"""Acceptance gate: ten numbered release criteria, each printing one
``[PASS]``/``[FAIL]``/``[SKIP]`` line with its measured numbers.

Criteria 5-8 include checks that need the MovieLens 1M ratings file, which
this package cannot download itself.  Point ``BINREC_ML1M`` at a local
``ratings.dat`` to enable them (and additionally set ``BINREC_FULL=1`` to
accept the multi-hour full-dataset run of criterion 7); without the file
those checks skip, and a small synthetic stand-in exercises the same
comparison wherever one is meaningful at desk scale.
"""

import os

import numpy as np
import pytest
from numpy.random import default_rng
from threadpoolctl import threadpool_limits

from binrec.autodiff import Tape, grad_check
from binrec.binindex import bench, dot_binary, pack_codes, select_topk, topk
from binrec.config import Hyperparams
from binrec.data import (
    Interaction,
    build_graph,
    filter_min_degree,
    parse_ratings,
    split_per_user,
    subsample_users,
)
from binrec.metrics import (
    BinaryScorer,
    EmbeddingScorer,
    evaluate,
    map_at_k,
    ndcg_at_k,
    recall_at_k,
)
from binrec.student import (
    binarize,
    build_distill_batch,
    corner_penalty,
    corner_penalty_value,
    noise_penalty,
    rank_distill_loss,
    student_objective,
    train_student,
)
from binrec.teacher import ranking_loss, train_teacher

ML1M_ENV = "BINREC_ML1M"
FULL_ENV = "BINREC_FULL"

PLUS_MINUS_ONE = np.array([-1, 1], dtype=np.int8)


def emit(capsys, status: str, text: str) -> None:
    """Print one criterion line past pytest's capture."""
    with capsys.disabled():
        print(f"[{status}] {text}", flush=True)


# ---------------------------------------------------------------------------
# MovieLens-gated data access
# ---------------------------------------------------------------------------

_ML1M_CACHE: dict = {}


def require_movielens(capsys, label: str, full: bool = False):
    reasons = []
    if not os.environ.get(ML1M_ENV):
        reasons.append(f"set {ML1M_ENV}=/path/to/ml-1m/ratings.dat")
    if full and os.environ.get(FULL_ENV) != "1":
        reasons.append(f"set {FULL_ENV}=1 to accept the multi-hour runtime")
    if reasons:
        reason = "; ".join(reasons)
        emit(capsys, "SKIP", f"{label}: {reason}")
        pytest.skip(reason)


def movielens_split(fraction: float):
    """Filtered per-user split of (a user fraction of) MovieLens 1M."""
    if fraction not in _ML1M_CACHE:
        with open(os.environ[ML1M_ENV]) as fh:
            interactions = parse_ratings(fh, "movielens")
        if fraction < 1.0:
            interactions = subsample_users(interactions, fraction, seed=1)
        interactions = filter_min_degree(interactions, min_user=20, min_item=20)
        _ML1M_CACHE[fraction] = split_per_user(interactions, ratio=0.5, seed=1)
    return _ML1M_CACHE[fraction]


def binary_report(student_run, split, k=100):
    scorer = BinaryScorer(
        pack_codes(binarize(student_run.params.user_raw)),
        pack_codes(binarize(student_run.params.item_raw)),
    )
    return evaluate(scorer, split, k)


def teacher_ndcg(teacher_run, split, k=100) -> float:
    scorer = EmbeddingScorer(teacher_run.user_factors, teacher_run.item_factors)
    return evaluate(scorer, split, k).ndcg


# ---------------------------------------------------------------------------
# synthetic stand-in dataset: items carry two latent attributes and each
# user wants one attribute pair, so preferences are learnable but the
# per-user item lists still overlap heavily across users
# ---------------------------------------------------------------------------

SURROGATE_SEEDS = (1, 2, 3)
SURROGATE_TEACHER = dict(dim=8, epochs=150, lr=0.05)
SURROGATE_STUDENT = dict(dim=8, epochs=400, lr=0.2, temp=0.5)


def conjunctive_interactions(num_users, num_items, levels, per_user, noise, seed):
    rng = default_rng(seed)
    item_a = np.arange(num_items) % levels
    item_b = (np.arange(num_items) // levels) % levels
    interactions = []
    for u in range(num_users):
        want_a, want_b = rng.integers(0, levels, size=2)
        pool = np.flatnonzero((item_a == want_a) & (item_b == want_b))
        take = min(per_user, pool.size)
        liked = list(rng.choice(pool, size=take, replace=False))
        extra = rng.choice(num_items, size=max(1, int(noise * take)), replace=False)
        liked.extend(int(i) for i in extra)
        liked = list(dict.fromkeys(liked))
        interactions.extend(Interaction(f"u{u}", f"i{i}") for i in liked)
    return interactions


@pytest.fixture(scope="module")
def surrogate_split():
    return split_per_user(conjunctive_interactions(150, 160, 4, 8, 0.2, seed=7), ratio=0.5, seed=0)


@pytest.fixture(scope="module")
def surrogate_teachers(surrogate_split):
    return {
        seed: train_teacher(surrogate_split, Hyperparams(seed=seed, **SURROGATE_TEACHER))
        for seed in SURROGATE_SEEDS
    }


def teacher_agreement(student_run, teacher_run, split, k=20) -> float:
    """Mean top-k overlap between rounded-code and teacher rankings."""
    binary = BinaryScorer(
        pack_codes(binarize(student_run.params.user_raw)),
        pack_codes(binarize(student_run.params.item_raw)),
    )
    dense = EmbeddingScorer(teacher_run.user_factors, teacher_run.item_factors)
    graph = split.train
    overlaps = []
    for u in range(graph.num_users):
        seen = graph.positives_mask(u)
        got = set(binary.topk(u, k, exclude=seen).tolist())
        want = set(dense.topk(u, k, exclude=seen).tolist())
        overlaps.append(len(got & want) / k)
    return float(np.mean(overlaps))


# ---------------------------------------------------------------------------
# criterion 1: packed inner products are exact
# ---------------------------------------------------------------------------


class TestCriterion1BinaryScoring:
    def test_packed_inner_products_are_exact(self, capsys):
        pairs = 100_000
        mismatches = {}
        for dim in (48, 64, 128, 192):
            rng = default_rng(dim)
            a = rng.choice(PLUS_MINUS_ONE, size=(pairs, dim))
            b = rng.choice(PLUS_MINUS_ONE, size=(pairs, dim))
            dense = np.einsum("ij,ij->i", a.astype(np.int64), b.astype(np.int64))
            packed_a = pack_codes(a).words
            packed_b = pack_codes(b).words
            bad = 0
            for row_a, row_b, want in zip(packed_a, packed_b, dense):
                if dot_binary(row_a, row_b, dim) != want:
                    bad += 1
            mismatches[dim] = bad
        ok = all(count == 0 for count in mismatches.values())
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 1 (binary scoring exactness): {pairs} random pairs exact at "
            f"d=48,64,128,192",
        )
        assert ok, f"mismatch counts per width: {mismatches}"


# ---------------------------------------------------------------------------
# criterion 2: every loss term's gradient matches finite differences
# ---------------------------------------------------------------------------


class TestCriterion2Gradients:
    @staticmethod
    def random_instance(seed):
        # 4 users x 4 items, two positives per user so two negatives remain.
        rng = default_rng(seed)
        interactions = []
        for u in range(4):
            interactions.append(Interaction(f"u{u}", f"i{u}"))
            interactions.append(Interaction(f"u{u}", f"i{(u + 1) % 4}"))
        graph = build_graph(interactions)
        batch = build_distill_batch(graph, rng)
        user_factors = rng.normal(size=(4, 3))
        item_factors = rng.normal(size=(4, 3))
        return batch, user_factors, item_factors, rng

    @staticmethod
    def run_check(make_loss, arrays):
        def loss_fn(params):
            tape = Tape()
            leaves = {key: tape.leaf(arr) for key, arr in params.items()}
            loss = make_loss(leaves)
            tape.backward(loss)
            return float(loss.value), {key: leaves[key].grad for key in params}

        return grad_check(loss_fn, arrays, fd_epsilon=1e-5)

    def test_each_loss_term_matches_finite_differences(self, capsys):
        worst = dict.fromkeys(("pairwise", "listwise", "noise", "corner", "objective"), 0.0)
        for seed in range(20):
            batch, user_factors, item_factors, rng = self.random_instance(seed)
            code_u = rng.normal(size=(4, 3))
            code_i = rng.normal(size=(4, 3))
            worst["pairwise"] = max(
                worst["pairwise"],
                self.run_check(
                    lambda lv: ranking_loss(lv["u"], lv["i"], batch.triples),
                    {"u": code_u.copy(), "i": code_i.copy()},
                ),
            )
            worst["listwise"] = max(
                worst["listwise"],
                self.run_check(
                    lambda lv: rank_distill_loss(
                        user_factors, item_factors, lv["u"], lv["i"], batch, 1.0
                    ),
                    {"u": code_u.copy(), "i": code_i.copy()},
                ),
            )
            worst["noise"] = max(
                worst["noise"],
                self.run_check(
                    lambda lv: noise_penalty(lv["x"], 0.2), {"x": rng.normal(size=(4, 3))}
                ),
            )
            worst["corner"] = max(
                worst["corner"],
                self.run_check(
                    lambda lv: corner_penalty(lv["x"]), {"x": rng.normal(size=(4, 3))}
                ),
            )
            worst["objective"] = max(
                worst["objective"],
                self.run_check(
                    lambda lv: student_objective(
                        lv, user_factors, item_factors, batch, Hyperparams(dim=1)
                    ),
                    {"user_raw": rng.normal(size=(4, 3)), "item_raw": rng.normal(size=(4, 3))},
                ),
            )
        ok = all(err < 1e-4 for err in worst.values())
        detail = ", ".join(f"{name} {err:.2e}" for name, err in worst.items())
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 2 (gradient correctness): 20 seeds, max relative error by term: {detail}",
        )
        assert ok, worst


# ---------------------------------------------------------------------------
# criterion 3: corner-penalty properties
# ---------------------------------------------------------------------------


class TestCriterion3CornerPenalty:
    def test_zero_set_positivity_and_growth(self, capsys):
        corners_ok = True
        for d in range(1, 11):
            grid = np.arange(2**d)[:, None]
            corners = (1 - 2 * ((grid >> np.arange(d)) & 1)).astype(np.float64)
            corners_ok &= all(corner_penalty_value(row[None, :]) == 0.0 for row in corners)

        rng = default_rng(3)
        interior = rng.uniform(-1.0, 1.0, size=(10_000, 8))
        interior_ok = all(corner_penalty_value(row[None, :]) > 0.0 for row in interior)

        # Growth near corners: within max-norm distance 0.5 of a corner no
        # entry changes sign, so the penalty equals the squared Euclidean
        # distance to that corner; by Cauchy-Schwarz it is therefore at
        # least ||x - y||_1^2 / d.  (No linear-in-distance floor can hold
        # for a penalty with quadratic zeros: one coordinate 0.1 short of
        # its corner already costs only 0.01.)
        d = 8
        y = rng.choice(np.array([-1.0, 1.0]), size=(10_000, d))
        x = y + rng.uniform(-0.5, 0.5, size=(10_000, d))
        g = np.array([corner_penalty_value(row[None, :]) for row in x])
        l2_sq = ((x - y) ** 2).sum(axis=1)
        l1 = np.abs(x - y).sum(axis=1)
        growth_ok = bool(
            np.max(np.abs(g - l2_sq)) < 1e-12 and np.all(g >= l1**2 / d - 1e-12)
        )

        ok = corners_ok and interior_ok and growth_ok
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            "criterion 3 (corner-penalty properties): zero on all corners to d=10, positive at "
            "10000 interior points, quadratic-distance growth near corners",
        )
        assert ok, (corners_ok, interior_ok, growth_ok)


# ---------------------------------------------------------------------------
# criterion 4: ranking metrics against direct-definition references
# ---------------------------------------------------------------------------


def reference_metrics(ranked, relevant, k):
    ranked = list(ranked)[:k]
    relevant = set(int(i) for i in relevant)
    hits = [1.0 if item in relevant else 0.0 for item in ranked]

    recall = sum(hits) / len(relevant)

    precisions = []
    seen = 0
    for position, hit in enumerate(hits, start=1):
        if hit:
            seen += 1
            precisions.append(seen / position)
    average_precision = sum(precisions) / min(k, len(relevant))

    dcg = sum(h / np.log2(pos + 1.0) for pos, h in enumerate(hits, start=1))
    ideal = sum(1.0 / np.log2(pos + 1.0) for pos in range(1, min(k, len(relevant)) + 1))
    return recall, average_precision, dcg / ideal


class TestCriterion4MetricOracles:
    def test_metrics_match_definitions(self, capsys):
        worst = 0.0
        for trial in range(1000):
            rng = default_rng(trial)
            n = int(rng.integers(5, 80))
            k = int(rng.integers(1, n + 1))
            scores = rng.integers(0, 6, size=n).astype(np.float64)  # few levels: many ties
            ranked = select_topk(scores, k)
            relevant = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
            got = (
                recall_at_k(ranked, relevant, k),
                map_at_k(ranked, relevant, k),
                ndcg_at_k(ranked, relevant, k),
            )
            for value, want in zip(got, reference_metrics(ranked, relevant, k)):
                worst = max(worst, abs(value - want))
        ok = worst < 1e-12
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 4 (metric oracles): 1000 tied instances, max deviation {worst:.1e}",
        )
        assert ok, worst


# ---------------------------------------------------------------------------
# criterion 5: distillation beats the no-teacher ablation
# ---------------------------------------------------------------------------


class TestCriterion5Distillation:
    def test_movielens_eighth(self, capsys):
        label = "criterion 5 (distillation benefit, MovieLens 1M 1/8 subsample)"
        require_movielens(capsys, label)
        split = movielens_split(0.125)
        gains = []
        for seed in (0, 1, 2):
            teacher_run = train_teacher(split, Hyperparams(dim=64, epochs=200, seed=seed))
            distilled = train_student(
                teacher_run, split, Hyperparams(dim=64, epochs=200, seed=seed)
            )
            plain = train_student(
                teacher_run, split, Hyperparams(dim=64, epochs=200, seed=seed, alpha=0.0)
            )
            base = binary_report(plain, split).ndcg
            gains.append((binary_report(distilled, split).ndcg - base) / base)
        mean_gain = float(np.mean(gains))
        ok = mean_gain >= 0.05
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"{label}: relative NDCG@100 gain {mean_gain:+.3f} over 3 seeds",
        )
        assert ok, gains

    def test_synthetic_stand_in(self, capsys, surrogate_split, surrogate_teachers):
        # At this scale the no-teacher ablation (which still starts from the
        # teacher's embeddings) matches the teacher's NDCG, so the asserted
        # signal is how much better the distilled codes track the teacher's
        # own ranking; the NDCG shift is reported alongside.
        agreement_gains = []
        ndcg_shifts = []
        for seed, teacher_run in surrogate_teachers.items():
            distilled = train_student(
                teacher_run, surrogate_split,
                Hyperparams(seed=seed, alpha=10.0, **SURROGATE_STUDENT),
            )
            plain = train_student(
                teacher_run, surrogate_split,
                Hyperparams(seed=seed, alpha=0.0, **SURROGATE_STUDENT),
            )
            agreement_gains.append(
                teacher_agreement(distilled, teacher_run, surrogate_split)
                - teacher_agreement(plain, teacher_run, surrogate_split)
            )
            ndcg_shifts.append(
                binary_report(distilled, surrogate_split).ndcg
                - binary_report(plain, surrogate_split).ndcg
            )
        mean_gain = float(np.mean(agreement_gains))
        ok = mean_gain >= 0.05
        per_seed = ", ".join(f"{gain:+.3f}" for gain in agreement_gains)
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 5 stand-in (distillation signal, synthetic): top-20 teacher-agreement "
            f"gain {mean_gain:+.3f} ({per_seed}); NDCG@100 shift {float(np.mean(ndcg_shifts)):+.4f}",
        )
        assert ok, agreement_gains


# ---------------------------------------------------------------------------
# criterion 6: the feature-crossing layers help the teacher
# ---------------------------------------------------------------------------


class TestCriterion6CrossOperation:
    def test_movielens_eighth(self, capsys):
        label = "criterion 6 (crossing-layer benefit, MovieLens 1M 1/8 subsample)"
        require_movielens(capsys, label)
        split = movielens_split(0.125)
        deltas = []
        for seed in (0, 1, 2):
            full = train_teacher(split, Hyperparams(dim=64, epochs=200, seed=seed))
            bare = train_teacher(
                split, Hyperparams(dim=64, epochs=200, seed=seed), cross_layers=False
            )
            deltas.append(teacher_ndcg(full, split) - teacher_ndcg(bare, split))
        mean_delta = float(np.mean(deltas))
        ok = mean_delta > 0.0
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"{label}: NDCG@100 delta {mean_delta:+.4f} over 3 seeds",
        )
        assert ok, deltas

    def test_synthetic_stand_in(self, capsys, surrogate_split, surrogate_teachers):
        deltas = []
        for seed, full_run in surrogate_teachers.items():
            bare = train_teacher(
                surrogate_split,
                Hyperparams(seed=seed, **SURROGATE_TEACHER),
                cross_layers=False,
            )
            deltas.append(
                teacher_ndcg(full_run, surrogate_split) - teacher_ndcg(bare, surrogate_split)
            )
        mean_delta = float(np.mean(deltas))
        ok = mean_delta > 0.0
        per_seed = ", ".join(f"{delta:+.4f}" for delta in deltas)
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 6 stand-in (crossing-layer benefit, synthetic): NDCG@100 delta "
            f"{mean_delta:+.4f} ({per_seed})",
        )
        assert ok, deltas


# ---------------------------------------------------------------------------
# criterion 7: absolute numbers on the full dataset
# ---------------------------------------------------------------------------


class TestCriterion7AbsoluteNumbers:
    def test_movielens_full_band(self, capsys):
        label = "criterion 7 (absolute MovieLens 1M numbers)"
        require_movielens(capsys, label, full=True)
        split = movielens_split(1.0)
        teacher_run = train_teacher(split, Hyperparams(dim=64, epochs=200, seed=0))
        student_run = train_student(teacher_run, split, Hyperparams(dim=64, epochs=200, seed=0))
        report = binary_report(student_run, split)
        ok = 0.24 <= report.recall <= 0.37 and 0.24 <= report.ndcg <= 0.37
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"{label}: Recall@100 {report.recall:.4f}, NDCG@100 {report.ndcg:.4f} "
            f"(target band 0.24-0.37)",
        )
        assert ok, report

# ---------------------------------------------------------------------------
# criterion 8: both training phases cut their loss in half by epoch 200
# ---------------------------------------------------------------------------


def late_over_first(losses):
    return losses[min(199, len(losses) - 1)] / losses[0]


class TestCriterion8Convergence:
    def test_planted_instance_both_phases(self, capsys, toy_teacher, toy_student):
        teacher_ratio = late_over_first(toy_teacher.losses)
        student_ratio = late_over_first(toy_student.losses)
        ok = teacher_ratio < 0.5 and student_ratio < 0.5
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 8 (convergence, planted instance): epoch-200/epoch-1 loss "
            f"teacher {teacher_ratio:.3f}, student {student_ratio:.3f}",
        )
        assert ok, (teacher_ratio, student_ratio)

    def test_movielens_eighth_both_phases(self, capsys):
        label = "criterion 8 (convergence, MovieLens 1M 1/8 subsample)"
        require_movielens(capsys, label)
        split = movielens_split(0.125)
        teacher_run = train_teacher(split, Hyperparams(dim=64, epochs=200, seed=0))
        student_run = train_student(teacher_run, split, Hyperparams(dim=64, epochs=200, seed=0))
        teacher_ratio = late_over_first(teacher_run.losses)
        student_ratio = late_over_first(student_run.losses)
        ok = teacher_ratio < 0.5 and student_ratio < 0.5
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"{label}: epoch-200/epoch-1 loss teacher {teacher_ratio:.3f}, "
            f"student {student_ratio:.3f}",
        )
        assert ok, (teacher_ratio, student_ratio)


# ---------------------------------------------------------------------------
# criterion 9: relaxed codes end up near the hypercube corners
# ---------------------------------------------------------------------------


class TestCriterion9Saturation:
    def test_codes_saturate_on_planted_instance(self, capsys, toy_student):
        relaxed_users, relaxed_items = toy_student.params.relaxed()
        magnitudes = np.abs(np.concatenate([relaxed_users, relaxed_items]))
        fraction = float(np.mean(magnitudes > 0.9))
        ok = fraction >= 0.8
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 9 (code saturation): {fraction:.0%} of relaxed entries have "
            f"magnitude > 0.9 (floor 80%)",
        )
        assert ok, fraction


# ---------------------------------------------------------------------------
# criterion 10: packed retrieval beats the dense float32 baseline
# ---------------------------------------------------------------------------


class TestCriterion10Retrieval:
    def test_packed_topk_speedup_with_identical_output(self, capsys):
        dim, n_items, k = 192, 100_000, 100
        rng = default_rng(0)
        item_signs = rng.choice(PLUS_MINUS_ONE, size=(n_items, dim))
        user_signs = rng.choice(PLUS_MINUS_ONE, size=(256, dim))
        item_codes = pack_codes(item_signs)
        user_codes = pack_codes(user_signs)

        dense_items = item_signs.astype(np.float32)
        parity = True
        for q in range(50):
            ranked = topk(user_codes.words[q], item_codes, k)
            dense_scores = dense_items @ user_signs[q].astype(np.float32)
            parity &= bool(np.array_equal(ranked.indices, select_topk(dense_scores, k)))

        with threadpool_limits(limits=1):
            report = bench(user_codes, item_codes, k=k, repetitions=3)
        ok = parity and report["speedup"] >= 4.0
        emit(
            capsys,
            "PASS" if ok else "FAIL",
            f"criterion 10 (retrieval speed): {report['speedup']:.2f}x over dense float32 at "
            f"d={dim}, N={n_items}, K={k} ({report['qps_binary']:.0f} vs "
            f"{report['qps_dense']:.0f} queries/s), top-{k} identical on 50 queries",
        )
        assert ok, (parity, report)
