"""Shared fixtures: a tiny planted-preference instance and trained runs on it.

The planted instance is a five-user/five-item star: every user likes the
hub item plus one mostly-exclusive item, and two users share their
exclusive pick.  All interactions go into the training half so the graph
is fully observed; tests that need held-out items build their own splits.
Training runs are session-scoped because they are reused by several tests
and are deterministic for a fixed seed.
"""

import numpy as np
import pytest

from binrec.config import Hyperparams
from binrec.data import Interaction, split_per_user
from binrec.student import train_student
from binrec.teacher import train_teacher

TOY_POSITIVES = {0: [0, 4], 1: [1, 4], 2: [2, 4], 3: [3, 4], 4: [0, 4]}

TOY_TEACHER = Hyperparams(dim=2, epochs=200, lr=0.05, seed=2)
TOY_STUDENT = Hyperparams(dim=2, epochs=1600, lr=0.5, seed=2, alpha=10.0, temp=0.1)


def toy_interactions():
    return [
        Interaction(f"u{user}", f"i{item}")
        for user, items in TOY_POSITIVES.items()
        for item in items
    ]


@pytest.fixture(scope="session")
def toy_split():
    return split_per_user(toy_interactions(), ratio=1.0, seed=0)


@pytest.fixture(scope="session")
def toy_teacher(toy_split):
    return train_teacher(toy_split, TOY_TEACHER)


@pytest.fixture(scope="session")
def toy_student(toy_split, toy_teacher):
    return train_student(toy_teacher, toy_split, TOY_STUDENT)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
