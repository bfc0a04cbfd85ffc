import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab import attacks
from poisonlab.data import Sample, TaskDataset, round_half_up


def make_task(class_sizes, val_sizes=None, task_id=0, side=8):
    """Task with the given per-class train sizes (classes numbered from 0)."""
    val_sizes = val_sizes or [0] * len(class_sizes)
    train, val = [], []
    for cls, n in enumerate(class_sizes):
        for i in range(n):
            img = np.full((side, side, 1), (cls * 17 + i) % 97 / 97.0, dtype=np.float32)
            train.append(Sample(image=img, label=cls))
    for cls, n in enumerate(val_sizes):
        for i in range(n):
            img = np.full((side, side, 1), (cls * 31 + i) % 89 / 89.0, dtype=np.float32)
            val.append(Sample(image=img, label=cls))
    return TaskDataset(task_id=task_id, classes=tuple(range(len(class_sizes))),
                       train=train, val=val, test=[])


class TestChoosePoisonedClasses:
    def test_half_of_ten(self):
        chosen = attacks.choose_poisoned_classes(range(10), 50, seed=1)
        assert len(chosen) == 5

    def test_all(self):
        chosen = attacks.choose_poisoned_classes(range(7), 100, seed=1)
        assert sorted(chosen) == list(range(7))

    def test_round_half_up(self):
        assert len(attacks.choose_poisoned_classes(range(3), 50, seed=1)) == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            attacks.choose_poisoned_classes([], 50, seed=1)

    def test_deterministic(self):
        a = attacks.choose_poisoned_classes(range(10), 30, seed=4)
        b = attacks.choose_poisoned_classes(range(10), 30, seed=4)
        assert a == b


class TestAssignCorruptions:
    def test_proportional_coverage(self):
        spec = attacks.PoisonSpec(pcp=100, pn=5, pp=100)
        mapping = attacks.assign_corruptions(range(10), spec)
        counts = {}
        for kind in mapping.values():
            counts[kind.name] = counts.get(kind.name, 0) + 1
        assert sorted(counts.values()) == [2, 2, 2, 2, 2]

    def test_single_poison(self):
        spec = attacks.PoisonSpec(pcp=100, pn=1, pp=100)
        mapping = attacks.assign_corruptions(range(6), spec)
        assert {k.name for k in mapping.values()} == {spec.kinds[0]}

    def test_bijection_when_counts_match(self):
        spec = attacks.PoisonSpec(pcp=100, pn=5, pp=100)
        mapping = attacks.assign_corruptions(range(5), spec)
        assert len({k.name for k in mapping.values()}) == 5

    def test_pn_larger_than_kinds_rejected(self):
        with pytest.raises(ValueError, match="pn"):
            attacks.PoisonSpec(pcp=100, pn=6, pp=100)


class TestPoisonTask:
    def test_full_poisoning(self):
        task = make_task([10, 10])
        out = attacks.poison_task(task, attacks.PoisonSpec(pcp=100, pn=1, pp=100, seed=2))
        assert sum(s.poisoned for s in out.train) == 20

    def test_half_classes(self):
        task = make_task([10, 10])
        out = attacks.poison_task(task, attacks.PoisonSpec(pcp=50, pn=1, pp=100, seed=2))
        assert sum(s.poisoned for s in out.train) == 10
        assert len(out.train) == 20

    def test_rounding_to_zero_leaves_class_alone(self):
        task = make_task([3])
        out = attacks.poison_task(task, attacks.PoisonSpec(pcp=100, pn=1, pp=10, seed=2))
        assert sum(s.poisoned for s in out.train) == 0
        assert all(a is b for a, b in zip(task.train, out.train))

    def test_val_split_poisoned_test_untouched(self):
        task = make_task([6, 6], val_sizes=[4, 4])
        task.test.append(Sample(image=np.zeros((8, 8, 1), dtype=np.float32), label=0))
        out = attacks.poison_task(task, attacks.PoisonSpec(pcp=100, pn=1, pp=50, seed=2))
        assert sum(s.poisoned for s in out.val) == 4  # half of each 4-sample class
        assert out.test is task.test

    def test_clean_samples_are_same_objects(self):
        task = make_task([8, 8])
        out = attacks.poison_task(task, attacks.PoisonSpec(pcp=50, pn=1, pp=50, seed=2))
        for before, after in zip(task.train, out.train):
            if not after.poisoned:
                assert after is before

    def test_deterministic(self):
        task = make_task([8, 8])
        spec = attacks.PoisonSpec(pcp=50, pn=2, pp=75, seed=9)
        a = attacks.poison_task(task, spec)
        b = attacks.poison_task(task, spec)
        assert [s.poisoned for s in a.train] == [s.poisoned for s in b.train]
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.train, b.train))


class TestPresets:
    @pytest.mark.parametrize("kind,expected", [
        ("BASE", (100.0, 1, 100.0)),
        ("BAIT", (50.0, 1, 100.0)),
        ("MULTIBASE", (100.0, 5, 100.0)),
        ("MULTIBAIT", (50.0, 5, 100.0)),
    ])
    def test_parameters(self, kind, expected):
        spec = attacks.preset(kind)
        assert (spec.pcp, spec.pn, spec.pp) == expected
        assert spec.severity == 5

    def test_needs_five_kinds(self):
        with pytest.raises(ValueError, match="5 kinds"):
            attacks.preset("BASE", kinds_catalog=("gaussian_blur",))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown attack"):
            attacks.preset("SUPERBASE")


@given(pcp=st.floats(1, 100), pn=st.integers(1, 5), pp=st.floats(1, 100),
       sizes=st.lists(st.integers(1, 12), min_size=1, max_size=4),
       seed=st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_poisoning_laws(pcp, pn, pp, sizes, seed):
    task = make_task(sizes, task_id=seed % 7)
    spec = attacks.PoisonSpec(pcp=pcp, pn=pn, pp=pp, severity=3, seed=seed)
    out = attacks.poison_task(task, spec)
    # cardinality law
    assert len(out.train) == len(task.train)
    # exact poison count per poisoned class, clean classes untouched
    chosen = attacks.choose_poisoned_classes(task.classes, pcp, seed)
    for cls, n in enumerate(sizes):
        flagged = sum(1 for s in out.train if s.label == cls and s.poisoned)
        expected = round_half_up(pp / 100.0 * n) if cls in chosen else 0
        assert flagged == expected
    # unflagged samples bitwise identical (same objects)
    for before, after in zip(task.train, out.train):
        if not after.poisoned:
            assert after is before
        else:
            assert after.label == before.label
