"""Single-task poisoning attacks parameterized by (pcp, pn, pp, severity).

pcp picks how many of the task's classes are poisoned, pn how many distinct
corruptions are spread over them, pp what share of each poisoned class's
samples gets corrupted. The four presets:

    BASE      pcp=100, pn=1  -- one corruption over every class
    BAIT      pcp=50,  pn=1  -- half the classes, a spurious-correlation bait
    MULTIBASE pcp=100, pn=5
    MULTIBAIT pcp=50,  pn=5

Only a task's train and val splits are ever touched; held-out test data stays
clean. Fractional counts round half-up, with at least one poisoned class.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import corruptions
from .data import Sample, TaskDataset, round_half_up
from .rng import stream, subseed

ATTACK_KINDS = ("BASE", "BAIT", "MULTIBASE", "MULTIBAIT")


@dataclass(frozen=True)
class PoisonSpec:
    pcp: float
    pn: int
    pp: float
    severity: int = 5
    kinds: tuple = corruptions.DEFAULT_CATALOG
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.pcp <= 100:
            raise ValueError(f"pcp must be in (0, 100], got {self.pcp}")
        if not 0 < self.pp <= 100:
            raise ValueError(f"pp must be in (0, 100], got {self.pp}")
        if self.pn < 1:
            raise ValueError(f"pn must be >= 1, got {self.pn}")
        if self.pn > len(self.kinds):
            raise ValueError(f"pn={self.pn} exceeds the {len(self.kinds)} listed corruption kinds")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in [1, 5], got {self.severity}")


def choose_poisoned_classes(classes, pcp: float, seed: int) -> tuple:
    """Seeded draw of max(1, round(pcp% of |classes|)) classes, without replacement."""
    classes = tuple(classes)
    if not classes:
        raise ValueError("empty class set")
    if not 0 < pcp <= 100:
        raise ValueError(f"pcp must be in (0, 100], got {pcp}")
    count = max(1, round_half_up(pcp / 100.0 * len(classes)))
    picked = stream(seed, "poison-classes").choice(len(classes), size=count, replace=False)
    return tuple(sorted(classes[i] for i in picked))


def assign_corruptions(poisoned_classes, spec: PoisonSpec) -> dict:
    """Round-robin the first pn kinds over the classes in index order."""
    mapping = {}
    for i, cls in enumerate(sorted(poisoned_classes)):
        name = spec.kinds[i % spec.pn]
        mapping[cls] = corruptions.CorruptionKind(name=name, severity=spec.severity)
    return mapping


def _poison_split(samples, split_name, task_id, mapping, spec):
    out = list(samples)
    for cls, kind in mapping.items():
        positions = [i for i, s in enumerate(out) if s.label == cls]
        n_poison = round_half_up(spec.pp / 100.0 * len(positions))
        if n_poison == 0:
            continue
        rng = stream(spec.seed, "poison-samples", task_id, split_name, cls)
        chosen = rng.choice(len(positions), size=n_poison, replace=False)
        for j in sorted(int(c) for c in chosen):
            pos = positions[j]
            sample = out[pos]
            img = corruptions.apply(kind, sample.image,
                                    rng_seed=subseed(spec.seed, "noise", task_id, split_name, cls, j))
            out[pos] = Sample(image=img, label=sample.label, poisoned=True)
    return out


def poison_task(task: TaskDataset, spec: PoisonSpec) -> TaskDataset:
    """Corrupt a seeded subset of each poisoned class, in train and val alike.

    Untouched samples are the very same objects as the input's, so clean data
    stays bitwise identical and |output| == |input| per split.
    """
    if not task.train:
        raise ValueError(f"task {task.task_id} has no training samples")
    poisoned_classes = choose_poisoned_classes(task.classes, spec.pcp, spec.seed)
    mapping = assign_corruptions(poisoned_classes, spec)
    return TaskDataset(
        task_id=task.task_id,
        classes=task.classes,
        train=_poison_split(task.train, "train", task.task_id, mapping, spec),
        val=_poison_split(task.val, "val", task.task_id, mapping, spec),
        test=task.test,
    )


def preset(kind: str, kinds_catalog=corruptions.DEFAULT_CATALOG, severity: int = 5,
           seed: int = 0) -> PoisonSpec:
    if len(kinds_catalog) < 5:
        raise ValueError(f"corruption catalog needs >= 5 kinds, got {len(kinds_catalog)}")
    table = {
        "BASE": (100.0, 1, 100.0),
        "BAIT": (50.0, 1, 100.0),
        "MULTIBASE": (100.0, 5, 100.0),
        "MULTIBAIT": (50.0, 5, 100.0),
    }
    if kind not in table:
        raise ValueError(f"unknown attack kind {kind!r}, expected one of {ATTACK_KINDS}")
    pcp, pn, pp = table[kind]
    return PoisonSpec(pcp=pcp, pn=pn, pp=pp, severity=severity, kinds=tuple(kinds_catalog),
                      seed=seed)
