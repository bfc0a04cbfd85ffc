"""Checkpoint / detect / rollback defense built on task-vector angles.

For each task the detector compares mean trunk activations before and after
training (on that task's own train split), turns the per-layer distances into
a cumulative curve and measures its slope as an angle. A threshold angle is
calibrated by re-training one early, assumed-clean task under several seeds
and aggregating the resulting angles with a chosen statistic; any later task
whose angle exceeds the threshold is rolled back.

Heads are excluded from the profiles: a freshly initialised head would
guarantee a large distance every task and drown the signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import nn
from .errors import DimensionError, StateError
from .methods import MethodConfig, StreamResult, run_stream, train_task

STATISTICS = ("MAX+IQR", "MAX", "P90", "MAX-IQR", "P75")

_EVAL_CHUNK = 512


@dataclass
class ActivationProfile:
    layers: list  # per-trunk-layer mean activation vectors, float64


@dataclass
class TaskVectorProfile:
    v: list
    c: list
    angle_deg: float


@dataclass
class DetectorState:
    alpha_deg: float
    statistic: str
    calibration_task_id: int
    calibration_seeds: tuple
    angles: tuple = ()


def mean_activations(model: nn.ModelState, samples) -> ActivationProfile:
    """Mean post-rectifier activation per trunk layer over the samples."""
    if not samples:
        raise ValueError("mean_activations: empty data")
    sums = [np.zeros(layer.fan_out, dtype=np.float64) for layer in model.trunk]
    for start in range(0, len(samples), _EVAL_CHUNK):
        chunk = samples[start:start + _EVAL_CHUNK]
        x = np.stack([s.image.reshape(-1) for s in chunk]).astype(np.float32)
        activations, _ = nn.forward_features(model, x)
        for acc, act in zip(sums, activations):
            acc += act.sum(axis=0, dtype=np.float64)
    n = len(samples)
    return ActivationProfile(layers=[acc / n for acc in sums])


def layer_distances(before: ActivationProfile, after: ActivationProfile) -> list:
    if len(before.layers) != len(after.layers):
        raise DimensionError(
            f"profiles have {len(before.layers)} vs {len(after.layers)} layers")
    out = []
    for idx, (a, b) in enumerate(zip(before.layers, after.layers)):
        if a.shape != b.shape:
            raise DimensionError(f"profile layer {idx}: widths {a.shape} vs {b.shape}")
        out.append(float(np.linalg.norm(b - a)))
    return out


def cumulative_profile(v) -> list:
    if not len(v):
        raise ValueError("empty distance vector")
    return np.cumsum(np.asarray(v, dtype=np.float64)).tolist()


def profile_angle(c) -> float:
    """Slope angle of the cumulative curve, layers spaced one unit apart."""
    if len(c) < 2:
        raise ValueError("angle needs at least 2 cumulative points")
    rise = (c[-1] - c[0]) / (len(c) - 1)
    return math.degrees(math.atan(rise))


def task_vector_profile(before: ActivationProfile, after: ActivationProfile) -> TaskVectorProfile:
    v = layer_distances(before, after)
    c = cumulative_profile(v)
    return TaskVectorProfile(v=v, c=c, angle_deg=profile_angle(c))


def percentile_linear(values, p: float) -> float:
    """Order-statistic interpolation at rank h = (n-1)p + 1."""
    vals = sorted(float(v) for v in values)
    h = (len(vals) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (h - lo) * (vals[hi] - vals[lo])


def aggregate_stat(angles, statistic: str) -> float:
    if len(angles) < 2:
        raise ValueError(f"need at least 2 angles, got {len(angles)}")
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}, expected one of {STATISTICS}")
    vals = sorted(float(a) for a in angles)
    iqr = percentile_linear(vals, 0.75) - percentile_linear(vals, 0.25)
    if statistic == "MAX":
        return vals[-1]
    if statistic == "MAX+IQR":
        return vals[-1] + iqr
    if statistic == "MAX-IQR":
        return vals[-1] - iqr
    if statistic == "P90":
        return percentile_linear(vals, 0.90)
    return percentile_linear(vals, 0.75)


def detect(beta: float, detector: DetectorState) -> bool:
    """Poisoned iff beta strictly exceeds the calibrated threshold."""
    if detector is None or not math.isfinite(detector.alpha_deg):
        raise StateError("detector is not calibrated")
    return beta > detector.alpha_deg


def calibration_angles(tasks, clean_task_index: int, cfg: MethodConfig, run_seed: int,
                       seeds) -> list:
    """Angle of the assumed-clean task re-trained once per calibration seed.

    The model state entering the clean task is reproduced from the stream
    prefix under run_seed; each calibration seed then varies the new head's
    init and the shuffle order.
    """
    prefix = run_stream(tasks[:clean_task_index + 1], cfg, run_seed)
    pre_state = ckpt.restore(prefix.checkpoints[clean_task_index])
    class_locator = {}
    for head, classes in enumerate(prefix.head_classes[:clean_task_index]):
        for local, cls in enumerate(classes):
            class_locator[cls] = (head, local)
    clean_task = tasks[clean_task_index]
    before = mean_activations(pre_state.model, clean_task.train)
    angles = []
    for seed in seeds:
        outcome = train_task(pre_state.model, clean_task, cfg, train_seed=seed,
                             teacher=pre_state.model, ewc=pre_state.ewc,
                             buffer=pre_state.buffer, class_locator=class_locator)
        after = mean_activations(outcome.model, clean_task.train)
        angles.append(task_vector_profile(before, after).angle_deg)
    return sorted(angles)


def calibrate_alpha(tasks, clean_task_index: int, cfg: MethodConfig, run_seed: int,
                    seeds, statistic: str = "P90") -> DetectorState:
    if len(seeds) < 2:
        raise ValueError(f"calibration needs at least 2 seeds, got {len(seeds)}")
    angles = calibration_angles(tasks, clean_task_index, cfg, run_seed, seeds)
    return DetectorState(alpha_deg=aggregate_stat(angles, statistic), statistic=statistic,
                         calibration_task_id=clean_task_index, calibration_seeds=tuple(seeds),
                         angles=tuple(angles))


def guarded_run(tasks, cfg: MethodConfig, run_seed: int, detector: DetectorState,
                attack_plan=None, audit_path: str | None = None) -> StreamResult:
    """run_stream with the detect-and-rollback hook after every task."""
    if detector is None:
        raise StateError("guarded_run needs a calibrated detector")

    def inspector(i, pre_model, outcome, applied, blob):
        before = mean_activations(pre_model, applied.train)
        after = mean_activations(outcome.model, applied.train)
        beta = task_vector_profile(before, after).angle_deg
        detected = detect(beta, detector)
        return {
            "task_id": i,
            "beta_deg": beta,
            "alpha_deg": detector.alpha_deg,
            "detected": detected,
            "checkpoint_hash": ckpt.recorded_hash(blob),
            "rollback": detected,
            "truth_poisoned": any(s.poisoned for s in applied.train),
        }

    result = run_stream(tasks, cfg, run_seed, attack_plan=attack_plan, inspector=inspector)
    if audit_path:
        with open(audit_path, "a", encoding="utf-8") as fh:
            for event in result.events:
                fh.write(format_audit_line(event) + "\n")
    return result


def format_audit_line(event) -> str:
    return (f"task_id={event['task_id']} beta_deg={event['beta_deg']:.6f} "
            f"alpha_deg={event['alpha_deg']:.6f} "
            f"detected={'true' if event['detected'] else 'false'} "
            f"checkpoint_hash={event['checkpoint_hash']}")


def pr_curve(betas):
    """Precision-recall sweep over all distinct angle thresholds.

    betas: iterable of (angle, is_poisoned). A task is flagged when its angle
    strictly exceeds the threshold; with no flagged tasks precision is 1 by
    convention. Returns (threshold, precision, recall) sorted by threshold.
    """
    records = [(float(b), bool(label)) for b, label in betas]
    positives = sum(1 for _, label in records if label)
    negatives = len(records) - positives
    if positives == 0 or negatives == 0:
        raise ValueError("pr_curve needs at least one clean and one poisoned record")
    points = []
    for threshold in sorted({b for b, _ in records}):
        tp = sum(1 for b, label in records if b > threshold and label)
        fp = sum(1 for b, label in records if b > threshold and not label)
        precision = tp / (tp + fp) if (tp + fp) else 1.0
        points.append((threshold, precision, tp / positives))
    return points


def detection_metrics(betas, alpha: float) -> dict:
    """ACC / CLEAN / ATTACK / F1 of thresholding the recorded angles at alpha."""
    records = [(float(b), bool(label)) for b, label in betas]
    tp = sum(1 for b, label in records if label and b > alpha)
    fn = sum(1 for b, label in records if label and b <= alpha)
    fp = sum(1 for b, label in records if not label and b > alpha)
    tn = sum(1 for b, label in records if not label and b <= alpha)
    total = tp + fn + fp + tn
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return {
        "acc": (tp + tn) / total if total else 0.0,
        "clean_acc": tn / (tn + fp) if (tn + fp) else 0.0,
        "attack_acc": recall,
        "f1": f1,
    }
