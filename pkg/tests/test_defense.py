import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab import checkpoint as ckpt
from poisonlab import defense, nn
from poisonlab.data import Sample
from poisonlab.errors import DimensionError, StateError
from poisonlab.methods import run_stream
from poisonlab.rng import stream

from conftest import tiny_method
from oracles import pr_curve_bruteforce


def profile(*layers):
    return defense.ActivationProfile(layers=[np.asarray(l, dtype=np.float64) for l in layers])


class TestProfileMath:
    def test_identical_profiles_zero_distance(self):
        p = profile([1.0, 2.0], [3.0])
        assert defense.layer_distances(p, p) == [0.0, 0.0]

    def test_three_four_five(self):
        a = profile([0.0, 0.0])
        b = profile([3.0, 4.0])
        assert defense.layer_distances(a, b) == [5.0]

    def test_symmetry(self):
        a = profile([1.0, 2.0], [0.5])
        b = profile([-1.0, 0.3], [2.5])
        assert defense.layer_distances(a, b) == defense.layer_distances(b, a)

    def test_misaligned_profiles(self):
        with pytest.raises(DimensionError):
            defense.layer_distances(profile([1.0]), profile([1.0], [2.0]))
        with pytest.raises(DimensionError):
            defense.layer_distances(profile([1.0]), profile([1.0, 2.0]))

    def test_cumulative(self):
        assert defense.cumulative_profile([1.0, 2.0, 3.0]) == [1.0, 3.0, 6.0]
        assert defense.cumulative_profile([0.0, 0.0]) == [0.0, 0.0]
        v = [0.5, 1.5, 2.0]
        assert defense.cumulative_profile(v)[-1] == pytest.approx(sum(v))

    def test_angles(self):
        assert defense.profile_angle([2.0, 2.0, 2.0]) == 0.0
        assert defense.profile_angle([0.0, 1.0, 2.0]) == pytest.approx(45.0)
        assert defense.profile_angle([0.0, 3.0]) == pytest.approx(math.degrees(math.atan(3.0)))
        with pytest.raises(ValueError):
            defense.profile_angle([1.0])

    @given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=6),
           st.floats(1.5, 10.0))
    @settings(max_examples=60, deadline=None)
    def test_angle_bounds_and_scaling(self, v, k):
        c = defense.cumulative_profile(v)
        angle = defense.profile_angle(c)
        assert 0.0 <= angle < 90.0
        scaled = defense.profile_angle(defense.cumulative_profile([k * x for x in v]))
        if c[-1] > c[0]:
            assert scaled > angle
        else:
            assert scaled == angle == 0.0


class TestAggregate:
    def test_examples(self):
        angles = [10.0, 20.0, 30.0, 40.0]
        assert defense.aggregate_stat(angles, "MAX") == 40.0
        assert defense.aggregate_stat(angles, "P90") == pytest.approx(37.0)
        assert defense.aggregate_stat(angles, "MAX+IQR") == pytest.approx(55.0)
        assert defense.aggregate_stat(angles, "MAX-IQR") == pytest.approx(25.0)
        assert defense.aggregate_stat(angles, "P75") == pytest.approx(32.5)

    def test_needs_two_angles(self):
        with pytest.raises(ValueError, match="at least 2"):
            defense.aggregate_stat([10.0], "MAX")

    def test_unknown_statistic(self):
        with pytest.raises(ValueError, match="unknown statistic"):
            defense.aggregate_stat([1.0, 2.0], "MEDIAN")

    @given(st.lists(st.floats(0.0, 89.0), min_size=2, max_size=12),
           st.integers(0, 100))
    @settings(max_examples=100, deadline=None)
    def test_statistic_ordering(self, angles, _):
        stats = {s: defense.aggregate_stat(angles, s) for s in defense.STATISTICS}
        assert stats["MAX-IQR"] <= stats["MAX"] <= stats["MAX+IQR"]
        assert stats["P75"] <= stats["P90"] <= stats["MAX"]


class TestDetect:
    def _detector(self, alpha):
        return defense.DetectorState(alpha_deg=alpha, statistic="MAX",
                                     calibration_task_id=0, calibration_seeds=(1, 2))

    def test_fires_above(self):
        assert defense.detect(37.1, self._detector(32.5)) is True

    def test_boundary_is_clean(self):
        assert defense.detect(32.5, self._detector(32.5)) is False

    def test_zero_always_clean(self):
        assert defense.detect(0.0, self._detector(0.0)) is False

    def test_uncalibrated(self):
        with pytest.raises(StateError):
            defense.detect(1.0, None)
        with pytest.raises(StateError):
            defense.detect(1.0, self._detector(float("nan")))


class TestMeanActivations:
    def test_zero_network(self):
        model = nn.init_model(0, 4, hidden=(3,))
        for layer in model.trunk:
            layer.weights = np.zeros_like(layer.weights)
        samples = [Sample(image=np.full((2, 2, 1), 0.7, dtype=np.float32), label=0)]
        prof = defense.mean_activations(model, samples)
        assert np.all(prof.layers[0] == 0.0)

    def test_single_sample(self):
        model = nn.init_model(3, 4, hidden=(3, 2))
        s = Sample(image=stream(1, "img").uniform(0, 1, (2, 2, 1)).astype(np.float32), label=0)
        prof = defense.mean_activations(model, [s])
        acts, _ = nn.forward_features(model, s.image.reshape(1, -1))
        for got, want in zip(prof.layers, acts):
            assert np.allclose(got, want[0])

    def test_mean_linearity_over_halves(self):
        model = nn.init_model(3, 4, hidden=(3,))
        rng = stream(2, "imgs")
        samples = [Sample(image=rng.uniform(0, 1, (2, 2, 1)).astype(np.float32), label=0)
                   for _ in range(6)]
        full = defense.mean_activations(model, samples).layers[0]
        a = defense.mean_activations(model, samples[:2]).layers[0]
        b = defense.mean_activations(model, samples[2:]).layers[0]
        assert np.allclose(full, (2 * a + 4 * b) / 6, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            defense.mean_activations(nn.init_model(0, 4), [])


class TestPrCurve:
    def test_perfect_separation_has_perfect_point(self):
        points = defense.pr_curve([(0.9, True), (0.1, False)])
        assert (0.1, 1.0, 1.0) in points

    def test_matches_bruteforce_enumeration(self):
        rng = stream(7, "pr")
        records = [(float(rng.uniform(0, 90)), bool(rng.integers(0, 2))) for _ in range(6)]
        if not any(p for _, p in records):
            records[0] = (records[0][0], True)
        if all(p for _, p in records):
            records[1] = (records[1][0], False)
        assert defense.pr_curve(records) == pr_curve_bruteforce(records)

    def test_inverted_labels_score_worse(self):
        records = [(0.9, True), (0.1, False)]
        flipped = [(b, not label) for b, label in records]
        def best_f1(points):
            out = 0.0
            for _, precision, recall in points:
                if precision + recall:
                    out = max(out, 2 * precision * recall / (precision + recall))
            return out
        assert best_f1(defense.pr_curve(flipped)) <= best_f1(defense.pr_curve(records))

    def test_single_label_rejected(self):
        with pytest.raises(ValueError):
            defense.pr_curve([(0.5, True), (0.7, True)])

    @given(st.lists(st.tuples(st.floats(0, 90), st.booleans()), min_size=2, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_recall_nonincreasing_in_threshold(self, records):
        labels = {label for _, label in records}
        if labels != {True, False}:
            records = records + [(5.0, True), (1.0, False)]
        points = defense.pr_curve(records)
        recalls = [r for _, _, r in points]
        assert all(b <= a for a, b in zip(recalls, recalls[1:]))


class TestGuardedRun:
    def _detector(self, alpha):
        return defense.DetectorState(alpha_deg=alpha, statistic="MAX",
                                     calibration_task_id=0, calibration_seeds=(1, 2))

    def test_never_firing_detector_matches_plain_run(self, tiny_tasks):
        cfg = tiny_method("FINETUNE")
        plain = run_stream(tiny_tasks, cfg, run_seed=3)
        guarded = defense.guarded_run(tiny_tasks, cfg, 3, self._detector(1e9))
        assert guarded.acc_matrix == plain.acc_matrix
        assert all(not e["detected"] for e in guarded.events)

    def test_rollback_restores_pre_task_state(self, tiny_tasks):
        cfg = tiny_method("FINETUNE")
        plain = run_stream(tiny_tasks[:2], cfg, run_seed=3)
        result = run_stream(tiny_tasks[:2], cfg, run_seed=3,
                            inspector=lambda i, pre, out, task, blob: {"rollback": i == 1,
                                                                       "detected": i == 1,
                                                                       "task_id": i})
        restored = ckpt.restore(plain.checkpoints[1])
        assert len(result.model.heads) == 1
        for got, want in zip(nn.all_params(result.model), nn.all_params(restored.model)):
            assert got.tobytes() == want.tobytes()

    def test_all_fire_detector_keeps_initial_model(self, tiny_tasks):
        cfg = tiny_method("FINETUNE")
        guarded = defense.guarded_run(tiny_tasks, cfg, 3, self._detector(-1.0))
        restored = ckpt.restore(guarded.checkpoints[0])
        assert len(guarded.model.heads) == 0
        for got, want in zip(nn.all_params(guarded.model), nn.all_params(restored.model)):
            assert got.tobytes() == want.tobytes()
        assert all(e["detected"] for e in guarded.events)

    def test_audit_log_lines(self, tiny_tasks, tmp_path):
        cfg = tiny_method("FINETUNE")
        path = tmp_path / "audit.log"
        defense.guarded_run(tiny_tasks[:2], cfg, 3, self._detector(1e9), audit_path=str(path))
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("task_id=0 beta_deg=")
        assert "detected=false" in lines[0]
        assert "checkpoint_hash=" in lines[0]


class TestCalibration:
    def test_needs_two_seeds(self, tiny_tasks):
        with pytest.raises(ValueError, match="at least 2"):
            defense.calibrate_alpha(tiny_tasks, 1, tiny_method(), 0, seeds=(7,))

    def test_deterministic(self, tiny_tasks):
        cfg = tiny_method("FINETUNE")
        a = defense.calibrate_alpha(tiny_tasks, 1, cfg, 0, seeds=(7, 8, 9), statistic="MAX")
        b = defense.calibrate_alpha(tiny_tasks, 1, cfg, 0, seeds=(7, 8, 9), statistic="MAX")
        assert a.alpha_deg == b.alpha_deg
        assert a.angles == b.angles

    def test_statistic_composition(self, tiny_tasks):
        cfg = tiny_method("FINETUNE")
        det = defense.calibrate_alpha(tiny_tasks, 1, cfg, 0, seeds=(7, 8, 9), statistic="MAX")
        assert det.alpha_deg == max(det.angles)
        assert det.calibration_task_id == 1
