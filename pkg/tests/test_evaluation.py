import csv
import math

import numpy as np
import pytest
import torch

from gapadapt.engine import AdaptationConfig
from gapadapt.evaluation import (
    compare_uncertainty_metrics,
    evaluate,
    evaluate_predictions,
    mmd_trajectory,
)


def one_hot(labels, C):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), C).double()


class TestEvaluatePredictions:
    def test_oracle_is_perfect(self):
        y = torch.tensor([0, 1, 2, 2, 1])
        r = evaluate_predictions(one_hot(y, 3), y)
        assert r.accuracy == 1.0 and r.mean_class_accuracy == 1.0
        assert r.pl_acc == 1.0 and r.hc_acc == 1.0

    def test_constant_predictor(self):
        C = 4
        y = torch.arange(C).repeat(25)
        probs = torch.zeros(len(y), C, dtype=torch.float64)
        probs[:, 2] = 1.0
        r = evaluate_predictions(probs, y)
        assert r.accuracy == pytest.approx(1 / C)
        assert r.per_class_accuracy == [0.0, 0.0, 1.0, 0.0]

    def test_hand_count(self):
        y = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
        pred = [0, 1, 0, 1, 1, 0, 1, 2, 0, 2]
        r = evaluate_predictions(one_hot(pred, 3), y)
        assert r.accuracy == pytest.approx(7 / 10)
        assert r.per_class_accuracy == pytest.approx([2 / 3, 3 / 4, 2 / 3])
        assert r.mean_class_accuracy == pytest.approx((2 / 3 + 3 / 4 + 2 / 3) / 3)

    def test_pseudo_labels_scored_separately(self):
        y = torch.tensor([0, 1, 1, 0])
        r = evaluate_predictions(one_hot(y, 2), y, pseudo_labels=[0, 0, 1, 1])
        assert r.accuracy == 1.0 and r.pl_acc == 0.5

    def test_high_confidence_subset(self):
        y = torch.tensor([0, 0, 1, 1])
        probs = torch.tensor([[0.99, 0.01], [0.4, 0.6], [0.45, 0.55], [0.02, 0.98]], dtype=torch.float64)
        r = evaluate_predictions(probs, y, hc_quantile=0.5)
        assert r.hc_acc == 1.0 and r.accuracy == 0.75

    def test_absent_class_is_nan(self):
        r = evaluate_predictions(one_hot([0, 0], 3), [0, 0])
        assert math.isnan(r.per_class_accuracy[2]) and r.mean_class_accuracy == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate_predictions(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))

    def test_json_round_trip(self, tmp_path):
        import json

        r = evaluate_predictions(one_hot([1, 0], 2), [1, 0])
        r.to_json(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["accuracy"] == 1.0

    def test_model_wrapper_matches(self, small_problem):
        _, _, target, model = small_problem
        from gapadapt.models import predict_logits

        direct = evaluate_predictions(predict_logits(model, target.features).softmax(1), target.labels)
        assert evaluate(model, target.features, target.labels) == direct


class TestMmdTrajectory:
    def test_length_is_epoch_count(self, rng):
        ref = rng.standard_normal((100, 4))
        traj = mmd_trajectory([rng.standard_normal((100, 4)) for _ in range(5)], ref)
        assert traj.epochs == [1, 2, 3, 4, 5] and len(traj.target_mid) == 5

    def test_identical_snapshot_near_zero(self, rng):
        ref = rng.standard_normal((200, 3))
        far = ref + 3.0
        traj = mmd_trajectory([ref, far], ref)
        assert abs(traj.target_mid[0]) < 1e-2
        assert traj.target_mid[1] > 10 * abs(traj.target_mid[0])

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            mmd_trajectory([rng.standard_normal((10, 3))], rng.standard_normal((10, 4)))

    def test_subsampling_deterministic(self, rng):
        ref = rng.standard_normal((700, 3))
        snaps = [ref + 0.5]
        a = mmd_trajectory(snaps, ref, max_points=300, seed=2)
        b = mmd_trajectory(snaps, ref, max_points=300, seed=2)
        assert a.target_mid == b.target_mid

    def test_csv_and_plot(self, rng, tmp_path):
        ref = rng.standard_normal((50, 3))
        traj = mmd_trajectory([ref + 1, ref], ref, teacher_snapshots=[ref, ref])
        traj.to_csv(tmp_path / "t.csv")
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert len(rows) == 2 and rows[0]["mmd_teacher_trim"] != ""
        assert traj.plot(tmp_path / "t.png").stat().st_size > 0


class TestCompareMetrics:
    def test_identical_arms_identical_curves(self, tmp_path):
        def fake_run(cfg):
            return {"target_accuracy": [0.5, 0.6, 0.7]}

        out = compare_uncertainty_metrics(AdaptationConfig(epochs=3), fake_run, out_dir=tmp_path)
        assert out["referenced"] == out["entropy"] and out["final_delta"] == 0.0
        rows = list(csv.DictReader(open(tmp_path / "uncertainty_comparison.csv")))
        assert len(rows) == 2 * 3
        assert (tmp_path / "uncertainty_comparison.png").exists()

    def test_only_metric_differs(self):
        seen = []

        def fake_run(cfg):
            seen.append(cfg)
            return {"target_accuracy": [0.9 if cfg.uncertainty_metric == "referenced" else 0.8]}

        base = AdaptationConfig(epochs=1, beta=0.3)
        out = compare_uncertainty_metrics(base, fake_run)
        assert out["final_delta"] == pytest.approx(10.0)
        assert [c.uncertainty_metric for c in seen] == ["referenced", "entropy"]
        assert all(c.beta == 0.3 for c in seen) and base.uncertainty_metric == AdaptationConfig().uncertainty_metric
