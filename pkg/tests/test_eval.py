import json
import math

import numpy as np
import pytest

from dismesh.evalmetrics import (
    EvalReport,
    ProbeScores,
    evaluate,
    probe_subspaces,
    r_squared,
    ridge_regression,
)
from dismesh.model import LatentCode, ModelConfig, normalized_pose_vector
from dismesh.synth import FactorLabels, draw_pose, draw_shape, sample_dataset
from dismesh.trainer import TrainConfig, train

RIDGE_LAMBDA = 1e-3


def test_ridge_hand_value():
    # {(0,0),(1,1),(2,2)} without intercept: slope = 5 / (5 + lambda)
    x = np.array([[0.0], [1.0], [2.0]])
    y = np.array([0.0, 1.0, 2.0])
    w = ridge_regression(x, y, RIDGE_LAMBDA)
    expected_slope = 5.0 / (5.0 + RIDGE_LAMBDA)
    assert w[0, 0] == pytest.approx(expected_slope, rel=1e-12)
    # R^2 from the residuals of that slope
    pred = x @ w
    expected_r2 = 1.0 - float(np.sum((y[:, None] - pred) ** 2)) / float(np.sum((y - y.mean()) ** 2))
    assert r_squared(y[:, None], pred) == pytest.approx(expected_r2, rel=1e-12)


def test_r_squared_definitional_checks():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(20, 3))
    assert r_squared(y, y) == pytest.approx(1.0)
    mean_pred = np.tile(y.mean(axis=0), (20, 1))
    assert r_squared(y, mean_pred) == pytest.approx(0.0, abs=1e-12)
    assert r_squared(y, y + 10.0) < 1.0
    constant = np.ones((5, 2))
    assert r_squared(constant, constant) is None


def _labels_for(n_subjects, poses_per_subject, seed=0):
    labels = []
    for s in range(n_subjects):
        shape = draw_shape(seed, s)
        for p in range(poses_per_subject):
            labels.append(
                FactorLabels(subject_id=s, shape=shape, pose=draw_pose(seed, s, p), time_index=p)
            )
    return labels


def test_probe_perfect_pose_predictor():
    # enough samples that the lambda = 1e-3 ridge shrinkage is below 1e-9
    labels = _labels_for(4, 256)
    codes = []
    rng = np.random.default_rng(1)
    for lab in labels:
        z_pose = normalized_pose_vector(lab.pose)
        codes.append(LatentCode(z_shape=rng.normal(size=4), z_pose=z_pose))
    scores = probe_subspaces(codes, labels)
    assert scores.pose_r2_from_pose == pytest.approx(1.0, abs=1e-9)


def test_probe_noise_shape_subspace_at_chance():
    n_subjects = 4
    labels = _labels_for(n_subjects, 40)
    rng = np.random.default_rng(2)
    codes = [
        LatentCode(z_shape=rng.normal(size=6), z_pose=rng.normal(size=3)) for _ in labels
    ]
    scores = probe_subspaces(codes, labels)
    # pure-noise features: accuracy within binomial 3 sigma of chance
    n_score = len(labels) // 2
    chance = 1.0 / n_subjects
    sigma = math.sqrt(chance * (1 - chance) / n_score)
    assert abs(scores.subject_acc_from_shape - chance) < 3 * sigma
    # and noise cannot linearly predict pose
    assert scores.pose_r2_from_shape < 0.2


def test_probe_subject_identity_from_clustered_codes():
    labels = _labels_for(3, 10)
    rng = np.random.default_rng(3)
    codes = []
    for lab in labels:
        center = np.eye(3)[lab.subject_id] * 5.0
        codes.append(
            LatentCode(z_shape=center + 0.01 * rng.normal(size=3), z_pose=rng.normal(size=2))
        )
    scores = probe_subspaces(codes, labels)
    assert scores.subject_acc_from_shape == 1.0
    assert scores.subject_acc_from_pose < 0.7


def test_probe_preconditions():
    labels = _labels_for(1, 12)
    codes = [LatentCode(np.zeros(2), np.zeros(2)) for _ in labels]
    with pytest.raises(ValueError, match="2 subjects"):
        probe_subspaces(codes, labels)
    with pytest.raises(ValueError, match="10 samples"):
        probe_subspaces(codes[:4], _labels_for(2, 2))


def test_eval_report_requires_reasons_for_nulls():
    metrics = {k: 1.0 for k in (
        "recon_rmse", "pose_probe_r2_from_pose", "pose_probe_r2_from_shape",
        "subject_probe_acc_from_shape", "subject_probe_acc_from_pose",
        "transfer_rmse_vs_oracle", "sync_frame_accuracy", "match_precision_at_1",
        "sample_diversity", "sample_specificity")}
    EvalReport(metrics=metrics, null_reasons={})  # all populated: fine
    metrics["sample_diversity"] = None
    with pytest.raises(ValueError, match="reason"):
        EvalReport(metrics=metrics, null_reasons={})


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("eval_data")
    manifest = sample_dataset(8, 6, seed=3, out_dir=data_dir)
    config = ModelConfig(
        ratios=(0.5,),
        channels=(3, 6),
        cheb_order=(3,),
        hidden=16,
        d_shape=4,
        d_pose=4,
        beta_warmup_epochs=2,
    )
    run_dir = tmp_path_factory.mktemp("eval_run")
    result = train(manifest, config, run_dir, seed=13, trainer=TrainConfig(epochs=3, batch_size=8))
    return result.best.model, manifest


def test_evaluate_deterministic(eval_setup):
    model, manifest = eval_setup
    report_a = evaluate(model, manifest, seed=7, n_prior_samples=4, n_transfer_pairs=6, n_sync_pairs=1, sync_frames=6)
    report_b = evaluate(model, manifest, seed=7, n_prior_samples=4, n_transfer_pairs=6, n_sync_pairs=1, sync_frames=6)
    assert report_a.to_json() == report_b.to_json()


def test_evaluate_report_full_and_sorted(eval_setup, tmp_path):
    model, manifest = eval_setup
    report = evaluate(model, manifest, seed=7, n_prior_samples=4, n_transfer_pairs=6, n_sync_pairs=1, sync_frames=6)
    data = json.loads(report.to_json())
    assert data["version"] == 1
    keys = list(data["metrics"].keys())
    assert keys == sorted(keys)
    for key, value in data["metrics"].items():
        if value is None:
            assert key in data["null_reasons"]
    path = report.save(tmp_path / "eval_report.json")
    assert path.read_text().startswith("{")


def test_evaluate_requires_test_split(eval_setup, tmp_path):
    model, manifest = eval_setup
    from dataclasses import replace

    broken = replace(manifest, split={"train": manifest.split["train"] + manifest.split["val"] + manifest.split["test"], "val": [], "test": []})
    with pytest.raises(ValueError, match="test split"):
        evaluate(model, broken, seed=0)
