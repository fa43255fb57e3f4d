"""Disentanglement probes and the aggregate evaluation report.

Probes are deliberately linear: if a subspace really captures a factor, a
ridge regression (for continuous pose parameters) or a nearest-centroid
classifier (for subject identity) fit on half the samples should read it
out on the other half. Codes are evaluated on held-out subjects, and the
probe split is made within that set, per subject, so both probe halves see
every subject.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import LatentCode, MeshVAE, normalized_pose_vector
from .rng import counter_rng
from .synth import DatasetManifest, FactorLabels, generate_mesh, make_sequence
from .tasks import sample_prior, synchronize
from .trainer import LoadedDataset, per_vertex_rmse

REPORT_VERSION = 1
RIDGE_LAMBDA = 1e-3


def ridge_regression(x: np.ndarray, y: np.ndarray, lam: float = RIDGE_LAMBDA) -> np.ndarray:
    """Closed-form ridge weights solving (X^T X + lam I) W = X^T Y.

    No intercept and no centering; callers append a bias feature when they
    want one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"x must be 2-D, got {x.shape}")
    if y.ndim == 1:
        y = y[:, None]
    gram = x.T @ x + lam * np.eye(x.shape[1])
    return np.linalg.solve(gram, x.T @ y)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> Optional[float]:
    """Pooled coefficient of determination; None when targets are constant."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        return None
    return 1.0 - ss_res / ss_tot


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


@dataclass(frozen=True)
class ProbeScores:
    pose_r2_from_pose: Optional[float]
    pose_r2_from_shape: Optional[float]
    subject_acc_from_shape: Optional[float]
    subject_acc_from_pose: Optional[float]
    reasons: dict


def _probe_split(labels: Sequence[FactorLabels]) -> tuple[list[int], list[int]]:
    """Per-subject half split in sample order, so every subject appears on
    both sides whenever it has at least two samples."""
    by_subject: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        by_subject.setdefault(lab.subject_id, []).append(idx)
    fit: list[int] = []
    score: list[int] = []
    for subject in sorted(by_subject):
        rows = by_subject[subject]
        half = max(1, len(rows) // 2)
        fit.extend(rows[:half])
        score.extend(rows[half:])
    return fit, score


def _nearest_centroid_accuracy(
    fit_x: np.ndarray, fit_y: np.ndarray, score_x: np.ndarray, score_y: np.ndarray
) -> float:
    classes = np.unique(fit_y)
    centroids = np.stack([fit_x[fit_y == c].mean(axis=0) for c in classes])
    distances = np.linalg.norm(score_x[:, None, :] - centroids[None, :, :], axis=-1)
    predicted = classes[np.argmin(distances, axis=1)]
    return float(np.mean(predicted == score_y))


def probe_subspaces(codes: Sequence[LatentCode], labels: Sequence[FactorLabels]) -> ProbeScores:
    """Fit linear probes from each subspace to each factor and score them.

    Ridge regression (with a bias feature) predicts normalized pose
    parameters; a nearest-centroid classifier predicts subject identity.
    Probes are fit on the per-subject first half of the samples and scored
    on the second half.
    """
    if len(codes) != len(labels):
        raise ValueError(f"{len(codes)} codes vs {len(labels)} labels")
    if len(codes) < 10:
        raise ValueError(f"need at least 10 samples to probe, got {len(codes)}")
    subjects = {lab.subject_id for lab in labels}
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects to probe")

    z_shape = np.stack([c.z_shape for c in codes])
    z_pose = np.stack([c.z_pose for c in codes])
    pose_targets = np.stack([normalized_pose_vector(lab.pose) for lab in labels])
    subject_ids = np.asarray([lab.subject_id for lab in labels])

    fit_rows, score_rows = _probe_split(labels)
    reasons: dict[str, str] = {}
    if not score_rows:
        reason = "every subject has a single sample; no held-out probe rows"
        return ProbeScores(None, None, None, None, {k: reason for k in (
            "pose_r2_from_pose", "pose_r2_from_shape",
            "subject_acc_from_shape", "subject_acc_from_pose")})

    def pose_r2(features: np.ndarray, name: str) -> Optional[float]:
        if np.allclose(pose_targets[fit_rows].var(axis=0), 0.0):
            reasons[name] = "pose labels have no variance"
            return None
        weights = ridge_regression(_with_bias(features[fit_rows]), pose_targets[fit_rows])
        predictions = _with_bias(features[score_rows]) @ weights
        value = r_squared(pose_targets[score_rows], predictions)
        if value is None:
            reasons[name] = "held-out pose labels have no variance"
        return value

    def subject_acc(features: np.ndarray, name: str) -> Optional[float]:
        if len(np.unique(subject_ids[fit_rows])) < 2:
            reasons[name] = "fewer than 2 subjects in the probe fit rows"
            return None
        return _nearest_centroid_accuracy(
            features[fit_rows], subject_ids[fit_rows], features[score_rows], subject_ids[score_rows]
        )

    return ProbeScores(
        pose_r2_from_pose=pose_r2(z_pose, "pose_r2_from_pose"),
        pose_r2_from_shape=pose_r2(z_shape, "pose_r2_from_shape"),
        subject_acc_from_shape=subject_acc(z_shape, "subject_acc_from_shape"),
        subject_acc_from_pose=subject_acc(z_pose, "subject_acc_from_pose"),
        reasons=reasons,
    )


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

_FIELDS = (
    "recon_rmse",
    "pose_probe_r2_from_pose",
    "pose_probe_r2_from_shape",
    "subject_probe_acc_from_shape",
    "subject_probe_acc_from_pose",
    "transfer_rmse_vs_oracle",
    "sync_frame_accuracy",
    "match_precision_at_1",
    "sample_diversity",
    "sample_specificity",
)


@dataclass(frozen=True)
class EvalReport:
    metrics: dict
    null_reasons: dict

    def __post_init__(self):
        missing = set(_FIELDS) - set(self.metrics)
        if missing:
            raise ValueError(f"report missing fields: {sorted(missing)}")
        for key, value in self.metrics.items():
            if value is None and key not in self.null_reasons:
                raise ValueError(f"null field {key!r} lacks a reason")

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "metrics": dict(sorted(self.metrics.items())),
            "null_reasons": dict(sorted(self.null_reasons.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def evaluate(
    model: MeshVAE,
    manifest: DatasetManifest,
    seed: int,
    n_prior_samples: int = 64,
    n_transfer_pairs: int = 50,
    n_sync_pairs: int = 5,
    sync_frames: int = 20,
) -> EvalReport:
    """Score every report metric on the manifest's test split.

    Fixed protocols: transfer pairs are cross-subject pairs of test
    samples scored against the generator's ground truth; synchronization
    aligns identity-warp vs t^2-warp renderings of one canonical
    trajectory on mismatched subjects, scored within +/-2 frames; matching
    uses a gallery of each test subject's first sample, queried with the
    rest; sampling decodes standard-normal codes and is scored against the
    train split.
    """
    data = LoadedDataset.from_manifest(manifest)
    test_rows = data.split_indices["test"]
    if not test_rows:
        raise ValueError("test split is empty")
    metrics: dict = {}
    reasons: dict = {}

    test_vertices = data.vertices[test_rows]
    test_labels = [data.labels[i] for i in test_rows]
    codes_arr = model.mean_codes(test_vertices)
    d_s = model.config.d_shape
    codes = [LatentCode.from_full(row, d_s) for row in codes_arr]

    recon = model.decode_batch(codes_arr)
    metrics["recon_rmse"] = per_vertex_rmse(recon, test_vertices)

    probe_field = {
        "pose_r2_from_pose": "pose_probe_r2_from_pose",
        "pose_r2_from_shape": "pose_probe_r2_from_shape",
        "subject_acc_from_shape": "subject_probe_acc_from_shape",
        "subject_acc_from_pose": "subject_probe_acc_from_pose",
    }
    try:
        probes = probe_subspaces(codes, test_labels)
    except ValueError as exc:
        for report_key in probe_field.values():
            metrics[report_key] = None
            reasons[report_key] = str(exc)
    else:
        metrics["pose_probe_r2_from_pose"] = probes.pose_r2_from_pose
        metrics["pose_probe_r2_from_shape"] = probes.pose_r2_from_shape
        metrics["subject_probe_acc_from_shape"] = probes.subject_acc_from_shape
        metrics["subject_probe_acc_from_pose"] = probes.subject_acc_from_pose
        for key, reason in probes.reasons.items():
            reasons[probe_field[key]] = reason

    # -- transfer vs the generator's ground truth ------------------------
    cross = [
        (i, j)
        for i in range(len(test_rows))
        for j in range(len(test_rows))
        if test_labels[i].subject_id != test_labels[j].subject_id
    ]
    if cross:
        rng = counter_rng(seed, "eval-transfer")
        chosen = [cross[int(k)] for k in rng.choice(len(cross), size=min(n_transfer_pairs, len(cross)), replace=False)]
        swapped_codes = np.stack(
            [
                np.concatenate([codes_arr[i, :d_s], codes_arr[j, d_s:]])
                for i, j in chosen
            ]
        )
        decoded = model.decode_batch(swapped_codes)
        oracle = np.stack(
            [
                generate_mesh(test_labels[i].shape, test_labels[j].pose).vertices
                for i, j in chosen
            ]
        )
        metrics["transfer_rmse_vs_oracle"] = per_vertex_rmse(decoded, oracle)
    else:
        metrics["transfer_rmse_vs_oracle"] = None
        reasons["transfer_rmse_vs_oracle"] = "test split has a single subject"

    # -- shape-invariant synchronization ---------------------------------
    test_subjects = sorted({lab.subject_id for lab in test_labels})
    shapes_by_subject = {lab.subject_id: lab.shape for lab in test_labels}
    if len(test_subjects) >= 2:
        accuracies = []
        for k in range(n_sync_pairs):
            shape_a = shapes_by_subject[test_subjects[k % len(test_subjects)]]
            shape_b = shapes_by_subject[test_subjects[(k + 1) % len(test_subjects)]]
            traj_seed = int(counter_rng(seed, "eval-sync", k).integers(2**62))
            seq_a = make_sequence(shape_a, sync_frames, lambda t: t, traj_seed)
            seq_b = make_sequence(shape_b, sync_frames, lambda t: t * t, traj_seed)
            path = synchronize(model, [m for m, _ in seq_a], [m for m, _ in seq_b])
            accuracies.append(
                _frame_accuracy(path, [lab for _, lab in seq_a], [lab for _, lab in seq_b])
            )
        metrics["sync_frame_accuracy"] = float(np.mean(accuracies))
    else:
        metrics["sync_frame_accuracy"] = None
        reasons["sync_frame_accuracy"] = "need two test subjects for cross-shape sync"

    # -- pose-invariant matching -----------------------------------------
    gallery_rows: dict[int, int] = {}
    for row, lab in enumerate(test_labels):
        gallery_rows.setdefault(lab.subject_id, row)
    query_rows = [r for r in range(len(test_labels)) if r not in gallery_rows.values()]
    if query_rows and len(gallery_rows) >= 2:
        gallery_order = sorted(gallery_rows)
        gallery_codes = codes_arr[[gallery_rows[s] for s in gallery_order], :d_s]
        query_codes = codes_arr[query_rows, :d_s]
        distances = np.linalg.norm(query_codes[:, None, :] - gallery_codes[None, :, :], axis=-1)
        top1 = np.asarray(gallery_order)[np.argmin(distances, axis=1)]
        truth = np.asarray([test_labels[r].subject_id for r in query_rows])
        metrics["match_precision_at_1"] = float(np.mean(top1 == truth))
    else:
        metrics["match_precision_at_1"] = None
        reasons["match_precision_at_1"] = "matching needs two subjects and spare queries"

    # -- prior sampling ----------------------------------------------------
    train_vertices = data.vertices[data.split_indices["train"]]
    _meshes, gen = sample_prior(model, n_prior_samples, seed, reference_meshes=train_vertices)
    metrics["sample_diversity"] = gen.diversity
    if gen.diversity is None:
        reasons["sample_diversity"] = "diversity undefined for a single sample"
    metrics["sample_specificity"] = gen.specificity
    if gen.specificity is None:
        reasons["sample_specificity"] = gen.specificity_reason or "unavailable"

    return EvalReport(metrics=metrics, null_reasons=reasons)


def _frame_accuracy(path, labels_a, labels_b, tolerance: int = 2) -> float:
    """Fraction of b-frames whose aligned a-frames include the ground-truth
    correspondent within +/-tolerance frames."""
    times_a = np.asarray([lab.canonical_time for lab in labels_a])
    hits = 0
    for j, lab_b in enumerate(labels_b):
        target = int(np.argmin(np.abs(times_a - lab_b.canonical_time)))
        matched = path.matches_for_b(j)
        if matched and min(abs(i - target) for i in matched) <= tolerance:
            hits += 1
    return hits / len(labels_b)
