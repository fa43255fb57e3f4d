"""Optimization loop, Adam updates, checkpointing, and metrics logging.

Training is deterministic given (manifest, config, seed): data order,
pairing, reparameterization draws, and initialization all derive from
counter-based streams, so two runs in the same single-threaded
configuration produce bit-identical metrics and checkpoints. Wall-clock
timings are logged to a separate `timings.jsonl` to keep `metrics.jsonl`
byte-reproducible.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError
from .hierarchy import MeshHierarchy, build_hierarchy
from .mesh import TriangleMesh, load_obj
from .model import (
    MeshVAE,
    ModelConfig,
    PairBatch,
    normalized_pose_vector,
    normalized_shape_vector,
    total_loss,
)
from .rng import counter_rng
from .synth import DatasetManifest, FactorLabels, generate_mesh

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class HierarchyMismatchError(TrainingError):
    """Checkpoint hierarchy fingerprint does not match."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 4 or self.batch_size % 4 != 0:
            raise ValueError("batch_size must be a positive multiple of 4 (two pair types)")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; pure function of (params, grads, state).

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected
    m^ = m / (1 - b1^t), v^ = v / (1 - b2^t);  p <- p - lr * m^ / (sqrt(v^) + eps).
    """
    if set(params) != set(grads):
        raise ValueError(
            f"parameter/gradient name mismatch: {sorted(set(params) ^ set(grads))}"
        )
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(
        m=new_m,
        v=new_v,
        t=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _write_tensor_blob(path_bin: Path, path_index: Path, arrays: dict[str, np.ndarray]) -> None:
    index = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        offset += len(data)
        blobs.append(data)
    path_bin.write_bytes(b"".join(blobs))
    path_index.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_tensor_blob(path_bin: Path, path_index: Path) -> dict[str, np.ndarray]:
    raw = path_bin.read_bytes()
    index = json.loads(path_index.read_text(encoding="utf-8"))
    out = {}
    for name, entry in index.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        out[name] = arr.copy()
    return out


@dataclass
class Checkpoint:
    """On-disk model snapshot; save -> load -> save is byte-identical."""

    model: MeshVAE
    epoch: int
    seed: int
    trainer: TrainConfig
    optimizer: Optional[AdamState] = None

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "version": CHECKPOINT_VERSION,
            "model": self.model.config.to_dict(),
            "normalization": {
                "center": [float(c) for c in self.model.center],
                "scale": float(self.model.scale),
            },
            "template_faces": None
            if self.model.template_faces is None
            else self.model.template_faces.tolist(),
            "epoch": self.epoch,
            "rng": {"seed": self.seed, "next_epoch": self.epoch + 1},
            "trainer": self.trainer.to_dict(),
            "has_optimizer": self.optimizer is not None,
        }
        (directory / "config.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        _write_tensor_blob(
            directory / "tensors.bin",
            directory / "tensors_index.json",
            {name: p.values for name, p in self.model.params.items()},
        )
        self.model.hierarchy.save(directory / "hierarchy")
        (directory / "hierarchy.hash").write_text(
            self.model.hierarchy.fingerprint() + "\n", encoding="utf-8"
        )
        if self.optimizer is not None:
            moments = {}
            for name, m in self.optimizer.m.items():
                moments[f"m/{name}"] = m
            for name, v in self.optimizer.v.items():
                moments[f"v/{name}"] = v
            _write_tensor_blob(
                directory / "optimizer.bin", directory / "optimizer_index.json", moments
            )
            (directory / "optimizer.json").write_text(
                json.dumps(
                    {
                        "t": self.optimizer.t,
                        "learning_rate": self.optimizer.learning_rate,
                        "beta1": self.optimizer.beta1,
                        "beta2": self.optimizer.beta2,
                        "eps": self.optimizer.eps,
                    },
                    sort_keys=True,
                    indent=2,
                )
                + "\n",
                encoding="utf-8",
            )
        return directory

    @classmethod
    def load(cls, directory, expected_hierarchy: Optional[MeshHierarchy] = None) -> "Checkpoint":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise TrainingError(f"unsupported checkpoint version {meta.get('version')!r}")
        hierarchy = MeshHierarchy.load(directory / "hierarchy")
        stored_hash = (directory / "hierarchy.hash").read_text(encoding="utf-8").strip()
        if hierarchy.fingerprint() != stored_hash:
            raise HierarchyMismatchError(
                "checkpoint hierarchy does not match its recorded fingerprint"
            )
        if expected_hierarchy is not None and expected_hierarchy.fingerprint() != stored_hash:
            raise HierarchyMismatchError(
                "checkpoint was trained on a different hierarchy than requested"
            )
        config = ModelConfig.from_dict(meta["model"])
        model = MeshVAE(config, hierarchy, dtype=np.float32)
        tensors = _read_tensor_blob(directory / "tensors.bin", directory / "tensors_index.json")
        for name, param in model.params.items():
            if name not in tensors:
                raise TrainingError(f"checkpoint missing parameter {name!r}")
            if tuple(tensors[name].shape) != param.shape:
                raise TrainingError(
                    f"checkpoint parameter {name!r} has shape {tensors[name].shape}, "
                    f"expected {param.shape}"
                )
            param.values[...] = tensors[name]
        model.set_normalization(
            np.asarray(meta["normalization"]["center"], dtype=np.float64),
            float(meta["normalization"]["scale"]),
        )
        if meta.get("template_faces") is not None:
            model.set_template_faces(np.asarray(meta["template_faces"], dtype=np.int64))
        trainer = TrainConfig.from_dict(meta["trainer"])
        optimizer = None
        if meta.get("has_optimizer"):
            moments = _read_tensor_blob(
                directory / "optimizer.bin", directory / "optimizer_index.json"
            )
            opt_meta = json.loads((directory / "optimizer.json").read_text(encoding="utf-8"))
            optimizer = AdamState(
                m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
                v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
                t=int(opt_meta["t"]),
                learning_rate=float(opt_meta["learning_rate"]),
                beta1=float(opt_meta["beta1"]),
                beta2=float(opt_meta["beta2"]),
                eps=float(opt_meta["eps"]),
            )
        return cls(
            model=model,
            epoch=int(meta["epoch"]),
            seed=int(meta["rng"]["seed"]),
            trainer=trainer,
            optimizer=optimizer,
        )


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------


@dataclass
class LoadedDataset:
    """All meshes of a manifest in memory, indexed per split and subject."""

    vertices: np.ndarray  # (n_samples, N, 3) raw units
    labels: list[FactorLabels]
    faces: np.ndarray
    split_indices: dict[str, list[int]]
    by_subject: dict[int, list[int]]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "LoadedDataset":
        if not manifest.samples:
            raise TrainingError("manifest lists no samples")
        meshes = []
        labels = []
        faces = None
        for sample in manifest.samples:
            mesh = load_obj(manifest.mesh_path(sample))
            if mesh.topology_hash() != manifest.template_topology_hash:
                raise TrainingError(
                    f"{sample.path}: topology differs from the manifest template"
                )
            if faces is None:
                faces = mesh.faces
            meshes.append(mesh.vertices)
            labels.append(sample.labels)
        vertices = np.stack(meshes)
        split_indices = {
            name: [
                i
                for i, lab in enumerate(labels)
                if lab.subject_id in set(manifest.split[name])
            ]
            for name in ("train", "val", "test")
        }
        by_subject: dict[int, list[int]] = {}
        for i, lab in enumerate(labels):
            by_subject.setdefault(lab.subject_id, []).append(i)
        return cls(
            vertices=vertices,
            labels=labels,
            faces=faces,
            split_indices=split_indices,
            by_subject=by_subject,
        )

    def template_mesh(self) -> TriangleMesh:
        """Mean training mesh; the geometry the hierarchy is built from."""
        train = self.split_indices["train"]
        if not train:
            raise TrainingError("train split is empty")
        return TriangleMesh(self.vertices[train].mean(axis=0), self.faces)

    def normalization(self) -> tuple[np.ndarray, float]:
        train = self.vertices[self.split_indices["train"]]
        center = train.mean(axis=(0, 1))
        scale = float(np.sqrt(np.mean(np.sum((train - center) ** 2, axis=-1))))
        return center, scale


def per_vertex_rmse(predicted: np.ndarray, target: np.ndarray) -> float:
    """sqrt(mean squared per-vertex Euclidean error), pooled over a batch."""
    diff = np.asarray(predicted) - np.asarray(target)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def mean_mesh_baseline_rmse(data: LoadedDataset, split: str) -> float:
    """RMSE of always predicting the training-mean vertices on `split`."""
    train_mean = data.vertices[data.split_indices["train"]].mean(axis=0)
    indices = data.split_indices[split] or data.split_indices["train"]
    targets = data.vertices[indices]
    return per_vertex_rmse(np.broadcast_to(train_mean, targets.shape), targets)


# ---------------------------------------------------------------------------
# Pair batching
# ---------------------------------------------------------------------------


def _build_pair_batch(
    data: LoadedDataset,
    model: MeshVAE,
    anchors: list[int],
    train_subjects: list[int],
    rng: np.random.Generator,
    noise: np.ndarray,
) -> PairBatch:
    half = len(anchors) // 2
    a_idx = anchors[:half]
    c_idx = anchors[half:]

    norm = model.normalize
    a_meshes, b_meshes = [], []
    a_labels, b_labels = [], []
    for i in a_idx:
        lab = data.labels[i]
        others = [j for j in data.by_subject[lab.subject_id] if j != i]
        j = int(rng.choice(others)) if others else i
        a_meshes.append(norm(data.vertices[i]))
        b_meshes.append(norm(data.vertices[j]))
        a_labels.append(lab)
        b_labels.append(data.labels[j])

    c_meshes, d_meshes = [], []
    c_labels, d_labels = [], []
    for i in c_idx:
        lab = data.labels[i]
        other_subjects = [s for s in train_subjects if s != lab.subject_id]
        if other_subjects:
            partner_subject = int(rng.choice(other_subjects))
            partner_shape = data.labels[data.by_subject[partner_subject][0]].shape
            partner = generate_mesh(partner_shape, lab.pose)
            d_lab = FactorLabels(subject_id=partner_subject, shape=partner_shape, pose=lab.pose)
            d_vertices = partner.vertices
        else:
            # single-subject split: degenerate pair, keeps the loss defined
            d_lab = lab
            d_vertices = data.vertices[i]
        c_meshes.append(norm(data.vertices[i]))
        d_meshes.append(norm(d_vertices))
        c_labels.append(lab)
        d_labels.append(d_lab)

    ordered = a_labels + b_labels + c_labels + d_labels
    shape_targets = np.stack([normalized_shape_vector(l.shape) for l in ordered])
    pose_targets = np.stack([normalized_pose_vector(l.pose) for l in ordered])
    return PairBatch(
        same_subject_a=np.stack(a_meshes),
        same_subject_b=np.stack(b_meshes),
        same_pose_c=np.stack(c_meshes),
        same_pose_d=np.stack(d_meshes),
        shape_targets=shape_targets,
        pose_targets=pose_targets,
        noise=noise,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    best_epoch: int
    best_val_rmse: float
    run_dir: Path
    metrics_path: Path


def train(
    manifest: DatasetManifest,
    config: ModelConfig,
    run_dir,
    seed: int,
    trainer: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train the VAE on the manifest's train split.

    Writes `metrics.jsonl` (one record per epoch, deterministic),
    `timings.jsonl` (wall time per epoch), and `checkpoint_best/` /
    `checkpoint_last/` under `run_dir`. Best is by validation
    reconstruction RMSE (falling back to the train split when the val
    split is empty).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = LoadedDataset.from_manifest(manifest)
    if not data.split_indices["train"]:
        raise TrainingError("train split is empty")

    hierarchy = build_hierarchy(data.template_mesh(), config.ratios)
    model = MeshVAE(config, hierarchy, dtype=np.float32)
    model.initialize(seed)
    model.set_template_faces(data.faces)
    center, scale = data.normalization()
    model.set_normalization(center, scale)

    state = AdamState.for_params(
        {k: p.values for k, p in model.params.items()},
        learning_rate=trainer.learning_rate,
        beta1=trainer.beta1,
        beta2=trainer.beta2,
        eps=trainer.eps,
    )

    train_indices = data.split_indices["train"]
    train_subjects = sorted({data.labels[i].subject_id for i in train_indices})
    val_indices = data.split_indices["val"] or train_indices
    val_targets = data.vertices[val_indices]

    anchors_per_batch = trainer.batch_size // 2
    n_batches = max(1, len(train_indices) // anchors_per_batch)

    metrics_path = run_dir / "metrics.jsonl"
    timings_path = run_dir / "timings.jsonl"
    best_rmse = math.inf
    best_epoch = -1
    metrics_lines: list[str] = []
    timing_lines: list[str] = []

    def evaluate_val_rmse() -> float:
        recon = model.decode_batch(model.mean_codes(val_targets))
        return per_vertex_rmse(recon, val_targets)

    for epoch in range(trainer.epochs):
        t0 = time.perf_counter()
        order = counter_rng(seed, "shuffle", epoch).permutation(len(train_indices))
        pair_rng = counter_rng(seed, "pairs", epoch)
        sums: dict[str, float] = {}
        batches_done = 0
        try:
            for b in range(n_batches):
                start = b * anchors_per_batch
                anchor_rows = order[start : start + anchors_per_batch]
                if len(anchor_rows) < 2:
                    continue
                anchors = [train_indices[r] for r in anchor_rows]
                noise = counter_rng(seed, "noise", epoch, b).standard_normal(
                    size=(2 * len(anchors), config.latent_dim)
                )
                batch = _build_pair_batch(data, model, anchors, train_subjects, pair_rng, noise)
                for p in model.params.values():
                    p.zero_grad()
                loss, breakdown = total_loss(batch, model, config, epoch)
                loss.backward()
                grads = {k: p.grad for k, p in model.params.items()}
                new_values, state = adam_step(
                    {k: p.values for k, p in model.params.items()}, grads, state
                )
                for k, p in model.params.items():
                    p.values[...] = new_values[k]
                for key, value in breakdown.to_dict().items():
                    sums[key] = sums.get(key, 0.0) + value
                batches_done += 1
        except NonFiniteError as exc:
            raise TrainingError(
                f"aborting at epoch {epoch}: {exc}; last good checkpoint kept in {run_dir}"
            ) from exc

        record = {key: value / batches_done for key, value in sums.items()}
        record["epoch"] = epoch
        record["val_recon_rmse"] = evaluate_val_rmse()
        metrics_lines.append(json.dumps(record, sort_keys=True))
        metrics_path.write_text("\n".join(metrics_lines) + "\n", encoding="utf-8")
        timing_lines.append(
            json.dumps({"epoch": epoch, "wall_time_s": time.perf_counter() - t0})
        )
        timings_path.write_text("\n".join(timing_lines) + "\n", encoding="utf-8")

        checkpoint = Checkpoint(
            model=model, epoch=epoch, seed=seed, trainer=trainer, optimizer=state
        )
        checkpoint.save(run_dir / "checkpoint_last")
        if record["val_recon_rmse"] < best_rmse:
            best_rmse = record["val_recon_rmse"]
            best_epoch = epoch
            Checkpoint(model=model, epoch=epoch, seed=seed, trainer=trainer).save(
                run_dir / "checkpoint_best"
            )

    best = Checkpoint.load(run_dir / "checkpoint_best")
    return TrainResult(
        best=best,
        best_epoch=best_epoch,
        best_val_rmse=best_rmse,
        run_dir=run_dir,
        metrics_path=metrics_path,
    )
