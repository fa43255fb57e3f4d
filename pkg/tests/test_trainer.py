import json

import numpy as np
import pytest

from dismesh.autodiff import NonFiniteError
from dismesh.hierarchy import build_hierarchy
from dismesh.model import MeshVAE, ModelConfig
from dismesh.synth import sample_dataset
from dismesh.trainer import (
    AdamState,
    Checkpoint,
    HierarchyMismatchError,
    LoadedDataset,
    TrainConfig,
    adam_step,
    mean_mesh_baseline_rmse,
    per_vertex_rmse,
    train,
)

TINY_MODEL = ModelConfig(
    ratios=(0.5,),
    channels=(3, 4),
    cheb_order=(2,),
    hidden=8,
    d_shape=2,
    d_pose=2,
    beta_warmup_epochs=2,
)
TINY_TRAIN = TrainConfig(epochs=2, batch_size=8)


def fresh_state(params, **kw):
    return AdamState.for_params(params, **kw)


def test_adam_zero_gradient_keeps_params():
    params = {"p": np.array([1.0, -2.0, 3.0])}
    grads = {"p": np.zeros(3)}
    new_params, state = adam_step(params, grads, fresh_state(params))
    assert np.array_equal(new_params["p"], params["p"])
    assert state.t == 1


def test_adam_hand_computed_first_step():
    params = {"p": np.array([0.0])}
    grads = {"p": np.array([1.0])}
    new_params, state = adam_step(params, grads, fresh_state(params))
    assert state.m["p"][0] == pytest.approx(0.1, abs=1e-15)
    assert state.v["p"][0] == pytest.approx(0.001, abs=1e-15)
    # bias-corrected m^ = 1, v^ = 1 -> p = -lr / (1 + eps)
    assert new_params["p"][0] == pytest.approx(-9.9999999e-4, rel=1e-6)


def test_adam_is_pure_function():
    params = {"p": np.array([0.5, -0.5])}
    grads = {"p": np.array([0.3, 0.7])}
    state = fresh_state(params)
    out1 = adam_step(params, grads, state)
    out2 = adam_step(params, grads, state)
    assert np.array_equal(out1[0]["p"], out2[0]["p"])
    assert np.array_equal(out1[1].m["p"], out2[1].m["p"])
    # inputs untouched
    assert np.array_equal(params["p"], [0.5, -0.5])
    assert state.t == 0


def test_adam_decreases_quadratic_probe():
    params = {"p": np.array([1.0])}
    state = fresh_state(params, learning_rate=1e-3)
    loss = lambda p: float(np.sum(p * p))
    for _ in range(5):
        grads = {"p": 2.0 * params["p"]}
        new_params, state = adam_step(params, grads, state)
        assert loss(new_params["p"]) < loss(params["p"])
        params = new_params


def test_adam_rejects_shape_mismatch_and_nonfinite():
    params = {"p": np.zeros(3)}
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"p": np.zeros(2)}, fresh_state(params))
    with pytest.raises(NonFiniteError, match="'p'"):
        adam_step(params, {"p": np.array([1.0, np.nan, 0.0])}, fresh_state(params))


def test_train_config_validation():
    with pytest.raises(ValueError, match="multiple of 4"):
        TrainConfig(batch_size=6)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 0.1})


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    return sample_dataset(4, 3, seed=11, out_dir=out)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_dataset):
    run_dir = tmp_path_factory.mktemp("tiny_run")
    result = train(tiny_dataset, TINY_MODEL, run_dir, seed=5, trainer=TINY_TRAIN)
    return result


def test_train_writes_one_record_per_epoch(tiny_run):
    lines = tiny_run.metrics_path.read_text().strip().splitlines()
    assert len(lines) == TINY_TRAIN.epochs
    expected_keys = {
        "epoch",
        "loss_total",
        "loss_recon",
        "loss_kl",
        "loss_swap",
        "loss_reg",
        "loss_xcov",
        "beta",
        "val_recon_rmse",
    }
    for line in lines:
        record = json.loads(line)
        assert set(record) == expected_keys
    assert (tiny_run.run_dir / "timings.jsonl").exists()


def test_train_saves_best_and_last(tiny_run):
    assert (tiny_run.run_dir / "checkpoint_best" / "tensors.bin").exists()
    assert (tiny_run.run_dir / "checkpoint_last" / "optimizer.bin").exists()
    best = Checkpoint.load(tiny_run.run_dir / "checkpoint_best")
    assert best.optimizer is None
    last = Checkpoint.load(tiny_run.run_dir / "checkpoint_last")
    assert last.optimizer is not None
    assert last.epoch == TINY_TRAIN.epochs - 1


def test_train_bit_identical_metrics(tmp_path, tiny_dataset):
    run_a = train(tiny_dataset, TINY_MODEL, tmp_path / "a", seed=7, trainer=TINY_TRAIN)
    run_b = train(tiny_dataset, TINY_MODEL, tmp_path / "b", seed=7, trainer=TINY_TRAIN)
    assert run_a.metrics_path.read_bytes() == run_b.metrics_path.read_bytes()
    assert (
        (tmp_path / "a" / "checkpoint_best" / "tensors.bin").read_bytes()
        == (tmp_path / "b" / "checkpoint_best" / "tensors.bin").read_bytes()
    )


def test_train_different_seed_changes_metrics(tmp_path, tiny_dataset):
    run_a = train(tiny_dataset, TINY_MODEL, tmp_path / "a", seed=1, trainer=TINY_TRAIN)
    run_b = train(tiny_dataset, TINY_MODEL, tmp_path / "b", seed=2, trainer=TINY_TRAIN)
    assert run_a.metrics_path.read_bytes() != run_b.metrics_path.read_bytes()


def test_checkpoint_save_load_save_byte_identical(tmp_path, tiny_run):
    src = tiny_run.run_dir / "checkpoint_best"
    loaded = Checkpoint.load(src)
    dst = tmp_path / "resaved"
    loaded.save(dst)
    for name in ("config.json", "tensors.bin", "tensors_index.json", "hierarchy.hash"):
        assert (src / name).read_bytes() == (dst / name).read_bytes(), name


def test_checkpoint_round_trip_decode_bit_identical(tmp_path, tiny_run):
    model = tiny_run.best.model
    reloaded = Checkpoint.load(tiny_run.run_dir / "checkpoint_best").model
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(size=model.config.latent_dim)
        assert model.decode_batch(z).tobytes() == reloaded.decode_batch(z).tobytes()


def test_checkpoint_hierarchy_mismatch_detected(tmp_path, tiny_run, tiny_dataset):
    data = LoadedDataset.from_manifest(tiny_dataset)
    other = build_hierarchy(data.template_mesh(), (0.4,))
    with pytest.raises(HierarchyMismatchError):
        Checkpoint.load(tiny_run.run_dir / "checkpoint_best", expected_hierarchy=other)


def test_loaded_dataset_splits_and_baseline(tiny_dataset):
    data = LoadedDataset.from_manifest(tiny_dataset)
    assert data.vertices.shape[0] == 12
    n_train = len(data.split_indices["train"])
    assert n_train > 0
    baseline = mean_mesh_baseline_rmse(data, "val")
    assert baseline > 0.0


def test_per_vertex_rmse_zero_on_identical():
    x = np.random.default_rng(1).normal(size=(3, 10, 3))
    assert per_vertex_rmse(x, x) == 0.0
    shifted = x + np.array([3.0, 0.0, 4.0])  # per-vertex distance 5 everywhere
    assert per_vertex_rmse(shifted, x) == pytest.approx(5.0, rel=1e-12)
