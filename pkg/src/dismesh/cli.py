"""Single command-line entrypoint for the whole pipeline.

Subcommands: generate-data, train, eval, transfer, sync, match, sample,
serve. A JSON run-config file can carry dataset/model/trainer settings;
explicit flags win over config values. Exit codes: 0 success, 1 validation
error (bad flags, config, or inputs), 2 runtime failure. `DISMESH_LOG`
(error | info | debug) controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalmetrics import evaluate
from .mesh import MeshError, load_obj, save_obj
from .model import ModelConfig
from .server import DEFAULT_MAX_BODY_BYTES, DEFAULT_PORT, make_server
from .synth import DatasetManifest, sample_dataset
from .tasks import match as match_task
from .tasks import sample_prior, synchronize, transfer
from .trainer import Checkpoint, LoadedDataset, TrainConfig, per_vertex_rmse, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

RUN_CONFIG_VERSION = 1

logger = logging.getLogger("dismesh.cli")


class CliError(ValueError):
    pass


@dataclass
class RunConfig:
    """Top-level JSON config; unknown keys anywhere are rejected."""

    seed: int = 0
    subjects: int = 20
    poses: int = 30
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError(f"{path}: config must be a JSON object")
        known = {"version", "seed", "dataset", "model", "trainer"}
        unknown = set(data) - known
        if unknown:
            raise CliError(f"{path}: unknown config keys: {sorted(unknown)}")
        if data.get("version") != RUN_CONFIG_VERSION:
            raise CliError(f"{path}: config version must be {RUN_CONFIG_VERSION}")
        dataset = data.get("dataset", {})
        unknown_ds = set(dataset) - {"subjects", "poses"}
        if unknown_ds:
            raise CliError(f"{path}: unknown dataset keys: {sorted(unknown_ds)}")
        try:
            model = ModelConfig.from_dict(data.get("model", {}))
            trainer = TrainConfig.from_dict(data.get("trainer", {}))
        except (ValueError, TypeError) as exc:
            raise CliError(f"{path}: {exc}") from exc
        return cls(
            seed=int(data.get("seed", 0)),
            subjects=int(dataset.get("subjects", 20)),
            poses=int(dataset.get("poses", 30)),
            model=model,
            trainer=trainer,
        )


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _configure_logging():
    level_name = os.environ.get("DISMESH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise CliError(f"DISMESH_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dismesh",
        description="Disentangled mesh-convolutional VAE pipeline.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = add("generate-data", "Generate the synthetic articulated-tube dataset.")
    p.add_argument("--subjects", type=int, default=None, help="number of subjects (default: 20)")
    p.add_argument("--poses", type=int, default=None, help="poses per subject (default: 30)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: 0)")
    p.add_argument("--config", type=Path, default=None, help="run-config JSON; flags win")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")

    p = add("train", "Train the model on a generated dataset.")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: 0)")
    p.add_argument("--config", type=Path, default=None, help="run-config JSON; flags win")
    p.add_argument("--epochs", type=int, default=None, help="override trainer epochs (default: 200)")
    p.add_argument("--batch-size", type=int, default=None, help="override batch size (default: 16)")
    p.add_argument("--learning-rate", type=float, default=None, help="override Adam learning rate (default: 0.001)")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and metrics")

    p = add("eval", "Evaluate a checkpoint on a dataset's test split.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--out", type=Path, required=True, help="output eval_report.json path")

    p = add("transfer", "Decode the shape of one mesh with the pose of another.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--shape-from", type=Path, required=True, help="OBJ providing the shape code")
    p.add_argument("--pose-from", type=Path, required=True, help="OBJ providing the pose code")
    p.add_argument("--out", type=Path, required=True, help="output OBJ path")

    p = add("sync", "Align two OBJ frame sequences by pose embeddings.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--seq-a", type=Path, required=True, help="directory of OBJ frames (sorted by name)")
    p.add_argument("--seq-b", type=Path, required=True, help="directory of OBJ frames (sorted by name)")
    p.add_argument("--out", type=Path, required=True, help="output alignment JSON path")

    p = add("match", "Rank gallery meshes by shape-code distance to a query.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--query", type=Path, required=True, help="query OBJ")
    p.add_argument("--gallery", type=Path, required=True, help="directory of gallery OBJs")
    p.add_argument("--out", type=Path, required=True, help="output ranking JSON path")

    p = add("sample", "Decode random draws from the latent prior.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("-n", type=int, default=16, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--data", type=Path, default=None, help="dataset for the specificity reference (optional)")
    p.add_argument("--out", type=Path, required=True, help="output directory for OBJs and metrics")

    p = add("serve", "Serve encode/decode/transfer/sample over HTTP.")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=DEFAULT_PORT, help="bind port")
    p.add_argument("--cors-origin", default="*", help="Access-Control-Allow-Origin value")
    p.add_argument("--max-body-bytes", type=int, default=DEFAULT_MAX_BODY_BYTES, help="request payload cap")

    return parser


def _merged_run_config(args, need_dataset=False) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if need_dataset:
        if getattr(args, "subjects", None) is not None:
            config.subjects = args.subjects
        if getattr(args, "poses", None) is not None:
            config.poses = args.poses
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        merged = dict(config.trainer.to_dict())
        merged.update(overrides)
        config.trainer = TrainConfig.from_dict(merged)
    return config


def _load_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise CliError(f"checkpoint directory not found: {path}")
    return Checkpoint.load(path)


def _load_sequence(directory: Path):
    if not directory.is_dir():
        raise CliError(f"sequence directory not found: {directory}")
    paths = sorted(directory.glob("*.obj"))
    if not paths:
        raise CliError(f"no .obj frames in {directory}")
    return [load_obj(p) for p in paths]


_SUBJECT_RE = re.compile(r"subject(\d+)")


def cmd_generate_data(args) -> int:
    config = _merged_run_config(args, need_dataset=True)
    manifest = sample_dataset(config.subjects, config.poses, config.seed, args.out)
    print(
        f"generated {len(manifest.samples)} samples "
        f"({config.subjects} subjects x {config.poses} poses, seed {config.seed}) -> {args.out / 'manifest.json'}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _merged_run_config(args)
    manifest = DatasetManifest.load(args.data)
    result = train(manifest, config.model, args.out, config.seed, trainer=config.trainer)
    print(
        f"trained {config.trainer.epochs} epochs, best val RMSE {result.best_val_rmse:.6g} "
        f"at epoch {result.best_epoch} -> {result.run_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    report = evaluate(checkpoint.model, manifest, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    # consistency hook against the trainer's logged validation RMSE
    data = LoadedDataset.from_manifest(manifest)
    val_rows = data.split_indices["val"] or data.split_indices["train"]
    val_vertices = data.vertices[val_rows]
    model = checkpoint.model
    val_rmse = per_vertex_rmse(model.decode_batch(model.mean_codes(val_vertices)), val_vertices)
    print(
        f"eval: test recon RMSE {report.metrics['recon_rmse']:.6g}, "
        f"val recon RMSE {val_rmse:.9g} -> {args.out}"
    )
    return EXIT_OK


def cmd_transfer(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    shape_mesh = load_obj(args.shape_from)
    pose_mesh = load_obj(args.pose_from)
    result = transfer(checkpoint.model, shape_mesh, pose_mesh)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(result, args.out)
    print(f"transfer: shape of {args.shape_from.name} + pose of {args.pose_from.name} -> {args.out}")
    return EXIT_OK


def cmd_sync(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    seq_a = _load_sequence(args.seq_a)
    seq_b = _load_sequence(args.seq_b)
    path = synchronize(checkpoint.model, seq_a, seq_b)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(
        json.dumps({"cost": path.cost, "pairs": [list(p) for p in path.pairs]}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"sync: aligned {len(seq_a)} x {len(seq_b)} frames, cost {path.cost:.6g} -> {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    query = load_obj(args.query)
    if not args.gallery.is_dir():
        raise CliError(f"gallery directory not found: {args.gallery}")
    gallery_paths = sorted(args.gallery.glob("*.obj"))
    if not gallery_paths:
        raise CliError(f"no .obj meshes in {args.gallery}")
    gallery = []
    for index, path in enumerate(gallery_paths):
        found = _SUBJECT_RE.search(path.stem)
        subject_id = int(found.group(1)) if found else index
        gallery.append((load_obj(path), subject_id))
    ranked = match_task(checkpoint.model, query, gallery)
    payload = [
        {"subject_id": r.subject_id, "gallery_file": gallery_paths[r.gallery_index].name, "distance": r.distance}
        for r in ranked
    ]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"match: best subject {ranked[0].subject_id} (distance {ranked[0].distance:.6g}) -> {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    references = None
    if args.data is not None:
        manifest = DatasetManifest.load(args.data)
        data = LoadedDataset.from_manifest(manifest)
        references = data.vertices[data.split_indices["train"]]
    meshes, metrics = sample_prior(checkpoint.model, args.n, args.seed, reference_meshes=references)
    args.out.mkdir(parents=True, exist_ok=True)
    for index, mesh in enumerate(meshes):
        save_obj(mesh, args.out / f"sample{index:03d}.obj")
    metrics_payload = {
        "n": args.n,
        "seed": args.seed,
        "diversity": metrics.diversity,
        "specificity": metrics.specificity,
        "specificity_reason": metrics.specificity_reason,
    }
    (args.out / "metrics.json").write_text(
        json.dumps(metrics_payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"sampled {args.n} meshes (seed {args.seed}) -> {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    server = make_server(
        checkpoint.model,
        host=args.host,
        port=args.port,
        cors_origin=args.cors_origin,
        max_body=args.max_body_bytes,
    )
    host, port = server.server_address[:2]
    print(f"serving checkpoint {args.checkpoint} on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "sync": cmd_sync,
    "match": cmd_match,
    "sample": cmd_sample,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    try:
        _configure_logging()
    except CliError as exc:
        print(f"dismesh: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (CliError, MeshError, FileNotFoundError) as exc:
        print(f"dismesh {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"dismesh {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure class
        logger.exception("runtime failure")
        print(f"dismesh {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
