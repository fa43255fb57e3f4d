"""Disentangled mesh-convolutional VAE for fixed-topology deformable shapes."""

from .hierarchy import MeshHierarchy, build_hierarchy
from .mesh import TriangleMesh, load_obj, normalized_scaled_laplacian, save_obj
from .model import LatentCode, MeshVAE, ModelConfig
from .sparse import SparseMatrix
from .synth import (
    DatasetManifest,
    FactorLabels,
    PoseParams,
    ShapeParams,
    generate_mesh,
    make_sequence,
    sample_dataset,
)
from .tasks import AlignmentPath, match, sample_prior, synchronize, transfer
from .trainer import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentPath",
    "Checkpoint",
    "DatasetManifest",
    "FactorLabels",
    "LatentCode",
    "MeshHierarchy",
    "MeshVAE",
    "ModelConfig",
    "PoseParams",
    "ShapeParams",
    "SparseMatrix",
    "TrainConfig",
    "TriangleMesh",
    "build_hierarchy",
    "generate_mesh",
    "load_obj",
    "make_sequence",
    "match",
    "normalized_scaled_laplacian",
    "sample_dataset",
    "sample_prior",
    "save_obj",
    "synchronize",
    "train",
    "transfer",
    "__version__",
]
