"""Disentangled mesh-convolutional VAE.

The encoder runs Chebyshev spectral convolutions over the hierarchy levels
(conv, ELU, vertex-selection downsample per level), flattens the coarsest
level through a hidden affine to a Gaussian posterior over a latent code
split into a shape subspace and a pose subspace. The decoder mirrors it
with barycentric upsampling. Supervision couples the subspaces to the
generative factors three ways, each independently weightable:

* swap: decoding a code assembled from one mesh's shape half and another's
  pose half must reconstruct the mesh that actually has that combination
  (the paired dataset makes such targets exact);
* factor regression: small affine heads predict normalized shape/pose
  parameters from the matching subspace only;
* cross-covariance: the batch cross-covariance between the two subspaces
  is pushed to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .hierarchy import MeshHierarchy
from .rng import counter_rng
from .sparse import SparseMatrix
from .synth import (
    ANGLE_RANGE,
    JOINTS,
    LENGTH_RANGE,
    RADIUS_RANGE,
    SEGMENTS,
    PoseParams,
    ShapeParams,
)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class ModelConfig:
    ratios: tuple[float, ...] = (0.5, 0.5)
    channels: tuple[int, ...] = (3, 16, 32)
    cheb_order: tuple[int, ...] = (6, 6)
    hidden: int = 64
    d_shape: int = 8
    d_pose: int = 8
    w_recon: float = 1.0
    w_kl: float = 1.0
    w_swap: float = 1.0
    w_reg: float = 0.5
    w_xcov: float = 0.1
    beta_warmup_epochs: int = 40

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "cheb_order", tuple(int(k) for k in self.cheb_order))
        if len(self.channels) != len(self.ratios) + 1:
            raise ValueError(
                f"channels must have one entry per level: "
                f"{len(self.channels)} channels vs {len(self.ratios)} ratios"
            )
        if len(self.cheb_order) != len(self.ratios):
            raise ValueError("cheb_order must have one entry per conv layer")
        if self.channels[0] != 3:
            raise ValueError("input channels must be 3 (vertex positions)")
        if any(k < 1 for k in self.cheb_order):
            raise ValueError("Chebyshev order must be >= 1")
        if self.d_shape < 1 or self.d_pose < 1:
            raise ValueError("latent subspace dimensions must be >= 1")
        for name in ("w_recon", "w_kl", "w_swap", "w_reg", "w_xcov"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.beta_warmup_epochs < 0:
            raise ValueError("beta_warmup_epochs must be >= 0")

    @property
    def latent_dim(self) -> int:
        return self.d_shape + self.d_pose

    def to_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "channels": list(self.channels),
            "cheb_order": list(self.cheb_order),
            "hidden": self.hidden,
            "d_shape": self.d_shape,
            "d_pose": self.d_pose,
            "w_recon": self.w_recon,
            "w_kl": self.w_kl,
            "w_swap": self.w_swap,
            "w_reg": self.w_reg,
            "w_xcov": self.w_xcov,
            "beta_warmup_epochs": self.beta_warmup_epochs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("ratios", "channels", "cheb_order"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class LatentCode:
    """Concatenation [z_shape, z_pose]; the object all downstream tasks edit."""

    z_shape: np.ndarray
    z_pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_shape", np.asarray(self.z_shape, dtype=np.float64).ravel())
        object.__setattr__(self, "z_pose", np.asarray(self.z_pose, dtype=np.float64).ravel())
        if self.z_shape.size < 1 or self.z_pose.size < 1:
            raise ValueError("latent subspaces must be non-empty")

    def full(self) -> np.ndarray:
        return np.concatenate([self.z_shape, self.z_pose])

    @classmethod
    def from_full(cls, z: np.ndarray, d_shape: int) -> "LatentCode":
        z = np.asarray(z, dtype=np.float64).ravel()
        return cls(z[:d_shape], z[d_shape:])


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the latent code; logvar is pre-clamped."""

    mu: DiffTensor
    logvar: DiffTensor


@dataclass(frozen=True)
class ChebLayerParams:
    theta: DiffTensor  # (K, C_in, C_out)
    bias: DiffTensor  # (C_out,)


def cheb_conv(x: DiffTensor, laplacian: SparseMatrix, params: ChebLayerParams) -> DiffTensor:
    """Chebyshev spectral graph convolution.

    y = sum_k T_k(L) x theta_k + bias with the recurrence T_0 x = x,
    T_1 x = L x, T_k x = 2 L T_{k-1} x - T_{k-2} x. `x` is (N, C_in) or
    batched (B, N, C_in).
    """
    k_order, c_in, c_out = params.theta.shape
    if x.shape[-1] != c_in:
        raise ad.ShapeMismatchError(
            f"cheb_conv: input has {x.shape[-1]} channels, theta expects {c_in}"
        )
    if x.shape[-2] != laplacian.shape[0]:
        raise ad.ShapeMismatchError(
            f"cheb_conv: input has {x.shape[-2]} vertices, laplacian is {laplacian.shape}"
        )
    terms = [x]
    if k_order > 1:
        terms.append(ad.sparse_matmul(laplacian, x))
    for _ in range(2, k_order):
        nxt = ad.subtract(
            ad.multiply(ad.sparse_matmul(laplacian, terms[-1]), _two(x.dtype)), terms[-2]
        )
        terms.append(nxt)
    stacked = ad.concat(terms, axis=-1) if len(terms) > 1 else terms[0]
    weight = ad.reshape(params.theta, (k_order * c_in, c_out))
    return ad.add(ad.matmul(stacked, weight), params.bias)


def _two(dtype):
    return ad.constant(np.asarray(2.0, dtype=dtype))


class MeshVAE:
    """Model = config + hierarchy + named parameter tensors + normalization.

    Parameters live in an ordered dict so checkpoints and optimizer state
    serialize deterministically. Instances are read-only during inference;
    training mutates parameter values in place through the optimizer.
    """

    def __init__(self, config: ModelConfig, hierarchy: MeshHierarchy, dtype=np.float32):
        if len(hierarchy.levels) != len(config.channels):
            raise ValueError(
                f"hierarchy has {len(hierarchy.levels)} levels, "
                f"config expects {len(config.channels)}"
            )
        self.config = config
        self.hierarchy = hierarchy
        self.dtype = np.dtype(dtype)
        self.params: dict[str, DiffTensor] = {}
        self.center = np.zeros(3, dtype=np.float64)
        self.scale = 1.0
        self.template_faces: Optional[np.ndarray] = None
        self._build_params()

    # -- construction ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.hierarchy.levels[0].vertex_count

    @property
    def coarse_size(self) -> int:
        return self.hierarchy.levels[-1].vertex_count

    def _add_param(self, name: str, shape: tuple[int, ...]) -> None:
        values = np.zeros(shape, dtype=self.dtype)
        self.params[name] = DiffTensor(values, requires_grad=True, name=name)

    def _build_params(self):
        cfg = self.config
        n_layers = len(cfg.cheb_order)
        for layer in range(n_layers):
            k = cfg.cheb_order[layer]
            self._add_param(f"enc_conv{layer}_theta", (k, cfg.channels[layer], cfg.channels[layer + 1]))
            self._add_param(f"enc_conv{layer}_bias", (cfg.channels[layer + 1],))
        flat = self.coarse_size * cfg.channels[-1]
        self._add_param("enc_hidden_w", (flat, cfg.hidden))
        self._add_param("enc_hidden_b", (cfg.hidden,))
        self._add_param("enc_out_w", (cfg.hidden, 2 * cfg.latent_dim))
        self._add_param("enc_out_b", (2 * cfg.latent_dim,))
        self._add_param("dec_in_w", (cfg.latent_dim, cfg.hidden))
        self._add_param("dec_in_b", (cfg.hidden,))
        self._add_param("dec_expand_w", (cfg.hidden, flat))
        self._add_param("dec_expand_b", (flat,))
        for layer in reversed(range(n_layers)):
            k = cfg.cheb_order[layer]
            self._add_param(f"dec_conv{layer}_theta", (k, cfg.channels[layer + 1], cfg.channels[layer]))
            self._add_param(f"dec_conv{layer}_bias", (cfg.channels[layer],))
        # factor targets: radii + lengths (2 * SEGMENTS), joint angles (JOINTS)
        self._add_param("reg_shape_w", (cfg.d_shape, 2 * SEGMENTS))
        self._add_param("reg_shape_b", (2 * SEGMENTS,))
        self._add_param("reg_pose_w", (cfg.d_pose, JOINTS))
        self._add_param("reg_pose_b", (JOINTS,))

    def initialize(self, seed: int) -> None:
        """Fan-in-scaled uniform init; the posterior head starts at zero so
        early epochs stay near the prior."""
        for name, param in self.params.items():
            if name in ("enc_out_w", "enc_out_b") or name.endswith("_b") or name.endswith("_bias"):
                param.values[...] = 0.0
                continue
            shape = param.shape
            if name.endswith("_theta"):
                fan_in = shape[0] * shape[1]
            else:
                fan_in = shape[0]
            bound = math.sqrt(3.0 / fan_in)
            rng = counter_rng(seed, "init", name)
            param.values[...] = rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def set_template_faces(self, faces) -> None:
        faces = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"template faces must be (M, 3), got {faces.shape}")
        if faces.min() < 0 or faces.max() >= self.n_vertices:
            raise ValueError("template face indices out of range for the hierarchy")
        faces.setflags(write=False)
        self.template_faces = faces

    def set_normalization(self, center, scale: float) -> None:
        center = np.asarray(center, dtype=np.float64).ravel()
        if center.shape != (3,):
            raise ValueError(f"center must be a 3-vector, got {center.shape}")
        if not np.isfinite(scale) or scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {scale}")
        self.center = center
        self.scale = float(scale)

    def conv_params(self, name: str) -> ChebLayerParams:
        return ChebLayerParams(self.params[f"{name}_theta"], self.params[f"{name}_bias"])

    # -- differentiable paths (normalized coordinates) -------------------

    def encode_t(self, x: DiffTensor) -> GaussianPosterior:
        """x: (B, N, 3) normalized positions -> posterior over (B, d)."""
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != self.n_vertices or x.shape[2] != 3:
            raise ad.ShapeMismatchError(
                f"encode expects (B, {self.n_vertices}, 3), got {x.shape}"
            )
        levels = self.hierarchy.levels
        for layer in range(len(cfg.cheb_order)):
            x = cheb_conv(x, levels[layer].scaled_laplacian, self.conv_params(f"enc_conv{layer}"))
            x = ad.elu(x)
            x = ad.sparse_matmul(levels[layer].downsample, x)
        flat = ad.reshape(x, (x.shape[0], self.coarse_size * cfg.channels[-1]))
        hidden = ad.elu(ad.add(ad.matmul(flat, self.params["enc_hidden_w"]), self.params["enc_hidden_b"]))
        out = ad.add(ad.matmul(hidden, self.params["enc_out_w"]), self.params["enc_out_b"])
        mu = out[:, : cfg.latent_dim]
        logvar = ad.clip(out[:, cfg.latent_dim :], LOGVAR_MIN, LOGVAR_MAX)
        return GaussianPosterior(mu=mu, logvar=logvar)

    def decode_t(self, z: DiffTensor) -> DiffTensor:
        """z: (B, d) -> (B, N, 3) normalized positions; deterministic."""
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ad.ShapeMismatchError(f"decode expects (B, {cfg.latent_dim}), got {z.shape}")
        hidden = ad.elu(ad.add(ad.matmul(z, self.params["dec_in_w"]), self.params["dec_in_b"]))
        flat = ad.add(ad.matmul(hidden, self.params["dec_expand_w"]), self.params["dec_expand_b"])
        x = ad.reshape(flat, (z.shape[0], self.coarse_size, cfg.channels[-1]))
        levels = self.hierarchy.levels
        for layer in reversed(range(len(cfg.cheb_order))):
            x = ad.sparse_matmul(levels[layer].upsample, x)
            x = cheb_conv(x, levels[layer].scaled_laplacian, self.conv_params(f"dec_conv{layer}"))
            if layer != 0:
                x = ad.elu(x)
        return x

    # -- inference wrappers (raw model units, numpy in/out) --------------

    def normalize(self, vertices: np.ndarray) -> np.ndarray:
        return (np.asarray(vertices, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, vertices: np.ndarray) -> np.ndarray:
        return np.asarray(vertices, dtype=np.float64) * self.scale + self.center

    def _as_batch(self, vertices: np.ndarray) -> np.ndarray:
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.ndim == 2:
            vertices = vertices[None]
        if vertices.ndim != 3 or vertices.shape[1] != self.n_vertices or vertices.shape[2] != 3:
            raise ValueError(
                f"expected vertices of shape (B, {self.n_vertices}, 3) or "
                f"({self.n_vertices}, 3), got {vertices.shape}"
            )
        return vertices

    def posterior_arrays(self, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu, logvar) as float64 arrays of shape (B, d); input raw units.

        Each mesh runs through the encoder alone: BLAS kernels differ by
        batch shape, so per-mesh encoding keeps a mesh's code bitwise
        identical no matter what batch it arrives in (duplicate gallery
        entries tie exactly, self-transfer equals plain reconstruction).
        """
        batch = self.normalize(self._as_batch(vertices)).astype(self.dtype)
        mus, logvars = [], []
        for row in batch:
            post = self.encode_t(ad.constant(row[None]))
            mus.append(post.mu.values[0])
            logvars.append(post.logvar.values[0])
        return (
            np.stack(mus).astype(np.float64),
            np.stack(logvars).astype(np.float64),
        )

    def mean_codes(self, vertices: np.ndarray) -> np.ndarray:
        mu, _ = self.posterior_arrays(vertices)
        return mu

    def mean_code(self, vertices: np.ndarray) -> LatentCode:
        mu = self.mean_codes(vertices)
        return LatentCode.from_full(mu[0], self.config.d_shape)

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None]
        out = self.decode_t(ad.constant(z.astype(self.dtype)))
        return self.denormalize(out.values.astype(np.float64))

    def decode_code(self, code: LatentCode) -> np.ndarray:
        return self.decode_batch(code.full()[None])[0]

    def reconstruct(self, vertices: np.ndarray) -> np.ndarray:
        """Mean-latent reconstruction; accepts (N, 3) or (B, N, 3) raw units."""
        decoded = self.decode_batch(self.mean_codes(vertices))
        return decoded[0] if np.asarray(vertices).ndim == 2 else decoded

    def parameter_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, param in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(param.values).tobytes())
        h.update(self.center.tobytes())
        h.update(np.float64(self.scale).tobytes())
        h.update(self.hierarchy.fingerprint().encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# VAE pieces
# ---------------------------------------------------------------------------


def reparameterize(post: GaussianPosterior, noise) -> DiffTensor:
    """z = mu + exp(logvar / 2) * eps, elementwise over the batch."""
    eps = noise if isinstance(noise, DiffTensor) else ad.constant(np.asarray(noise, dtype=post.mu.dtype))
    if eps.shape != post.mu.shape:
        raise ad.ShapeMismatchError(
            f"reparameterize: noise shape {eps.shape} vs posterior shape {post.mu.shape}"
        )
    std = ad.exp(ad.multiply(post.logvar, ad.constant(np.asarray(0.5, dtype=post.logvar.dtype))))
    return ad.add(post.mu, ad.multiply(std, eps))


def split_code(z: DiffTensor, d_shape: int) -> tuple[DiffTensor, DiffTensor]:
    return z[:, :d_shape], z[:, d_shape:]


def kl_divergence(post: GaussianPosterior) -> DiffTensor:
    """KL(q || N(0, I)) = -1/2 sum_i (1 + logvar_i - mu_i^2 - exp(logvar_i)).

    Returns a scalar for a single posterior (1-D mu) or a (B,) vector for a
    batch; nonnegative and differentiable either way.
    """
    mu, logvar = post.mu, post.logvar
    one = ad.constant(np.asarray(1.0, dtype=mu.dtype))
    half = ad.constant(np.asarray(-0.5, dtype=mu.dtype))
    inner = ad.subtract(ad.subtract(ad.add(one, logvar), ad.multiply(mu, mu)), ad.exp(logvar))
    summed = ad.sum(inner, axis=-1) if mu.ndim > 1 else ad.sum(inner)
    return ad.multiply(summed, half)


def l1_reconstruction(predicted: DiffTensor, target: DiffTensor) -> DiffTensor:
    """Mean absolute coordinate error (normalized units)."""
    return ad.mean(ad.absolute(ad.subtract(predicted, target)))


def cross_covariance_penalty(z_shape: DiffTensor, z_pose: DiffTensor) -> DiffTensor:
    """Squared Frobenius norm of the batch cross-covariance between the
    centered subspaces, divided by batch size."""
    batch = z_shape.shape[0]
    inv_b = ad.constant(np.asarray(1.0 / batch, dtype=z_shape.dtype))
    zs = ad.subtract(z_shape, ad.mean(z_shape, axis=0))
    zp = ad.subtract(z_pose, ad.mean(z_pose, axis=0))
    cov = ad.multiply(ad.matmul(ad.transpose(zs), zp), inv_b)
    return ad.multiply(ad.sum(ad.multiply(cov, cov)), inv_b)


# ---------------------------------------------------------------------------
# Paired batches and the training objective
# ---------------------------------------------------------------------------


@dataclass
class PairBatch:
    """Pre-normalized paired training batch.

    Meshes are stacked in block order [A, B, C, D]: (A, B) are same-subject
    pairs (shape identical, pose differs), (C, D) same-pose pairs (subjects
    differ, pose identical). `noise` holds the reparameterization draws for
    the whole stack so the objective is a pure function of the batch.
    """

    same_subject_a: np.ndarray  # (P1, N, 3)
    same_subject_b: np.ndarray
    same_pose_c: np.ndarray  # (P2, N, 3)
    same_pose_d: np.ndarray
    shape_targets: np.ndarray  # (B, 2 * SEGMENTS) normalized
    pose_targets: np.ndarray  # (B, JOINTS) normalized
    noise: np.ndarray  # (B, latent_dim)

    def __post_init__(self):
        if len(self.same_subject_a) != len(self.same_subject_b):
            raise ValueError("same-subject blocks disagree in size")
        if len(self.same_pose_c) != len(self.same_pose_d):
            raise ValueError("same-pose blocks disagree in size")
        if len(self.same_subject_a) == 0 or len(self.same_pose_c) == 0:
            raise ValueError("batch needs at least one pair of each type")

    @property
    def size(self) -> int:
        return 2 * (len(self.same_subject_a) + len(self.same_pose_c))

    def stacked(self) -> np.ndarray:
        return np.concatenate(
            [self.same_subject_a, self.same_subject_b, self.same_pose_c, self.same_pose_d]
        )


@dataclass
class LossBreakdown:
    total: float
    recon: float
    kl: float
    swap: float
    reg: float
    xcov: float
    beta: float

    def to_dict(self) -> dict:
        return {
            "loss_total": self.total,
            "loss_recon": self.recon,
            "loss_kl": self.kl,
            "loss_swap": self.swap,
            "loss_reg": self.reg,
            "loss_xcov": self.xcov,
            "beta": self.beta,
        }


def beta_schedule(epoch: int, warmup_epochs: int) -> float:
    """KL weight warmup: 0 at epoch 0, linear to 1 over the warmup span."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def _block_slices(batch: PairBatch) -> tuple[slice, slice, slice, slice]:
    p1 = len(batch.same_subject_a)
    p2 = len(batch.same_pose_c)
    return (
        slice(0, p1),
        slice(p1, 2 * p1),
        slice(2 * p1, 2 * p1 + p2),
        slice(2 * p1 + p2, 2 * p1 + 2 * p2),
    )


def disentangle_losses(
    batch: PairBatch, model: MeshVAE
) -> tuple[DiffTensor, DiffTensor, DiffTensor]:
    """(swap, reg, xcov) losses at posterior means; see the module docstring."""
    x = ad.constant(batch.stacked().astype(model.dtype))
    post = model.encode_t(x)
    return _disentangle_from_posterior(batch, model, x, post)


def _disentangle_from_posterior(batch, model, x, post):
    d_s = model.config.d_shape
    mu_s, mu_p = split_code(post.mu, d_s)
    sl_a, sl_b, sl_c, sl_d = _block_slices(batch)

    # swap: [shape(A), pose(B)] -> B and [shape(C), pose(D)] -> C
    z_swap_ab = ad.concat([mu_s[sl_a], mu_p[sl_b]], axis=1)
    z_swap_cd = ad.concat([mu_s[sl_c], mu_p[sl_d]], axis=1)
    decoded = model.decode_t(ad.concat([z_swap_ab, z_swap_cd], axis=0))
    targets = ad.constant(
        np.concatenate([batch.same_subject_b, batch.same_pose_c]).astype(model.dtype)
    )
    swap = l1_reconstruction(decoded, targets)

    # factor regression from the matching subspace only
    pred_shape = ad.add(ad.matmul(mu_s, model.params["reg_shape_w"]), model.params["reg_shape_b"])
    pred_pose = ad.add(ad.matmul(mu_p, model.params["reg_pose_w"]), model.params["reg_pose_b"])
    t_shape = ad.constant(batch.shape_targets.astype(model.dtype))
    t_pose = ad.constant(batch.pose_targets.astype(model.dtype))
    mse_shape = ad.mean(ad.multiply(ad.subtract(pred_shape, t_shape), ad.subtract(pred_shape, t_shape)))
    mse_pose = ad.mean(ad.multiply(ad.subtract(pred_pose, t_pose), ad.subtract(pred_pose, t_pose)))
    reg = ad.multiply(ad.add(mse_shape, mse_pose), ad.constant(np.asarray(0.5, dtype=model.dtype)))

    xcov = cross_covariance_penalty(mu_s, mu_p)
    return swap, reg, xcov


def total_loss(
    batch: PairBatch, model: MeshVAE, config: ModelConfig, epoch: int
) -> tuple[DiffTensor, LossBreakdown]:
    """Weighted objective with its per-term breakdown.

    The KL term is averaged per latent dimension (not summed) so the
    default weights keep every term at a comparable magnitude on this
    dataset; beta warms the KL in linearly over `beta_warmup_epochs`.
    """
    x = ad.constant(batch.stacked().astype(model.dtype))
    post = model.encode_t(x)

    z = reparameterize(post, batch.noise.astype(model.dtype))
    recon = l1_reconstruction(model.decode_t(z), x)

    kl_per_sample = kl_divergence(post)
    kl = ad.multiply(
        ad.mean(kl_per_sample), ad.constant(np.asarray(1.0 / config.latent_dim, dtype=model.dtype))
    )

    swap, reg, xcov = _disentangle_from_posterior(batch, model, x, post)

    beta = beta_schedule(epoch, config.beta_warmup_epochs)
    dtype = model.dtype
    total = ad.multiply(recon, ad.constant(np.asarray(config.w_recon, dtype=dtype)))
    total = ad.add(total, ad.multiply(kl, ad.constant(np.asarray(config.w_kl * beta, dtype=dtype))))
    total = ad.add(total, ad.multiply(swap, ad.constant(np.asarray(config.w_swap, dtype=dtype))))
    total = ad.add(total, ad.multiply(reg, ad.constant(np.asarray(config.w_reg, dtype=dtype))))
    total = ad.add(total, ad.multiply(xcov, ad.constant(np.asarray(config.w_xcov, dtype=dtype))))
    breakdown = LossBreakdown(
        total=total.item(),
        recon=recon.item(),
        kl=kl.item(),
        swap=swap.item(),
        reg=reg.item(),
        xcov=xcov.item(),
        beta=beta,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# Factor normalization (targets for the regression heads and probes)
# ---------------------------------------------------------------------------


def normalized_shape_vector(shape: ShapeParams) -> np.ndarray:
    radii = (np.asarray(shape.segment_radii) - RADIUS_RANGE[0]) / (RADIUS_RANGE[1] - RADIUS_RANGE[0])
    lengths = (np.asarray(shape.segment_lengths) - LENGTH_RANGE[0]) / (
        LENGTH_RANGE[1] - LENGTH_RANGE[0]
    )
    return np.concatenate([radii, lengths])


def normalized_pose_vector(pose: PoseParams) -> np.ndarray:
    angles = np.asarray(pose.joint_angles)
    return (angles - ANGLE_RANGE[0]) / (ANGLE_RANGE[1] - ANGLE_RANGE[0])
