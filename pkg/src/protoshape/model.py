"""The completion network and its checkpoints.

Pipeline: a point feature extractor distills a partial cloud into a
global feature vector; a shape generator expands it into per-vertex
coarse and dense features (the dense branch folds a unit-sphere seed
and the matching coarse feature into every fine vertex); a refiner
gates the features through a sigmoid and multiplies them elementwise
with trainable icosphere prototype vertices, yielding coarse and fine
output meshes that reuse the prototype face structure.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geom, ndiff
from .errors import CheckpointError, DimensionError, NumericError, ParameterError
from .geom import MeshTopology, PointCloud
from .ndiff import BatchNormState, DiffArray
from .objective import DiffMesh

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `extractor_blocks` lists (mid, out) channel widths per block; block
    k+1 consumes the concatenation of block k's output with its pooled
    global vector, so its input width is 2*out_k (block 0 consumes raw
    xyz).  The final block's output width must equal `global_dim`.
    """

    n_input: int = 2048
    global_dim: int = 2048
    extractor_blocks: tuple = ((64, 128), (256, 512), (1024, 2048))
    coarse_hidden: tuple = (1024, 1024)
    dense_hidden: tuple = (512, 256)
    coarse_level: int = 2
    fine_level: int = 4
    radius: float = 0.05
    use_prototypes: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.extractor_blocks = tuple(tuple(b) for b in self.extractor_blocks)
        self.coarse_hidden = tuple(self.coarse_hidden)
        self.dense_hidden = tuple(self.dense_hidden)
        if self.n_input < 2:
            raise ParameterError(f"n_input must be >= 2, got {self.n_input}")
        if self.global_dim < 1:
            raise ParameterError(f"global_dim must be positive, got {self.global_dim}")
        if not self.extractor_blocks:
            raise ParameterError("extractor needs at least one block")
        widths = [w for b in self.extractor_blocks for w in b]
        widths += list(self.coarse_hidden) + list(self.dense_hidden)
        if any(int(w) < 1 for w in widths):
            raise ParameterError("all channel widths must be positive")
        if self.extractor_blocks[-1][1] != self.global_dim:
            raise ParameterError(
                f"last extractor block must output global_dim={self.global_dim}, "
                f"got {self.extractor_blocks[-1][1]}"
            )
        if not 0 <= self.coarse_level < self.fine_level <= geom.MAX_SUBDIV_LEVEL:
            raise ParameterError(
                f"need 0 <= coarse_level < fine_level <= {geom.MAX_SUBDIV_LEVEL}, "
                f"got {self.coarse_level}/{self.fine_level}"
            )
        if self.radius <= 0:
            raise ParameterError(f"prototype radius must be positive, got {self.radius}")

    @property
    def n_coarse(self) -> int:
        return 10 * 4 ** self.coarse_level + 2

    @property
    def n_fine(self) -> int:
        return 10 * 4 ** self.fine_level + 2

    def block_input_widths(self) -> list:
        widths = [3]
        for _, out in self.extractor_blocks[:-1]:
            widths.append(2 * out)
        return widths

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Gradient-check scale: levels 0/2, 64 input points, narrow channels."""
        return cls(n_input=64, global_dim=32,
                   extractor_blocks=((8, 16), (16, 32)),
                   coarse_hidden=(24, 24), dense_hidden=(16, 8),
                   coarse_level=0, fine_level=2)

    @classmethod
    def small(cls) -> "ModelConfig":
        return cls(n_input=256, global_dim=128,
                   extractor_blocks=((16, 32), (48, 64), (96, 128)),
                   coarse_hidden=(96, 96), dense_hidden=(64, 32),
                   coarse_level=1, fine_level=3)

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-resolution prototypes (10242 / 163842 vertices)."""
        return cls(coarse_level=5, fine_level=7)

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input, "global_dim": self.global_dim,
            "extractor_blocks": [list(b) for b in self.extractor_blocks],
            "coarse_hidden": list(self.coarse_hidden),
            "dense_hidden": list(self.dense_hidden),
            "coarse_level": self.coarse_level, "fine_level": self.fine_level,
            "radius": self.radius, "use_prototypes": self.use_prototypes,
            "bn_momentum": self.bn_momentum, "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ParameterError(f"bad model config: {e}") from e


@dataclass
class Checkpoint:
    """Named parameter arrays (weights, batchnorm stats, prototype vertices)."""

    config: ModelConfig
    arrays: dict
    format_version: int = CHECKPOINT_FORMAT_VERSION


def _expected_arrays(config: ModelConfig) -> dict:
    """Name -> shape for every array the architecture requires, in order."""
    spec: dict = {}
    in_w = config.block_input_widths()
    for k, (mid, out) in enumerate(config.extractor_blocks):
        p = f"extractor.block{k}"
        spec[f"{p}.conv1.weight"] = (mid, in_w[k])
        spec[f"{p}.conv1.bias"] = (mid,)
        spec[f"{p}.bn.gamma"] = (mid,)
        spec[f"{p}.bn.beta"] = (mid,)
        spec[f"{p}.bn.running_mean"] = (mid,)
        spec[f"{p}.bn.running_var"] = (mid,)
        spec[f"{p}.conv2.weight"] = (out, mid)
        spec[f"{p}.conv2.bias"] = (out,)
    dims = (config.global_dim,) + tuple(config.coarse_hidden) + (config.n_coarse * 3,)
    for j in range(len(dims) - 1):
        spec[f"generator.coarse.lin{j}.weight"] = (dims[j + 1], dims[j])
        spec[f"generator.coarse.lin{j}.bias"] = (dims[j + 1],)
    dense_dims = (6 + config.global_dim,) + tuple(config.dense_hidden) + (3,)
    for j in range(len(dense_dims) - 1):
        p = f"generator.dense.conv{j}"
        spec[f"{p}.weight"] = (dense_dims[j + 1], dense_dims[j])
        spec[f"{p}.bias"] = (dense_dims[j + 1],)
        if j < len(dense_dims) - 2:  # the last conv emits raw gate logits
            spec[f"generator.dense.bn{j}.gamma"] = (dense_dims[j + 1],)
            spec[f"generator.dense.bn{j}.beta"] = (dense_dims[j + 1],)
            spec[f"generator.dense.bn{j}.running_mean"] = (dense_dims[j + 1],)
            spec[f"generator.dense.bn{j}.running_var"] = (dense_dims[j + 1],)
    if config.use_prototypes:
        spec["prototype.coarse"] = (config.n_coarse, 3)
        spec["prototype.fine"] = (config.n_fine, 3)
    return spec


def init_params(config: ModelConfig, seed: int = 0) -> Checkpoint:
    """Fan-in-scaled uniform initialization; prototypes start as icospheres."""
    rng = np.random.default_rng(seed)
    arrays: dict = {}
    for name, shape in _expected_arrays(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("gamma", "running_var"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("beta", "running_mean"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        elif name == "prototype.coarse":
            arrays[name] = geom.icosphere(config.coarse_level, config.radius).base.vertices.copy()
        elif name == "prototype.fine":
            arrays[name] = geom.icosphere(config.fine_level, config.radius).base.vertices.copy()
        elif leaf == "weight":
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf == "bias":
            fan_in = _expected_arrays(config)[name.replace(".bias", ".weight")][1]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            raise CheckpointError(f"unhandled parameter {name}")
    return Checkpoint(config, arrays)


def save_checkpoint(ckpt: Checkpoint, dir_path: str) -> None:
    """Write manifest.json plus raw little-endian float32 weights.bin."""
    os.makedirs(dir_path, exist_ok=True)
    descriptors = []
    offset = 0
    blobs = []
    for name, arr in ckpt.arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append({"name": name, "shape": list(arr.shape),
                            "offset": offset, "length": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "arrays": descriptors,
    }
    with open(os.path.join(dir_path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(dir_path, "weights.bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(dir_path: str) -> Checkpoint:
    manifest_path = os.path.join(dir_path, "manifest.json")
    weights_path = os.path.join(dir_path, "weights.bin")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"{manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: invalid JSON ({e})") from e
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{manifest_path}: format version {manifest.get('format_version')} "
            f"!= supported {CHECKPOINT_FORMAT_VERSION}"
        )
    config = ModelConfig.from_dict(manifest["config"])
    try:
        blob = open(weights_path, "rb").read()
    except OSError as e:
        raise CheckpointError(f"{weights_path}: {e}") from e
    arrays: dict = {}
    total = 0
    for d in manifest["arrays"]:
        shape = tuple(d["shape"])
        length = int(d["length"])
        offset = int(d["offset"])
        if length != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{manifest_path}: descriptor {d['name']} is inconsistent")
        if offset + length > len(blob):
            raise CheckpointError(
                f"{weights_path}: truncated ({len(blob)} bytes, need {offset + length} "
                f"for {d['name']})"
            )
        arrays[d["name"]] = np.frombuffer(
            blob, dtype="<f4", count=length // 4, offset=offset
        ).reshape(shape).copy()
        total = max(total, offset + length)
    if total != len(blob):
        raise CheckpointError(f"{weights_path}: size mismatch with manifest")
    return Checkpoint(config, arrays)


@dataclass
class ForwardResult:
    """Everything one forward pass produces, with differentiable leaves."""

    global_features: DiffArray
    coarse_features: DiffArray
    dense_features: DiffArray
    coarse: DiffMesh
    fine: DiffMesh

    def coarse_cloud(self) -> PointCloud:
        return PointCloud(self.coarse.vertices.data.astype(np.float32))

    def fine_cloud(self) -> PointCloud:
        return PointCloud(self.fine.vertices.data.astype(np.float32))


class Model:
    """Checkpointable network with train/eval modes.

    Inference on a fixed parameter set is deterministic; training mode
    additionally updates the batchnorm running statistics.
    """

    def __init__(self, ckpt: Checkpoint):
        self.config = ckpt.config
        expected = _expected_arrays(self.config)
        names = list(ckpt.arrays.keys())
        if names != list(expected.keys()):
            raise CheckpointError(
                "checkpoint arrays do not match the architecture "
                f"(got {len(names)}, expected {len(expected)})"
            )
        for name, shape in expected.items():
            if tuple(ckpt.arrays[name].shape) != shape:
                raise CheckpointError(
                    f"array {name} has shape {tuple(ckpt.arrays[name].shape)}, expected {shape}"
                )
        self.params: dict = {}
        self.bn_states: dict = {}
        for name, arr in ckpt.arrays.items():
            leaf = name.rsplit(".", 1)[1]
            if leaf in ("running_mean", "running_var"):
                key = name.rsplit(".", 1)[0]
                st = self.bn_states.setdefault(
                    key, BatchNormState.create(arr.shape[0], self.config.bn_momentum,
                                               self.config.bn_eps))
                if leaf == "running_mean":
                    st.running_mean = arr.astype(np.float32).copy()
                else:
                    st.running_var = arr.astype(np.float32).copy()
            else:
                self.params[name] = DiffArray(arr.astype(np.float32).copy(),
                                              requires_grad=True)
        self.training = False

        cfg = self.config
        coarse_proto = geom.icosphere(cfg.coarse_level, cfg.radius)
        fine_proto = geom.icosphere(cfg.fine_level, cfg.radius)
        self.parent = geom.parent_map(coarse_proto, fine_proto)
        # unit-sphere fold seed: structural coordinates of the fine vertices
        self.seed_cols = np.ascontiguousarray(
            (fine_proto.base.vertices / cfg.radius).T.astype(np.float32))
        self.coarse_topology = MeshTopology(coarse_proto.base.faces, cfg.n_coarse)
        self.fine_topology = MeshTopology(fine_proto.base.faces, cfg.n_fine)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(init_params(config, seed))

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> dict:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def to_checkpoint(self) -> Checkpoint:
        arrays: dict = {}
        for name in _expected_arrays(self.config):
            leaf = name.rsplit(".", 1)[1]
            if leaf == "running_mean":
                arrays[name] = self.bn_states[name.rsplit(".", 1)[0]].running_mean.copy()
            elif leaf == "running_var":
                arrays[name] = self.bn_states[name.rsplit(".", 1)[0]].running_var.copy()
            else:
                arrays[name] = self.params[name].data.copy()
        return Checkpoint(self.config, arrays)

    # -- pipeline stages ----------------------------------------------------

    def _conv_bn_relu(self, x: DiffArray, prefix: str, bn_key: str) -> DiffArray:
        h = ndiff.pointwise_mlp(x, self.params[f"{prefix}.weight"],
                                self.params[f"{prefix}.bias"])
        h = ndiff.batchnorm1d(h, self.params[f"{bn_key}.gamma"],
                              self.params[f"{bn_key}.beta"],
                              self.bn_states[bn_key], self.training)
        return ndiff.relu(h)

    def extract_features(self, points) -> DiffArray:
        """Global feature vector of a partial cloud (any point count >= 2).

        Exactly permutation- and duplication-invariant in eval mode: all
        per-point stages act column-wise and the pooling is an exact max.
        """
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionError(f"expected an (N,3) cloud, got {pts.shape}")
        if pts.shape[0] < 2:
            raise DimensionError("feature extraction needs at least 2 points")
        n = pts.shape[0]
        x = ndiff.asdiff(np.ascontiguousarray(pts.T, dtype=np.float32))
        n_blocks = len(self.config.extractor_blocks)
        for k in range(n_blocks):
            p = f"extractor.block{k}"
            h = self._conv_bn_relu(x, f"{p}.conv1", f"{p}.bn")
            h = ndiff.pointwise_mlp(h, self.params[f"{p}.conv2.weight"],
                                    self.params[f"{p}.conv2.bias"])
            pooled = ndiff.maxpool_points(h)
            if k + 1 < n_blocks:
                x = ndiff.concat([ndiff.tile(pooled, n, axis=1), h], axis=0)
            else:
                return pooled
        raise AssertionError("unreachable")

    def generate_shapes(self, v: DiffArray):
        """Expand global features into coarse and dense per-vertex features.

        The dense branch feeds each fine vertex its unit-sphere seed
        coordinate, the coarse feature of its nearest coarse vertex, and
        the global vector, through the final convolutional stage.
        """
        if not np.isfinite(v.data).all():
            raise NumericError("non-finite global features")
        cfg = self.config
        z = ndiff.reshape(v, (cfg.global_dim, 1))
        n_lin = len(cfg.coarse_hidden) + 1
        for j in range(n_lin):
            z = ndiff.pointwise_mlp(z, self.params[f"generator.coarse.lin{j}.weight"],
                                    self.params[f"generator.coarse.lin{j}.bias"])
            if j + 1 < n_lin:
                z = ndiff.relu(z)
        c = ndiff.reshape(z, (cfg.n_coarse, 3))

        parent_cols = ndiff.transpose(ndiff.gather_rows(c, self.parent))
        cols = ndiff.concat([
            ndiff.asdiff(self.seed_cols),
            parent_cols,
            ndiff.tile(v, cfg.n_fine, axis=1),
        ], axis=0)
        h = cols
        n_conv = len(cfg.dense_hidden) + 1
        for j in range(n_conv):
            if j + 1 < n_conv:
                h = self._conv_bn_relu(h, f"generator.dense.conv{j}", f"generator.dense.bn{j}")
            else:
                h = ndiff.pointwise_mlp(h, self.params[f"generator.dense.conv{j}.weight"],
                                        self.params[f"generator.dense.conv{j}.bias"])
        d = ndiff.transpose(h)
        return c, d

    def refine(self, c: DiffArray, d: DiffArray):
        """Gate features through a sigmoid and scale the prototype vertices.

        Without prototypes (ablation), the raw features are the output
        coordinates directly.
        """
        cfg = self.config
        if c.shape != (cfg.n_coarse, 3) or d.shape != (cfg.n_fine, 3):
            raise DimensionError(
                f"refine expects ({cfg.n_coarse},3) and ({cfg.n_fine},3), "
                f"got {c.shape} and {d.shape}"
            )
        if not cfg.use_prototypes:
            return c, d
        y_c = ndiff.elementwise_mul(ndiff.sigmoid(c), self.params["prototype.coarse"])
        y_d = ndiff.elementwise_mul(ndiff.sigmoid(d), self.params["prototype.fine"])
        return y_c, y_d

    def forward(self, points) -> ForwardResult:
        """extract -> generate -> refine; output meshes reuse prototype faces."""
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
        if pts.shape[0] != self.config.n_input:
            raise DimensionError(
                f"forward expects exactly {self.config.n_input} points, got {pts.shape[0]}"
            )
        v = self.extract_features(pts)
        c, d = self.generate_shapes(v)
        y_c, y_d = self.refine(c, d)
        return ForwardResult(
            global_features=v, coarse_features=c, dense_features=d,
            coarse=DiffMesh(y_c, self.coarse_topology),
            fine=DiffMesh(y_d, self.fine_topology),
        )
