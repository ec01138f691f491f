"""The MVPConv block: an initializing voxel-point neuron feeding a
transmission voxel-point neuron, with selectable output aggregation.

Each neuron pairs a voxel branch (scatter-mean voxelization, a stack of
3x3x3 convolutions each followed by batch norm and leaky ReLU, trilinear
devoxelization) with a point branch (shared pointwise MLP, batch norm,
ReLU).  The transmission neuron consumes the elementwise sum of the
initializing outputs and may prepend a 1x1x1 convolution that mixes
channels before the 3x3x3 stack.  The block output is the elementwise sum
of a configurable subset of {V1, P1, V2, P2}; the default keeps V1, V2 and
P2.

Coordinates are normalized and scaled to the grid once per forward and
shared by both neurons; they are constants as far as gradients go.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array, Tensor, elementwise_add
from .errors import ConfigError, ContractViolation
from .layers import (
    BatchNormParams,
    Conv3dParams,
    PointwiseMlpParams,
    batchnorm,
    conv3d,
    leaky_relu,
    pointwise_mlp,
    relu,
)
from .pointcloud import PointCloud, normalize_points, scale_to_grid
from .voxel import VoxelGrid, devoxelize, voxelize

# Output aggregation variants: which neuron outputs are summed.
VARIANTS: dict[str, tuple[str, ...]] = {
    "A": ("v2",),
    "B": ("v1", "p1"),
    "C": ("p1", "v2"),
    "D": ("v2", "p2"),
    "E": ("v1", "p1", "v2"),
    "F": ("p1", "v2", "p2"),
    "G": ("v1", "v2", "p2"),
    "H": ("v1", "p1", "v2", "p2"),
}


def variant_needs_transmission(variant: str) -> bool:
    members = VARIANTS.get(variant)
    if members is None:
        raise ConfigError(f"unknown aggregation variant {variant!r}")
    return "v2" in members or "p2" in members


@dataclass
class MVPConvConfig:
    c_in: int
    c_out: int
    resolution: int
    leaky_slope: float = 0.1
    use_1x1_conv: bool = True
    conv3d_depth: int = 2
    variant: str = "G"
    transmission_enabled: bool = True

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.resolution < 2:
            raise ConfigError(f"resolution must be >= 2, got {self.resolution}")
        if self.conv3d_depth < 1:
            raise ConfigError("conv3d_depth must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown aggregation variant {self.variant!r}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must be in [0, 1)")


@dataclass
class NeuronOutput:
    """Branch outputs, all [B, c_out, N]; v2/p2 absent without transmission."""

    v1: Tensor
    p1: Tensor
    v2: Tensor | None = None
    p2: Tensor | None = None

    def member(self, name: str) -> Tensor:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(
                f"aggregation needs {name} but the transmission neuron is disabled"
            )
        return value


def aggregate_features(out: NeuronOutput, variant: str) -> Tensor:
    """Elementwise sum of the variant's selected subset, in v1,p1,v2,p2 order."""
    members = VARIANTS.get(variant)
    if members is None:
        raise ConfigError(f"unknown aggregation variant {variant!r}")
    selected = [out.member(name) for name in members]
    total = selected[0]
    for t in selected[1:]:
        total = elementwise_add(total, t)
    return total


class MVPConvBlock:
    """One MVPConv layer: parameters plus the forward map."""

    def __init__(self, cfg: MVPConvConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        c_in, c_out = cfg.c_in, cfg.c_out

        self.init_convs = []
        for d in range(cfg.conv3d_depth):
            self.init_convs.append(
                (
                    Conv3dParams.create(c_in if d == 0 else c_out, c_out, 3, rng, dtype),
                    BatchNormParams.create(c_out, dtype=dtype),
                )
            )
        self.init_mlp = PointwiseMlpParams.create(c_in, c_out, rng, dtype)
        self.init_mlp_bn = BatchNormParams.create(c_out, dtype=dtype)

        self.trans_conv1x1 = None
        self.trans_convs = []
        self.trans_mlp = None
        self.trans_mlp_bn = None
        if cfg.transmission_enabled:
            if cfg.use_1x1_conv:
                self.trans_conv1x1 = (
                    Conv3dParams.create(c_out, c_out, 1, rng, dtype),
                    BatchNormParams.create(c_out, dtype=dtype),
                )
            for _ in range(2):
                self.trans_convs.append(
                    (
                        Conv3dParams.create(c_out, c_out, 3, rng, dtype),
                        BatchNormParams.create(c_out, dtype=dtype),
                    )
                )
            self.trans_mlp = PointwiseMlpParams.create(c_out, c_out, rng, dtype)
            self.trans_mlp_bn = BatchNormParams.create(c_out, dtype=dtype)

    # -- forward ----------------------------------------------------------

    def _voxel_branch(self, features: Tensor, grid_coords: Array, stages) -> Tensor:
        grid = voxelize(grid_coords, features, self.cfg.resolution)
        h = grid.features
        for conv, bn in stages:
            h = leaky_relu(batchnorm(conv3d(h, conv), bn), self.cfg.leaky_slope)
        return devoxelize(VoxelGrid(h, self.cfg.resolution), grid_coords)

    def initializing_neuron(self, features: Tensor, grid_coords: Array):
        if features.shape[1] != self.cfg.c_in:
            raise ContractViolation(
                f"expected {self.cfg.c_in} input channels, got {features.shape[1]}"
            )
        v1 = self._voxel_branch(features, grid_coords, self.init_convs)
        p1 = relu(batchnorm(pointwise_mlp(features, self.init_mlp), self.init_mlp_bn))
        return v1, p1

    def transmission_neuron(self, v1: Tensor, p1: Tensor, grid_coords: Array):
        if not self.cfg.transmission_enabled:
            raise ConfigError("transmission neuron is disabled in this configuration")
        if v1.shape != p1.shape:
            raise ContractViolation(f"V1 shape {v1.shape} != P1 shape {p1.shape}")
        fused = elementwise_add(v1, p1)
        stages = ([self.trans_conv1x1] if self.trans_conv1x1 else []) + self.trans_convs
        v2 = self._voxel_branch(fused, grid_coords, stages)
        p2 = relu(batchnorm(pointwise_mlp(fused, self.trans_mlp), self.trans_mlp_bn))
        return v2, p2

    def forward(self, features: Tensor, grid_coords: Array) -> Tensor:
        """Run both neurons on precomputed grid coordinates and aggregate."""
        v1, p1 = self.initializing_neuron(features, grid_coords)
        out = NeuronOutput(v1, p1)
        if self.cfg.transmission_enabled:
            out.v2, out.p2 = self.transmission_neuron(v1, p1, grid_coords)
        return aggregate_features(out, self.cfg.variant)

    def forward_cloud(self, cloud: PointCloud) -> Tensor:
        """Normalize positions, scale to the grid, and run the block."""
        coords = scale_to_grid(normalize_points(cloud.positions), self.cfg.resolution)
        features = cloud.features
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.dtype))
        return self.forward(features, coords)

    # -- parameters -------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, (conv, bn) in enumerate(self.init_convs):
            named[f"{prefix}init.conv{i}.weight"] = conv.weight
            named[f"{prefix}init.conv{i}.bias"] = conv.bias
            named[f"{prefix}init.conv{i}.bn.gamma"] = bn.gamma
            named[f"{prefix}init.conv{i}.bn.beta"] = bn.beta
        named[f"{prefix}init.mlp.weight"] = self.init_mlp.weight
        named[f"{prefix}init.mlp.bias"] = self.init_mlp.bias
        named[f"{prefix}init.mlp.bn.gamma"] = self.init_mlp_bn.gamma
        named[f"{prefix}init.mlp.bn.beta"] = self.init_mlp_bn.beta
        if self.trans_conv1x1 is not None:
            conv, bn = self.trans_conv1x1
            named[f"{prefix}trans.conv1x1.weight"] = conv.weight
            named[f"{prefix}trans.conv1x1.bias"] = conv.bias
            named[f"{prefix}trans.conv1x1.bn.gamma"] = bn.gamma
            named[f"{prefix}trans.conv1x1.bn.beta"] = bn.beta
        for i, (conv, bn) in enumerate(self.trans_convs):
            named[f"{prefix}trans.conv{i}.weight"] = conv.weight
            named[f"{prefix}trans.conv{i}.bias"] = conv.bias
            named[f"{prefix}trans.conv{i}.bn.gamma"] = bn.gamma
            named[f"{prefix}trans.conv{i}.bn.beta"] = bn.beta
        if self.trans_mlp is not None:
            named[f"{prefix}trans.mlp.weight"] = self.trans_mlp.weight
            named[f"{prefix}trans.mlp.bias"] = self.trans_mlp.bias
            named[f"{prefix}trans.mlp.bn.gamma"] = self.trans_mlp_bn.gamma
            named[f"{prefix}trans.mlp.bn.beta"] = self.trans_mlp_bn.beta
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def batchnorms(self) -> list[BatchNormParams]:
        bns = [bn for _, bn in self.init_convs] + [self.init_mlp_bn]
        if self.trans_conv1x1 is not None:
            bns.append(self.trans_conv1x1[1])
        bns.extend(bn for _, bn in self.trans_convs)
        if self.trans_mlp_bn is not None:
            bns.append(self.trans_mlp_bn)
        return bns

    def set_training(self, training: bool) -> None:
        for bn in self.batchnorms():
            bn.training = training

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def expected_parameter_count(cfg: MVPConvConfig) -> int:
    """Analytic learnable-parameter count for one block.

    conv3x3(cin, cout) = 27*cin*cout + cout; conv1x1(c, c) = c*c + c;
    mlp(cin, cout) = cin*cout + cout; every conv and mlp carries a batch
    norm with 2*cout learnables.  The initializing branch holds one
    cin->cout conv plus depth-1 cout->cout convs and the mlp; transmission
    (when enabled) adds the optional 1x1x1 conv, two cout->cout convs and
    its own mlp.
    """
    cin, cout = cfg.c_in, cfg.c_out
    conv3 = lambda a, b: 27 * a * b + b + 2 * b
    conv1 = lambda a, b: a * b + b + 2 * b
    mlp = lambda a, b: a * b + b + 2 * b
    total = conv3(cin, cout) + (cfg.conv3d_depth - 1) * conv3(cout, cout)
    total += mlp(cin, cout)
    if cfg.transmission_enabled:
        if cfg.use_1x1_conv:
            total += conv1(cout, cout)
        total += 2 * conv3(cout, cout)
        total += mlp(cout, cout)
    return total


def mvpconv_forward(block: MVPConvBlock, cloud: PointCloud) -> Tensor:
    """Full block on a point cloud; positions pass through unchanged."""
    return block.forward_cloud(cloud)
