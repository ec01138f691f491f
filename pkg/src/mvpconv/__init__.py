"""Point-voxel convolution blocks with a desk-scale training and ablation
harness, built on a minimal reverse-mode tape."""

from .autodiff import (
    Tape,
    Tensor,
    backward_pass,
    elementwise_add,
    finite_diff_grad,
    max_rel_error,
    parameter,
)
from .block import (
    MVPConvBlock,
    MVPConvConfig,
    NeuronOutput,
    aggregate_features,
    expected_parameter_count,
    mvpconv_forward,
    variant_needs_transmission,
)
from .pointcloud import (
    PointCloud,
    generate_synthetic,
    normalize_points,
    read_cloud,
    scale_to_grid,
    stack_clouds,
    write_cloud,
)
from .voxel import TrilinearStencil, VoxelGrid, devoxelize, trilinear_stencil, voxelize

__version__ = "0.1.0"
