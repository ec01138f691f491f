"""Per-point segmentation backbone built from MVPConv blocks, the training
loop, and the evaluation metrics.

The backbone follows the classic per-point segmentation pattern: a stack of
MVPConv blocks, the outputs of every block concatenated with a broadcast
global max-pooled feature, then a pointwise classifier head emitting
[B, K, N] logits.  Everything downstream of the blocks is pointwise, so the
whole model commutes with point permutations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward_pass
from .block import MVPConvBlock, MVPConvConfig
from .checkpoint import save_state
from .errors import ConfigError, ContractViolation, TrainingError
from .layers import (
    BatchNormParams,
    PointwiseMlpParams,
    batchnorm,
    broadcast_over_points,
    concat_channels,
    cross_entropy,
    max_over_points,
    pointwise_mlp,
    relu,
)
from .optim import AdamState, adam_step
from .pointcloud import (
    FEATURE_CHANNELS,
    PointCloud,
    generate_synthetic,
    normalize_points,
    scale_to_grid,
    stack_clouds,
)


def scaled_width(channels: int, multiplier: float) -> int:
    return max(1, round(channels * multiplier))


@dataclass
class SegModelConfig:
    blocks: list  # [(c_out, resolution), ...] before width scaling
    num_classes: int
    in_channels: int = FEATURE_CHANNELS
    width_multiplier: float = 1.0
    global_feature_dim: int = 64
    classifier_channels: list = field(default_factory=lambda: [64])
    leaky_slope: float = 0.1
    use_1x1_conv: bool = True
    conv3d_depth: int = 2
    variant: str = "G"
    transmission_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("need at least one MVPConv block")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")


class SegmentationModel:
    """MVPConv backbone plus pointwise segmentation head."""

    def __init__(self, cfg: SegModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)

        self.blocks: list[MVPConvBlock] = []
        c_in = cfg.in_channels
        for c_out, resolution in cfg.blocks:
            c_out = scaled_width(c_out, cfg.width_multiplier)
            block_cfg = MVPConvConfig(
                c_in=c_in,
                c_out=c_out,
                resolution=resolution,
                leaky_slope=cfg.leaky_slope,
                use_1x1_conv=cfg.use_1x1_conv,
                conv3d_depth=cfg.conv3d_depth,
                variant=cfg.variant,
                transmission_enabled=cfg.transmission_enabled,
            )
            self.blocks.append(MVPConvBlock(block_cfg, rng, dtype))
            c_in = c_out

        last_c = c_in
        self.global_mlp = PointwiseMlpParams.create(last_c, cfg.global_feature_dim, rng, dtype)
        self.global_bn = BatchNormParams.create(cfg.global_feature_dim, dtype=dtype)

        concat_c = sum(b.cfg.c_out for b in self.blocks) + cfg.global_feature_dim
        self.classifier: list = []
        h_in = concat_c
        for h_out in cfg.classifier_channels:
            self.classifier.append(
                (
                    PointwiseMlpParams.create(h_in, h_out, rng, dtype),
                    BatchNormParams.create(h_out, dtype=dtype),
                )
            )
            h_in = h_out
        self.head = PointwiseMlpParams.create(h_in, cfg.num_classes, rng, dtype)

    # -- forward ----------------------------------------------------------

    def forward(self, positions: np.ndarray, features, training: bool = False) -> Tensor:
        """Logits [B, K, N] from positions [B, N, 3] and features [B, C, N]."""
        self.set_training(training)
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.dtype))
        normalized = normalize_points(positions)
        n_points = positions.shape[1]

        block_outs = []
        h = features
        for block in self.blocks:
            coords = scale_to_grid(normalized, block.cfg.resolution)
            h = block.forward(h, coords)
            block_outs.append(h)

        pooled = max_over_points(block_outs[-1])
        global_feat = broadcast_over_points(pooled, n_points)
        global_feat = relu(batchnorm(pointwise_mlp(global_feat, self.global_mlp), self.global_bn))

        h = concat_channels(block_outs + [global_feat])
        for mlp, bn in self.classifier:
            h = relu(batchnorm(pointwise_mlp(h, mlp), bn))
        return pointwise_mlp(h, self.head)

    def predict(self, positions: np.ndarray, features) -> np.ndarray:
        """Per-point class predictions [B, N] in eval mode, off the tape."""
        logits = self.forward(positions, features, training=False)
        return logits.data.argmax(axis=1)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(prefix=f"block{i}."))
        named["global.mlp.weight"] = self.global_mlp.weight
        named["global.mlp.bias"] = self.global_mlp.bias
        named["global.bn.gamma"] = self.global_bn.gamma
        named["global.bn.beta"] = self.global_bn.beta
        for i, (mlp, bn) in enumerate(self.classifier):
            named[f"classifier{i}.weight"] = mlp.weight
            named[f"classifier{i}.bias"] = mlp.bias
            named[f"classifier{i}.bn.gamma"] = bn.gamma
            named[f"classifier{i}.bn.beta"] = bn.beta
        named["head.weight"] = self.head.weight
        named["head.bias"] = self.head.bias
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def batchnorms(self) -> list[BatchNormParams]:
        bns = []
        for block in self.blocks:
            bns.extend(block.batchnorms())
        bns.append(self.global_bn)
        bns.extend(bn for _, bn in self.classifier)
        return bns

    def set_training(self, training: bool) -> None:
        for bn in self.batchnorms():
            bn.training = training

    def named_batchnorms(self) -> dict[str, BatchNormParams]:
        named_p = self.named_parameters()
        by_gamma = {id(p): name for name, p in named_p.items() if name.endswith(".gamma")}
        return {
            by_gamma[id(bn.gamma)].removesuffix(".gamma"): bn for bn in self.batchnorms()
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter plus batch-norm running statistics, by name."""
        state = {name: p.data for name, p in self.named_parameters().items()}
        for name, bn in self.named_batchnorms().items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise ContractViolation(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ContractViolation(f"checkpoint shape mismatch for {name!r}")
            p.data = np.ascontiguousarray(arrays[name], dtype=self.dtype)
        for name, bn in self.named_batchnorms().items():
            bn.running_mean = np.ascontiguousarray(
                arrays[f"{name}.running_mean"], dtype=self.dtype
            )
            bn.running_var = np.ascontiguousarray(
                arrays[f"{name}.running_var"], dtype=self.dtype
            )


def build_model(cfg: SegModelConfig, dtype=np.float32) -> SegmentationModel:
    return SegmentationModel(cfg, dtype)


# --------------------------------------------------------------------------
# Metrics.


@dataclass
class EvalResult:
    miou: float
    accuracy: float
    per_class_iou: list
    shape_ious: list
    wall_time: float = 0.0


def compute_miou(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalResult:
    """Shape-averaged mean IoU plus exact-match point accuracy.

    Per cloud, the IoU of every class present in labels or predictions is
    averaged into a shape IoU; the mIoU is the mean of shape IoUs.  The
    per-class list is computed from the global confusion counts, with
    classes absent everywhere scored 1.0.
    """
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 2:
        raise ContractViolation(f"predictions {preds.shape} vs labels {labs.shape}")
    if labs.min() < 0 or labs.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ContractViolation(f"values out of range [0, {num_classes})")

    shape_ious = []
    inter_total = np.zeros(num_classes, dtype=np.int64)
    union_total = np.zeros(num_classes, dtype=np.int64)
    for b in range(labs.shape[0]):
        ious = []
        for k in range(num_classes):
            in_lab = labs[b] == k
            in_pred = preds[b] == k
            union = np.logical_or(in_lab, in_pred).sum()
            inter = np.logical_and(in_lab, in_pred).sum()
            inter_total[k] += inter
            union_total[k] += union
            if union > 0:
                ious.append(inter / union)
        shape_ious.append(float(np.mean(ious)) if ious else 1.0)

    per_class = [
        float(inter_total[k] / union_total[k]) if union_total[k] > 0 else 1.0
        for k in range(num_classes)
    ]
    accuracy = float((preds == labs).mean())
    return EvalResult(
        miou=float(np.mean(shape_ious)),
        accuracy=accuracy,
        per_class_iou=per_class,
        shape_ious=shape_ious,
    )


# --------------------------------------------------------------------------
# Training.


@dataclass
class DatasetSpec:
    kind: str = "quad"
    n_points: int = 512
    n_clouds: int = 40
    seed: int = 7


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-3
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_fraction: float = 0.2
    checkpoint_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


def split_clouds(clouds: list[PointCloud], eval_fraction: float):
    """Deterministic last-fraction eval split by cloud index."""
    n_eval = int(round(len(clouds) * eval_fraction))
    n_eval = min(max(n_eval, 0), len(clouds) - 1)
    split = len(clouds) - n_eval
    return clouds[:split], clouds[split:]


def evaluate(model: SegmentationModel, clouds: list[PointCloud], num_classes: int) -> EvalResult:
    start = time.perf_counter()
    batch = stack_clouds(clouds)
    preds = model.predict(batch.positions, batch.features)
    result = compute_miou(preds, batch.labels, num_classes)
    result.wall_time = time.perf_counter() - start
    return result


def train_loop(model: SegmentationModel, clouds: list[PointCloud], tc: TrainConfig):
    """Deterministic training given seeds; returns the per-epoch history.

    History rows are dicts with epoch, loss, miou, accuracy, seconds.  When
    ``tc.checkpoint_dir`` is set, writes best.mvpc (highest eval mIoU) and
    final.mvpc including optimizer buffers.
    """
    if any(c.labels is None for c in clouds):
        raise ContractViolation("training needs labeled clouds")
    num_classes = model.cfg.num_classes
    for c in clouds:
        if c.labels.max() >= num_classes:
            raise ContractViolation("label out of range for configured num_classes")

    train_clouds, eval_clouds = split_clouds(clouds, tc.eval_fraction)
    train_batch_all = stack_clouds(train_clouds)
    positions = train_batch_all.positions
    features = train_batch_all.features
    labels = train_batch_all.labels

    params = model.parameters()
    opt = AdamState.create(params, lr=tc.lr)
    rng = np.random.default_rng(tc.seed)
    n_train = len(train_clouds)

    history = []
    best_miou = -1.0
    ckpt_dir = None
    if tc.checkpoint_dir is not None:
        from pathlib import Path

        ckpt_dir = Path(tc.checkpoint_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def full_state():
        state = model.state_arrays()
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            state[f"adam.m.{i}"] = m
            state[f"adam.v.{i}"] = v
        state["adam.t"] = np.array(opt.t, dtype=np.int64)
        return state

    for epoch in range(tc.epochs):
        tic = time.perf_counter()
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            pos_b = positions[idx]
            feat_b = Tensor(features[idx])
            lab_b = labels[idx]
            with Tape() as tape:
                logits = model.forward(pos_b, feat_b, training=True)
                loss = cross_entropy(logits, lab_b)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // tc.batch_size}"
                )
            grads = backward_pass(tape, loss, wrt=params)
            adam_step(opt, grads)
            losses.append(loss_val)
        mean_loss = float(np.mean(losses))
        result = evaluate(model, eval_clouds, num_classes)
        seconds = time.perf_counter() - tic
        history.append(
            {
                "epoch": epoch,
                "loss": mean_loss,
                "miou": result.miou,
                "accuracy": result.accuracy,
                "seconds": seconds,
            }
        )
        if ckpt_dir is not None and result.miou > best_miou:
            best_miou = result.miou
            save_state(ckpt_dir / "best.mvpc", full_state())

    if ckpt_dir is not None:
        save_state(ckpt_dir / "final.mvpc", full_state())
    return history


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,loss,miou,accuracy,seconds\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['loss']:.9g},{row['miou']:.9g},"
                f"{row['accuracy']:.9g},{row['seconds']:.6f}\n"
            )


def read_history_csv(path) -> list[dict]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().strip().splitlines()
    if not lines or lines[0] != "epoch,loss,miou,accuracy,seconds":
        raise ContractViolation(f"{path}: not a training history file")
    history = []
    for line in lines[1:]:
        epoch, loss, miou, accuracy, seconds = line.split(",")
        history.append(
            {
                "epoch": int(epoch),
                "loss": float(loss),
                "miou": float(miou),
                "accuracy": float(accuracy),
                "seconds": float(seconds),
            }
        )
    return history


def make_dataset(spec: DatasetSpec, dtype=np.float32) -> list[PointCloud]:
    return generate_synthetic(spec.kind, spec.n_points, spec.n_clouds, spec.seed, dtype=dtype)
