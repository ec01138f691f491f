"""Latency benchmarking, the ablation grids, and the gradient-check battery.

Every grid configuration trains from the same seed on the same synthetic
data, so rows differ only by architecture.  The grids mirror three studies:
the transmission-neuron comparison (init-only, init at 1.5x resolution,
init with a third 3x3x3 conv, init plus transmission), the A-H output
aggregation variants, and the with/without 1x1x1 convolution pair.
Reported absolute metrics are desk-scale only and are flagged as such in
the output.

Benchmark timing uses a monotonic clock, discards warmup runs, and reports
the median as the headline statistic.  Latency runs are meant to execute
exclusively; the ablation runner may fan out over processes instead
(capped by MVP_THREADS).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    backward_pass,
    elementwise_add,
    elementwise_mul,
    finite_diff_grad,
    max_rel_error,
    parameter,
    tensor_sum,
)
from .block import MVPConvBlock, MVPConvConfig, variant_needs_transmission
from .errors import ConfigError
from .layers import (
    BatchNormParams,
    Conv3dParams,
    PointwiseMlpParams,
    batchnorm,
    conv3d,
    cross_entropy,
    leaky_relu,
    pointwise_mlp,
)
from .model import (
    SegModelConfig,
    SegmentationModel,
    TrainConfig,
    evaluate,
    make_dataset,
    split_clouds,
    train_loop,
)
from .pointcloud import cloud_features, normalize_points, scale_to_grid, stack_clouds

WORKER_ENV_VAR = "MVP_THREADS"


def worker_limit() -> int:
    raw = os.environ.get(WORKER_ENV_VAR, "")
    if raw.strip():
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{WORKER_ENV_VAR} must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ConfigError(f"{WORKER_ENV_VAR} must be >= 1")
        return value
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# Latency benchmark.


@dataclass
class BenchRow:
    resolution: int
    n_points: int
    median_s: float
    mean_s: float
    p95_s: float
    trials: int


@dataclass
class BenchReport:
    rows: list

    _CSV_HEADER = "resolution,n_points,median_s,mean_s,p95_s,trials"

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self._CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(
                    f"{r.resolution},{r.n_points},{r.median_s:.9f},"
                    f"{r.mean_s:.9f},{r.p95_s:.9f},{r.trials}\n"
                )

    @classmethod
    def from_csv(cls, path) -> "BenchReport":
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().strip().splitlines()
        if not lines or lines[0] != cls._CSV_HEADER:
            raise ConfigError(f"{path}: not a bench report")
        rows = []
        for line in lines[1:]:
            resolution, n_points, median_s, mean_s, p95_s, trials = line.split(",")
            rows.append(
                BenchRow(
                    resolution=int(resolution),
                    n_points=int(n_points),
                    median_s=float(median_s),
                    mean_s=float(mean_s),
                    p95_s=float(p95_s),
                    trials=int(trials),
                )
            )
        return cls(rows)


def bench_latency(
    model_cfg: SegModelConfig,
    n_points: int,
    resolutions: list,
    trials: int,
    seed: int = 0,
    warmup: int = 3,
) -> BenchReport:
    """Median/mean/p95 forward latency per voxel resolution.

    Every block of the model runs at the swept resolution; the input cloud
    is identical across resolutions.
    """
    if trials < 3:
        raise ConfigError(f"bench needs trials >= 3, got {trials}")
    rng = np.random.default_rng(seed)
    positions = rng.standard_normal((1, n_points, 3))
    features = cloud_features(positions).astype(np.float32)
    positions = positions.astype(np.float32)

    rows = []
    for resolution in resolutions:
        cfg = replace(
            model_cfg,
            blocks=[(c, resolution) for c, _ in model_cfg.blocks],
            in_channels=features.shape[1],
        )
        model = SegmentationModel(cfg, dtype=np.float32)
        model.set_training(False)
        for _ in range(warmup):
            model.forward(positions, features, training=False)
        times = []
        for _ in range(trials):
            tic = time.perf_counter()
            model.forward(positions, features, training=False)
            times.append(time.perf_counter() - tic)
        times = np.array(times)
        rows.append(
            BenchRow(
                resolution=int(resolution),
                n_points=n_points,
                median_s=float(np.median(times)),
                mean_s=float(times.mean()),
                p95_s=float(np.percentile(times, 95)),
                trials=trials,
            )
        )
    return BenchReport(rows)


# --------------------------------------------------------------------------
# Ablation grids.


@dataclass
class AblationRow:
    config_id: str
    grid: str
    variant: str
    flags: str
    miou: float | None
    accuracy: float | None
    median_forward_s: float | None
    param_count: int | None
    train_seconds: float | None
    desk_scale: bool = True
    reason: str = ""


@dataclass
class AblationReport:
    grid: str
    rows: list

    _CSV_HEADER = (
        "config_id,grid,variant,flags,miou,accuracy,median_forward_s,"
        "param_count,train_seconds,desk_scale,reason"
    )

    def to_csv(self, path) -> None:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.9g}"
            return str(v)

        with open(path, "w", encoding="ascii") as fh:
            fh.write(self._CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(
                    ",".join(
                        fmt(v)
                        for v in (
                            r.config_id,
                            r.grid,
                            r.variant,
                            r.flags.replace(",", ";"),
                            r.miou,
                            r.accuracy,
                            r.median_forward_s,
                            r.param_count,
                            r.train_seconds,
                            str(r.desk_scale).lower(),
                            r.reason.replace(",", ";"),
                        )
                    )
                    + "\n"
                )

    @classmethod
    def from_csv(cls, path) -> "AblationReport":
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().strip().splitlines()
        if not lines or lines[0] != cls._CSV_HEADER:
            raise ConfigError(f"{path}: not an ablation report")
        rows = []
        for line in lines[1:]:
            parts = line.split(",")
            if len(parts) != 11:
                raise ConfigError(f"{path}: malformed row {line!r}")
            opt_float = lambda s: float(s) if s else None
            opt_int = lambda s: int(s) if s else None
            rows.append(
                AblationRow(
                    config_id=parts[0],
                    grid=parts[1],
                    variant=parts[2],
                    flags=parts[3],
                    miou=opt_float(parts[4]),
                    accuracy=opt_float(parts[5]),
                    median_forward_s=opt_float(parts[6]),
                    param_count=opt_int(parts[7]),
                    train_seconds=opt_float(parts[8]),
                    desk_scale=parts[9] == "true",
                    reason=parts[10],
                )
            )
        grid = rows[0].grid if rows else ""
        return cls(grid=grid, rows=rows)

    def to_json(self, path) -> None:
        payload = {"grid": self.grid, "rows": [asdict(r) for r in self.rows]}
        with open(path, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "AblationReport":
        with open(path, "r", encoding="ascii") as fh:
            payload = json.load(fh)
        return cls(grid=payload["grid"], rows=[AblationRow(**r) for r in payload["rows"]])


def _scaled_resolution(base: int, factor: float) -> int:
    return max(2, int(np.ceil(base * factor)))


def grid_configs(base: SegModelConfig, grid: str) -> list:
    """(config_id, model config or None, reason) rows for one grid."""
    if grid == "table4":
        init_only = replace(base, transmission_enabled=False, variant="B")
        return [
            ("init_neuron", init_only, ""),
            (
                "init_neuron_1.5xR",
                replace(
                    init_only,
                    blocks=[(c, _scaled_resolution(r, 1.5)) for c, r in base.blocks],
                ),
                "",
            ),
            ("init_neuron_3xconv3d", replace(init_only, conv3d_depth=3), ""),
            ("init_plus_transmission", replace(base, transmission_enabled=True, variant="G"), ""),
        ]
    if grid == "table5":
        rows = []
        for variant in "ABCDEFGH":
            needs = variant_needs_transmission(variant)
            if needs and not base.transmission_enabled:
                rows.append(
                    (
                        f"variant_{variant}",
                        None,
                        "variant needs the transmission neuron, disabled in base config",
                    )
                )
                continue
            rows.append(
                (
                    f"variant_{variant}",
                    replace(base, variant=variant, transmission_enabled=needs),
                    "",
                )
            )
        return rows
    if grid == "table6":
        full = replace(base, transmission_enabled=True, variant="G")
        return [
            ("mvpconv_no_1x1", replace(full, use_1x1_conv=False), ""),
            ("mvpconv_with_1x1", replace(full, use_1x1_conv=True), ""),
        ]
    raise ConfigError(f"unknown ablation grid {grid!r}; expected table4/table5/table6")


def _flags_string(cfg: SegModelConfig) -> str:
    return (
        f"variant={cfg.variant};transmission={int(cfg.transmission_enabled)};"
        f"use_1x1={int(cfg.use_1x1_conv)};depth={cfg.conv3d_depth};"
        f"r={'/'.join(str(r) for _, r in cfg.blocks)};width={cfg.width_multiplier}"
    )


def _run_one_config(args):
    config_id, grid, model_cfg, train_cfg = args
    clouds = make_dataset(train_cfg.dataset)
    model_cfg = replace(model_cfg, in_channels=clouds[0].n_channels)
    model = SegmentationModel(model_cfg, dtype=np.float32)
    tic = time.perf_counter()
    history = train_loop(model, clouds, train_cfg)
    train_seconds = time.perf_counter() - tic

    _, eval_clouds = split_clouds(clouds, train_cfg.eval_fraction)
    result = evaluate(model, eval_clouds, model_cfg.num_classes)

    batch = stack_clouds(eval_clouds)
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        model.forward(batch.positions, batch.features, training=False)
        times.append(time.perf_counter() - t0)
    return AblationRow(
        config_id=config_id,
        grid=grid,
        variant=model_cfg.variant,
        flags=_flags_string(model_cfg),
        miou=result.miou,
        accuracy=result.accuracy,
        median_forward_s=float(np.median(times)),
        param_count=model.parameter_count(),
        train_seconds=train_seconds,
    )


def run_ablation(
    base_cfg: SegModelConfig,
    grid: str,
    train_cfg: TrainConfig,
    workers: int | None = None,
) -> AblationReport:
    """Train and evaluate every configuration of one grid.

    All configurations share the training seed and synthetic dataset.
    Infeasible configurations are reported as skipped rows with a reason.
    """
    entries = grid_configs(base_cfg, grid)
    jobs = [
        (config_id, grid, cfg, train_cfg)
        for config_id, cfg, reason in entries
        if cfg is not None
    ]
    if workers is None:
        workers = min(worker_limit(), max(len(jobs), 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_config, jobs))
    else:
        results = [_run_one_config(job) for job in jobs]

    by_id = {row.config_id: row for row in results}
    rows = []
    for config_id, cfg, reason in entries:
        if cfg is None:
            rows.append(
                AblationRow(
                    config_id=config_id,
                    grid=grid,
                    variant=config_id.rsplit("_", 1)[-1],
                    flags="",
                    miou=None,
                    accuracy=None,
                    median_forward_s=None,
                    param_count=None,
                    train_seconds=None,
                    reason=reason,
                )
            )
        else:
            rows.append(by_id[config_id])
    return AblationReport(grid=grid, rows=rows)


# --------------------------------------------------------------------------
# Gradient-check battery (the gradcheck subcommand).


def _fd_check(name, forward, wrt, h=1e-5):
    """Tape gradient vs central differences for one op; returns (name, err)."""
    with Tape() as tape:
        loss = forward()
    grads = backward_pass(tape, loss, wrt=wrt)
    worst = 0.0
    for t in wrt:
        def eval_with(x, t=t):
            saved = t.data
            t.data = x.data.astype(t.data.dtype)
            try:
                with Tape():
                    return forward().item()
            finally:
                t.data = saved

        fd = finite_diff_grad(eval_with, t, h)
        worst = max(worst, max_rel_error(grads[t].data, fd.data))
    return name, worst


def gradient_report(seed: int = 0) -> list:
    """Finite-difference agreement per layer and through both neurons.

    Everything runs in float64 at tiny sizes; returns (name, max rel err)
    pairs in a fixed order.
    """
    rng = np.random.default_rng(seed)
    checks = []

    x = parameter(rng.standard_normal((1, 2, 4, 4, 4)))
    conv1 = Conv3dParams.create(2, 3, 1, rng)
    checks.append(
        _fd_check("conv3d_k1", lambda: tensor_sum(conv3d(x, conv1)), [x, conv1.weight, conv1.bias])
    )

    x3 = parameter(rng.standard_normal((1, 2, 4, 4, 4)))
    conv3p = Conv3dParams.create(2, 3, 3, rng)
    checks.append(
        _fd_check("conv3d_k3", lambda: tensor_sum(conv3d(x3, conv3p)), [x3, conv3p.weight, conv3p.bias])
    )

    xm = parameter(rng.standard_normal((1, 3, 8)))
    mlp = PointwiseMlpParams.create(3, 4, rng)
    checks.append(
        _fd_check("pointwise_mlp", lambda: tensor_sum(pointwise_mlp(xm, mlp)), [xm, mlp.weight, mlp.bias])
    )

    xb = parameter(rng.standard_normal((2, 3, 6)))
    bn = BatchNormParams.create(3)
    weights = Tensor(rng.standard_normal((2, 3, 6)))

    def bn_loss():
        bn.training = True
        return tensor_sum(elementwise_mul(batchnorm(xb, bn), weights))

    checks.append(_fd_check("batchnorm_train", bn_loss, [xb, bn.gamma, bn.beta]))

    xl = parameter(rng.standard_normal((2, 3, 5)) * 2.0)
    checks.append(
        _fd_check("leaky_relu", lambda: tensor_sum(leaky_relu(xl, 0.1)), [xl])
    )

    logits = parameter(rng.standard_normal((1, 3, 5)))
    labels = rng.integers(0, 3, (1, 5))
    checks.append(
        _fd_check("cross_entropy", lambda: cross_entropy(logits, labels), [logits])
    )

    positions = rng.standard_normal((1, 8, 3))
    coords = scale_to_grid(normalize_points(positions), 3)
    feats = parameter(rng.standard_normal((1, 2, 8)))
    block = MVPConvBlock(MVPConvConfig(c_in=2, c_out=4, resolution=3), rng, dtype=np.float64)

    def init_loss():
        v1, p1 = block.initializing_neuron(feats, coords)
        return tensor_sum(elementwise_add(v1, p1))

    init_wrt = [feats] + [
        p for n, p in block.named_parameters().items() if n.startswith("init.")
    ]
    checks.append(_fd_check("initializing_neuron", init_loss, init_wrt))

    def trans_loss():
        v1, p1 = block.initializing_neuron(feats, coords)
        v2, p2 = block.transmission_neuron(v1, p1, coords)
        return tensor_sum(elementwise_add(v2, p2))

    checks.append(
        _fd_check("transmission_neuron", trans_loss, [feats] + block.parameters())
    )

    def block_loss():
        return tensor_sum(block.forward(feats, coords))

    checks.append(_fd_check("mvpconv_block", block_loss, [feats] + block.parameters()))
    return checks
