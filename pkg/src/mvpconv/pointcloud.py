"""Point-cloud container, unit-sphere normalization, file IO, synthetic data.

Coordinates are canonicalized per cloud: subtract the mean point, divide by
twice the farthest-point radius, shift by 0.5.  Every normalized cloud then
sits inside the ball of radius 0.5 centered at (0.5, 0.5, 0.5), which makes
the result invariant to rigid translation and uniform positive scaling of
the input.  Normalized coordinates are treated as constants downstream; no
gradient ever flows into positions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Array
from .errors import ConfigError, ContractViolation, FormatError, TruncationError

_DEGENERATE_RADIUS = 1e-12

TEXT_MAGIC = "MVP1"
BINARY_MAGIC = b"MVPB"

# Shape family -> number of part labels it emits.
SHAPE_FAMILIES = {"barbell": 3, "tee": 2, "quad": 4}


@dataclass
class PointCloud:
    """Batched positions [B, N, 3], features [B, C, N], optional labels [B, N]."""

    positions: Array
    features: Array
    labels: Array | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions)
        feat = np.asarray(self.features)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ContractViolation(f"positions must be [B, N, 3], got {pos.shape}")
        if feat.ndim != 3:
            raise ContractViolation(f"features must be [B, C, N], got {feat.shape}")
        if pos.shape[1] < 1 or feat.shape[1] < 1:
            raise ContractViolation("need at least one point and one feature channel")
        if feat.shape[0] != pos.shape[0] or feat.shape[2] != pos.shape[1]:
            raise ContractViolation(
                f"features {feat.shape} do not match positions {pos.shape}"
            )
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != pos.shape[:2]:
                raise ContractViolation(
                    f"labels shape {lab.shape} != {pos.shape[:2]}"
                )
            if lab.size and lab.min() < 0:
                raise ContractViolation("labels must be nonnegative")
            self.labels = lab.astype(np.int64)
        self.positions = pos
        self.features = feat

    @property
    def batch_size(self) -> int:
        return self.positions.shape[0]

    @property
    def n_points(self) -> int:
        return self.positions.shape[1]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]


def stack_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Concatenate same-sized single-batch clouds along the batch axis."""
    if not clouds:
        raise ContractViolation("cannot stack an empty cloud list")
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds], axis=0)
    return PointCloud(
        np.concatenate([c.positions for c in clouds], axis=0),
        np.concatenate([c.features for c in clouds], axis=0),
        labels,
    )


def normalize_points(positions: Array) -> Array:
    """Map positions [B, N, 3] into the unit sphere around (0.5, 0.5, 0.5).

    Per batch item: subtract the mean point, divide by twice the radius of
    the farthest point, add 0.5.  A degenerate cloud (all points identical)
    collapses to the center.  Output components are clipped to [0, 1] to
    absorb last-ulp drift.
    """
    pos = np.asarray(positions)
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise ContractViolation(f"positions must be [B, N, 3], got {pos.shape}")
    if pos.shape[1] < 1:
        raise ContractViolation("need at least one point")
    if not np.all(np.isfinite(pos)):
        raise ContractViolation("positions must be finite")
    centered = pos - pos.mean(axis=1, keepdims=True)
    radius = np.sqrt((centered**2).sum(axis=2)).max(axis=1)
    denom = 2.0 * np.maximum(radius, _DEGENERATE_RADIUS)
    out = centered / denom[:, None, None] + 0.5
    return np.clip(out, 0.0, 1.0)


def scale_to_grid(coords: Array, resolution: int) -> Array:
    """Enlarge unit-cube coordinates to [0, r-1], clamped against drift."""
    if resolution < 2:
        raise ContractViolation(f"resolution must be >= 2, got {resolution}")
    scaled = np.asarray(coords) * (resolution - 1)
    return np.clip(scaled, 0.0, float(resolution - 1))


# --------------------------------------------------------------------------
# File IO.  One cloud per file.
#
# Text:   line 1 is "MVP1 <n> <c> <has_labels>", then n lines of
#         "x y z f1 .. fc [label]".
# Binary: magic "MVPB", three little-endian u32 (n, c, has_labels),
#         n*(3+c) little-endian f32, then (if labeled) n little-endian u32.


def write_cloud(cloud: PointCloud, path, mode: str = "binary") -> None:
    if cloud.batch_size != 1:
        raise ContractViolation("cloud files hold exactly one cloud (B == 1)")
    if mode == "text":
        _write_text(cloud, Path(path))
    elif mode == "binary":
        _write_binary(cloud, Path(path))
    else:
        raise ConfigError(f"unknown cloud file mode {mode!r}")


def read_cloud(path) -> PointCloud:
    """Read a cloud file, sniffing text vs binary from the magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return _read_binary(path)
    return _read_text(path)


def _write_text(cloud: PointCloud, path: Path) -> None:
    n = cloud.n_points
    c = cloud.n_channels
    has_labels = cloud.labels is not None
    rows = np.concatenate(
        [cloud.positions[0], cloud.features[0].T], axis=1
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{TEXT_MAGIC} {n} {c} {int(has_labels)}\n")
        for i in range(n):
            vals = " ".join(f"{v:.17g}" for v in rows[i])
            if has_labels:
                fh.write(f"{vals} {int(cloud.labels[0, i])}\n")
            else:
                fh.write(vals + "\n")


def _read_text(path: Path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: line 1: empty file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != TEXT_MAGIC:
        raise FormatError(f"{path}: line 1: bad header {lines[0]!r}")
    try:
        n, c, has_labels = int(header[1]), int(header[2]), int(header[3])
    except ValueError as exc:
        raise FormatError(f"{path}: line 1: non-integer header field") from exc
    if n < 1 or c < 0 or has_labels not in (0, 1):
        raise FormatError(f"{path}: line 1: header values out of range")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) < n:
        raise TruncationError(
            f"{path}: header claims {n} points, file has {len(body)} rows"
        )
    if len(body) > n:
        raise FormatError(
            f"{path}: line {n + 2}: trailing data beyond {n} declared rows"
        )
    width = 3 + c + has_labels
    data = np.empty((n, 3 + c), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64) if has_labels else None
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != width:
            raise FormatError(
                f"{path}: line {i + 2}: expected {width} fields, got {len(parts)}"
            )
        try:
            data[i] = [float(v) for v in parts[: 3 + c]]
            if has_labels:
                labels[i] = int(parts[-1])
        except ValueError as exc:
            raise FormatError(f"{path}: line {i + 2}: unparsable value") from exc
    positions = data[None, :, :3]
    features = data[None, :, 3:].transpose(0, 2, 1)
    return PointCloud(positions, features, labels[None] if has_labels else None)


def _write_binary(cloud: PointCloud, path: Path) -> None:
    n = cloud.n_points
    c = cloud.n_channels
    has_labels = cloud.labels is not None
    rows = np.concatenate(
        [cloud.positions[0], cloud.features[0].T], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", n, c, int(has_labels)))
        fh.write(rows.tobytes())
        if has_labels:
            fh.write(cloud.labels[0].astype("<u4").tobytes())


def _read_binary(path: Path) -> PointCloud:
    blob = path.read_bytes()
    if blob[:4] != BINARY_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncationError(f"{path}: truncated header")
    n, c, has_labels = struct.unpack("<III", blob[4:16])
    if n < 1 or has_labels not in (0, 1):
        raise FormatError(f"{path}: header values out of range")
    payload = n * (3 + c) * 4
    expected = 16 + payload + (n * 4 if has_labels else 0)
    if len(blob) < expected:
        raise TruncationError(
            f"{path}: header claims {expected} bytes, file has {len(blob)}"
        )
    if len(blob) > expected:
        raise FormatError(f"{path}: trailing bytes beyond declared payload")
    rows = np.frombuffer(blob, dtype="<f4", count=n * (3 + c), offset=16)
    rows = rows.reshape(n, 3 + c)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=16 + payload)
        labels = labels.astype(np.int64)[None]
    positions = np.ascontiguousarray(rows[None, :, :3], dtype=np.float32)
    features = np.ascontiguousarray(rows[None, :, 3:].transpose(0, 2, 1), dtype=np.float32)
    return PointCloud(positions, features, labels)


# --------------------------------------------------------------------------
# Synthetic labeled data.


def _random_rotation(rng: np.random.Generator) -> Array:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _part_counts(n_points: int, fractions) -> list[int]:
    counts = [int(math.floor(n_points * f)) for f in fractions]
    for i in range(n_points - sum(counts)):
        counts[i % len(counts)] += 1
    return counts


def _sample_ball(rng, n, center, radius):
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    rad = radius * rng.random(n) ** (1.0 / 3.0)
    return center + direction * rad[:, None]


def _sample_cylinder_x(rng, n, x_lo, x_hi, radius):
    x = rng.uniform(x_lo, x_hi, n)
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    rad = radius * np.sqrt(rng.random(n))
    return np.stack([x, rad * np.cos(angle), rad * np.sin(angle)], axis=1)


def _sample_box(rng, n, lo, hi):
    return rng.uniform(lo, hi, (n, 3))


# Quad cluster layout.  Parts must stay identifiable under the random
# rotation baked into every cloud, so each cluster sits at a distinct
# distance from the constellation centroid and has a distinct spread;
# those are rotation-invariant signatures.
_QUAD_DIRS = np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
) / np.sqrt(3.0)
_QUAD_RAW = _QUAD_DIRS * np.array([0.6, 1.3, 2.0, 2.7])[:, None]
_QUAD_CENTERS = _QUAD_RAW - _QUAD_RAW.mean(axis=0)
_QUAD_SIGMA = (0.07, 0.09, 0.11, 0.13)


def _canonical_shape(kind: str, n_points: int, rng: np.random.Generator):
    if kind == "quad":
        counts = _part_counts(n_points, [0.25] * 4)
        parts = [
            _QUAD_CENTERS[k] + _QUAD_SIGMA[k] * rng.standard_normal((counts[k], 3))
            for k in range(4)
        ]
    elif kind == "barbell":
        counts = _part_counts(n_points, [0.35, 0.35, 0.30])
        parts = [
            _sample_ball(rng, counts[0], np.array([-1.1, 0.0, 0.0]), 0.4),
            _sample_ball(rng, counts[1], np.array([1.1, 0.0, 0.0]), 0.75),
            _sample_cylinder_x(rng, counts[2], -0.9, 0.9, 0.15),
        ]
    elif kind == "tee":
        counts = _part_counts(n_points, [0.5, 0.5])
        parts = [
            _sample_box(rng, counts[0], [-1.5, 1.0, -0.35], [1.5, 1.7, 0.35]),
            _sample_box(rng, counts[1], [-0.22, -1.7, -0.22], [0.22, 1.0, 0.22]),
        ]
    else:
        raise ConfigError(f"unknown shape family {kind!r}")
    points = np.concatenate(parts, axis=0)
    labels = np.concatenate(
        [np.full(len(p), k, dtype=np.int64) for k, p in enumerate(parts)]
    )
    return points, labels


def generate_synthetic(
    kind: str,
    n_points: int,
    n_clouds: int,
    seed: int,
    dtype=np.float32,
) -> list[PointCloud]:
    """Deterministic labeled clouds with a random pose baked into each.

    Every cloud is drawn in a canonical frame, then rotated, scaled and
    translated at random.  Features are pose-canonical per point: the
    unit-sphere normalized coordinates (3), the doubled radial distance
    from the cloud center (1), and a sine/cosine positional encoding of
    that radius at four octaves (8), 12 channels in all.  Translation and
    scale never leak into the features; orientation does, through the
    coordinates.
    """
    if kind not in SHAPE_FAMILIES:
        raise ConfigError(
            f"unknown shape family {kind!r}; expected one of {sorted(SHAPE_FAMILIES)}"
        )
    if n_points < 8:
        raise ContractViolation(f"n_points must be >= 8, got {n_points}")
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(n_clouds):
        canon, labels = _canonical_shape(kind, n_points, rng)
        rot = _random_rotation(rng)
        scale_factor = rng.uniform(0.5, 2.0)
        shift = rng.uniform(-5.0, 5.0, 3)
        posed = (canon @ rot.T) * scale_factor + shift
        positions = posed[None].astype(dtype)
        features = cloud_features(positions).astype(dtype)
        clouds.append(PointCloud(positions, features, labels[None]))
    return clouds


FEATURE_CHANNELS = 12
_ENCODING_OCTAVES = (1, 2, 4, 8)


def cloud_features(positions: Array) -> Array:
    """Pose-canonical per-point features [B, 12, N] from raw positions."""
    normalized = normalize_points(positions)
    rho = 2.0 * np.sqrt(((normalized - 0.5) ** 2).sum(axis=2, keepdims=True))
    channels = [normalized, rho]
    for k in _ENCODING_OCTAVES:
        channels.append(np.sin(np.pi * k * rho))
        channels.append(np.cos(np.pi * k * rho))
    return np.concatenate(channels, axis=2).transpose(0, 2, 1)
