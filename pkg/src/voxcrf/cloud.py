"""Point-cloud container, ASCII/PLY I/O and cropping into sub-areas."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMATS = {"xyzrgbl-ascii": 7, "xyz-label-ascii": 4}

# Fixed per-class palette for exported predictions; cycles past 12 classes.
PALETTE = np.array([
    [152, 223, 138], [174, 199, 232], [255, 187, 120], [214, 39, 40],
    [148, 103, 189], [140, 86, 75], [227, 119, 194], [127, 127, 127],
    [188, 189, 34], [23, 190, 207], [31, 119, 180], [255, 127, 14],
], dtype=np.uint8)


class CloudFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    """Raw observations: positions plus optional color, intensity and labels.

    ``labels`` uses -1 for unlabeled points.  ``bounds`` is a (2, 3) array
    holding the min and max corner and always contains every position.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    label_count: int = 1
    bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        n = len(self.positions)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise ValueError("colors length mismatch")
            if np.any(self.colors < 0) or np.any(self.colors > 255):
                raise ValueError("colors must lie in [0, 255]")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != n:
                raise ValueError("intensity length mismatch")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length mismatch")
            if np.any(self.labels >= self.label_count) or np.any(self.labels < -1):
                raise ValueError(f"labels must lie in [-1, {self.label_count})")
        if self.label_count < 1:
            raise ValueError("label_count must be positive")
        tight = tight_bounds(self.positions)
        if self.bounds is None:
            self.bounds = tight
        else:
            self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
            if n and (np.any(tight[0] < self.bounds[0]) or np.any(tight[1] > self.bounds[1])):
                raise ValueError("bounds must contain every point")

    def __len__(self):
        return len(self.positions)

    def subset(self, index, bounds=None):
        """Cloud restricted to ``index`` (mask or integer array)."""
        def pick(a):
            return None if a is None else a[index]
        return PointCloud(
            self.positions[index], pick(self.colors), pick(self.intensity),
            pick(self.labels), self.label_count, bounds,
        )

    def with_positions(self, positions):
        return replace(self, positions=positions, bounds=None)


def tight_bounds(positions):
    if len(positions) == 0:
        return np.zeros((2, 3))
    return np.stack([positions.min(axis=0), positions.max(axis=0)])


def load_cloud(path, format="xyzrgbl-ascii", label_count=None):
    """Parse a whitespace-separated point file.

    ``xyzrgbl-ascii`` rows are ``x y z r g b label``; ``xyz-label-ascii`` rows
    are ``x y z label``.  A label of -1 marks an unlabeled point.  When
    ``label_count`` is omitted it is inferred as ``max(label) + 1``.
    """
    if format not in FORMATS:
        raise CloudFormatError(f"unknown format {format!r}; expected one of {sorted(FORMATS)}")
    ncol = FORMATS[format]
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != ncol:
                raise CloudFormatError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise CloudFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise CloudFormatError(f"{path}: empty file")
    data = np.array(rows)
    labels = data[:, -1].astype(np.int64)
    if np.any(labels != data[:, -1]):
        raise CloudFormatError(f"{path}: labels must be integers")
    colors = None
    if format == "xyzrgbl-ascii":
        colors = data[:, 3:6]
        bad = np.flatnonzero(np.any((colors < 0) | (colors > 255), axis=1))
        if len(bad):
            raise CloudFormatError(f"{path}: color out of [0, 255] on data row {bad[0] + 1}")
    if label_count is None:
        label_count = max(int(labels.max()) + 1, 1)
    return PointCloud(data[:, :3], colors, None, labels, label_count)


def _fmt_rows(cloud, labels):
    cols = [np.char.mod("%.6f", cloud.positions)]
    if cloud.colors is not None:
        cols.append(np.char.mod("%d", np.rint(cloud.colors).astype(np.int64)))
    cols.append(np.char.mod("%d", labels.reshape(-1, 1)))
    table = np.hstack(cols)
    return "\n".join(" ".join(r) for r in table) + "\n"


def save_cloud(cloud, path):
    """Write a cloud in the format :func:`load_cloud` reads back.

    Clouds with color go to ``xyzrgbl-ascii``, others to ``xyz-label-ascii``.
    Colors are written as integers.
    """
    labels = cloud.labels if cloud.labels is not None else np.full(len(cloud), -1)
    Path(path).write_text(_fmt_rows(cloud, labels))
    return "xyzrgbl-ascii" if cloud.colors is not None else "xyz-label-ascii"


def save_predictions(cloud, labels, path, format="ascii"):
    """Write per-point predicted labels.

    ``ascii`` writes the cloud's columns with the predicted label as the last
    column.  ``ply-binary`` writes a little-endian PLY with xyz float32 and a
    palette color per class.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(cloud):
        raise ValueError(f"{len(labels)} labels for {len(cloud)} points")
    if format == "ascii":
        Path(path).write_text(_fmt_rows(cloud, labels))
    elif format == "ply-binary":
        write_ply(path, cloud.positions, PALETTE[labels % len(PALETTE)])
    else:
        raise ValueError(f"unknown prediction format {format!r}")


_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, positions, rgb):
    n = len(positions)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=_PLY_VERTEX)
    for k, name in enumerate("xyz"):
        rec[name] = positions[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = rgb[:, k]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path):
    """Read the vertex block written by :func:`write_ply`; returns (xyz, rgb)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    n = None
    for line in blob[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise CloudFormatError(f"{path}: no vertex element")
    rec = np.frombuffer(blob, dtype=_PLY_VERTEX, count=n, offset=end)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return xyz, rgb


def _windows(lo, hi, size, stride):
    extent = hi - lo
    if extent <= size:
        return 1
    return int(math.ceil((extent - size) / stride - 1e-12)) + 1


def crop_subareas(cloud, crop_xy=5.0, overlap=0.0, keep_full_z=False, crop_z=None,
                  with_index=False):
    """Split a cloud into axis-aligned sub-areas of at most ``crop_xy`` meters.

    Windows start at the cloud's minimum corner and advance by
    ``crop_xy - overlap``.  Windows are half-open except the last one per
    axis, which also takes points on the upper boundary.  With ``overlap=0``
    every point lands in exactly one crop.  Z is cropped with ``crop_z``
    (default ``crop_xy``) unless ``keep_full_z``.

    Returns a list of ``(crop, origin)`` pairs, or ``(crop, origin, index)``
    triples with ``with_index`` where ``index`` holds the source row of each
    crop point.  Empty windows are skipped.
    """
    if len(cloud) == 0:
        raise ValueError("cannot crop an empty cloud")
    if not crop_xy > overlap >= 0:
        raise ValueError("need crop_xy > overlap >= 0")
    crop_z = crop_xy if crop_z is None else crop_z
    lo, hi = cloud.bounds
    sizes = [crop_xy, crop_xy, math.inf if keep_full_z else crop_z]
    p = cloud.positions
    per_axis = []
    for ax in range(3):
        size = sizes[ax]
        if math.isinf(size):
            per_axis.append([(lo[ax], hi[ax], np.ones(len(p), dtype=bool))])
            continue
        stride = size - overlap if overlap < size else size
        count = _windows(lo[ax], hi[ax], size, stride)
        wins = []
        for k in range(count):
            start = lo[ax] + k * stride
            stop = start + size
            member = p[:, ax] >= start
            if k == count - 1:
                member &= p[:, ax] <= hi[ax]
            else:
                member &= p[:, ax] < stop
            wins.append((start, min(stop, hi[ax]) if k == count - 1 else stop, member))
        per_axis.append(wins)
    crops = []
    for wx in per_axis[0]:
        for wy in per_axis[1]:
            for wz in per_axis[2]:
                mask = wx[2] & wy[2] & wz[2]
                if not mask.any():
                    continue
                origin = np.array([wx[0], wy[0], wz[0]])
                top = np.array([wx[1], wy[1], wz[1]])
                sub = p[mask]
                bounds = np.stack([np.minimum(origin, sub.min(axis=0)),
                                   np.maximum(top, sub.max(axis=0))])
                crop = cloud.subset(mask, bounds)
                crops.append((crop, origin, np.flatnonzero(mask)) if with_index else (crop, origin))
    return crops
