"""Synthetic labeled point clouds, the cdpc text format, resampling, augmentation.

Shape families are generated on the unit scale with per-point part labels.
The two *-pair families exist for the part-segmentation toys: each cloud
holds two primitives of the same kind that differ only in size, and the part
label encodes which one is larger. A local patch cannot decide that, so
these tasks genuinely need long-range context.

File format (`.cdpc`): first line ``cdpc <N> <C> <has_labels:0|1>``, then one
whitespace-separated line per point ``x y z f1..fC [label]`` with '.' decimal
points. A dataset directory holds ``train/``, ``val/`` and ``manifest.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .geometry import PointCloud, farthest_point_sample


def _unit_sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), np.zeros(n, np.int64)


def _cube(n, rng):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-0.8, 0.8, size=(n, 2))
    out = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.8, -0.8)
    for i in range(n):
        rest = [j for j in range(3) if j != axis[i]]
        out[i, axis[i]] = sign[i]
        out[i, rest[0]] = uv[i, 0]
        out[i, rest[1]] = uv[i, 1]
    return out, np.zeros(n, np.int64)


def _cylinder(n, rng, radius=0.5, half_h=1.0, base=np.zeros(3)):
    lat_area = 2 * np.pi * radius * 2 * half_h
    cap_area = 2 * np.pi * radius**2
    on_lat = rng.uniform(size=n) < lat_area / (lat_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    out = np.empty((n, 3))
    parts = np.where(on_lat, 0, 1).astype(np.int64)
    z = rng.uniform(-half_h, half_h, n)
    r = radius * np.sqrt(rng.uniform(size=n))
    top = rng.integers(0, 2, n) * 2 - 1
    out[:, 0] = np.where(on_lat, radius * np.cos(theta), r * np.cos(theta))
    out[:, 1] = np.where(on_lat, radius * np.sin(theta), r * np.sin(theta))
    out[:, 2] = np.where(on_lat, z, top * half_h)
    return out + base, parts


def _torus(n, rng, big=0.7, small=0.25):
    th = rng.uniform(0, 2 * np.pi, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    x = (big + small * np.cos(ph)) * np.cos(th)
    y = (big + small * np.cos(ph)) * np.sin(th)
    z = small * np.sin(ph)
    return np.stack([x, y, z], axis=1), np.zeros(n, np.int64)


def _cone(n, rng, radius=0.7, apex=1.0, base_z=-0.5):
    slant = np.pi * radius * np.hypot(radius, apex - base_z)
    disk = np.pi * radius**2
    on_lat = rng.uniform(size=n) < slant / (slant + disk)
    theta = rng.uniform(0, 2 * np.pi, n)
    frac = np.sqrt(rng.uniform(size=n))  # area-uniform along the slant
    r_lat = radius * frac
    z_lat = apex + (base_z - apex) * frac
    r_disk = radius * np.sqrt(rng.uniform(size=n))
    out = np.empty((n, 3))
    out[:, 0] = np.where(on_lat, r_lat, r_disk) * np.cos(theta)
    out[:, 1] = np.where(on_lat, r_lat, r_disk) * np.sin(theta)
    out[:, 2] = np.where(on_lat, z_lat, base_z)
    return out, np.where(on_lat, 0, 1).astype(np.int64)


def _plane_cross(n, rng):
    first = rng.uniform(size=n) < 0.5
    uv = rng.uniform(-0.9, 0.9, size=(n, 2))
    out = np.zeros((n, 3))
    out[first, 0] = uv[first, 0]
    out[first, 2] = uv[first, 1]
    out[~first, 1] = uv[~first, 0]
    out[~first, 2] = uv[~first, 1]
    return out, (~first).astype(np.int64)


def _sphere_pair(n, rng):
    """Two spheres, same look, different radii: part 0 = larger, 1 = smaller.

    The radius ratio stays close to 1 so curvature inside a local patch barely
    separates the parts; the label needs the cross-object comparison.
    """
    r_big = rng.uniform(0.55, 0.7)
    r_small = r_big * rng.uniform(0.62, 0.78)
    gap = rng.uniform(0.05, 0.25)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    n_big = max(4, min(n - 4, int(round(n * r_big**2 / (r_big**2 + r_small**2)))))
    d1, _ = _unit_sphere(n_big, rng)
    d2, _ = _unit_sphere(n - n_big, rng)
    offset = axis * (r_big + r_small + gap)
    coords = np.concatenate([d1 * r_big, d2 * r_small + offset])
    parts = np.concatenate([np.zeros(n_big, np.int64), np.ones(n - n_big, np.int64)])
    if rng.uniform() < 0.5:  # larger part is not always first in file order
        coords = coords[::-1]
        parts = parts[::-1]
    return coords - coords.mean(axis=0), parts


def _cylinder_pair(n, rng):
    """Two cylinders of equal radius, different heights, four parts:
    0 = taller lateral, 1 = taller caps, 2 = shorter lateral, 3 = shorter caps.

    Radius and point density match across the pair, so a local patch on a
    shaft cannot tell which cylinder it belongs to; the taller/shorter half of
    the label needs the cross-object comparison.
    """
    h_tall = rng.uniform(0.8, 1.1)
    h_short = h_tall * rng.uniform(0.45, 0.65)
    radius = 0.35
    gap = rng.uniform(0.2, 0.5)
    n_tall = max(8, min(n - 8, int(round(n * h_tall / (h_tall + h_short)))))
    c1, p1 = _cylinder(n_tall, rng, radius=radius, half_h=h_tall / 2)
    c2, p2 = _cylinder(n - n_tall, rng, radius=radius, half_h=h_short / 2)
    # independent vertical offsets and a random separation direction: neither
    # absolute height nor scene side may identify a part
    c1[:, 2] += rng.uniform(-0.25, 0.25)
    c2[:, 2] += rng.uniform(-0.25, 0.25)
    theta = rng.uniform(0, 2 * np.pi)
    c2[:, 0] += (2 * radius + gap) * np.cos(theta)
    c2[:, 1] += (2 * radius + gap) * np.sin(theta)
    coords = np.concatenate([c1, c2])
    parts = np.concatenate([p1, p2 + 2])
    if rng.uniform() < 0.5:
        coords = coords[::-1]
        parts = parts[::-1]
    return coords - coords.mean(axis=0), parts


# family name -> (generator, number of part labels it emits)
FAMILIES = {
    "sphere": (_unit_sphere, 1),
    "cube": (_cube, 1),
    "cylinder": (_cylinder, 2),
    "torus": (_torus, 1),
    "cone": (_cone, 2),
    "plane-cross": (_plane_cross, 2),
    "sphere-pair": (_sphere_pair, 2),
    "cylinder-pair": (_cylinder_pair, 4),
}

CLS_FAMILY_ORDER = (
    "sphere", "cube", "cylinder", "torus", "cone", "plane-cross", "sphere-pair", "cylinder-pair",
)
SEG_FAMILY_ORDER = ("cylinder-pair",)


@dataclass
class SyntheticSpec:
    families: tuple = CLS_FAMILY_ORDER
    points: int = 256
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.points < 8:
            raise ConfigError("points per cloud must be >= 8")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigError(f"unknown shape family {f!r}; known: {sorted(FAMILIES)}")

    def part_offset(self, family: str) -> int:
        off = 0
        for f in self.families:
            if f == family:
                return off
            off += FAMILIES[f][1]
        raise ConfigError(f"{family!r} not in spec families")

    @property
    def total_parts(self) -> int:
        return sum(FAMILIES[f][1] for f in self.families)


def gen_shapes(spec: SyntheticSpec, count: int):
    """count clouds cycling through the families; returns [(PointCloud, class_id)].

    Deterministic under spec.seed; per-point labels are globally offset part
    ids so a multi-family dataset has disjoint part classes.
    """
    out = []
    for i in range(count):
        cls = i % len(spec.families)
        family = spec.families[cls]
        rng = np.random.default_rng((spec.seed, i))
        coords, parts = FAMILIES[family][0](spec.points, rng)
        if spec.noise_sigma > 0:
            coords = coords + rng.normal(0.0, spec.noise_sigma, size=coords.shape)
        labels = parts + spec.part_offset(family)
        cloud = PointCloud(
            coords.astype(np.float32), np.empty((spec.points, 0), np.float32), labels
        )
        out.append((cloud, cls))
    return out


# --- cdpc text format --------------------------------------------------------------


def write_cloud(cloud: PointCloud, path) -> None:
    has_labels = int(cloud.labels is not None)
    c = cloud.feats.shape[1]
    with open(path, "w") as f:
        f.write(f"cdpc {cloud.n} {c} {has_labels}\n")
        for i in range(cloud.n):
            cols = [np.format_float_positional(np.float32(v), unique=True) for v in cloud.coords[i]]
            cols += [np.format_float_positional(np.float32(v), unique=True) for v in cloud.feats[i]]
            if has_labels:
                cols.append(str(int(cloud.labels[i])))
            f.write(" ".join(cols) + "\n")


def read_cloud(path, expect_labels: Optional[bool] = None) -> PointCloud:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "cdpc":
            raise FormatError(f"{path}: bad cdpc header {header}")
        try:
            n, c, has_labels = int(header[1]), int(header[2]), int(header[3])
        except ValueError as e:
            raise FormatError(f"{path}: non-integer header fields") from e
        if n < 1:
            raise FormatError(f"{path}: point count must be >= 1, got {n}")
        if expect_labels and not has_labels:
            raise FormatError(f"{path}: labels requested but file has none")
        width = 3 + c + (1 if has_labels else 0)
        coords = np.empty((n, 3), np.float32)
        feats = np.empty((n, c), np.float32)
        labels = np.empty(n, np.int64) if has_labels else None
        for i in range(n):
            line = f.readline()
            if not line:
                raise FormatError(f"{path}:{i + 2}: expected {n} points, file ended early")
            parts = line.split()
            if len(parts) != width:
                raise FormatError(f"{path}:{i + 2}: expected {width} columns, got {len(parts)}")
            try:
                coords[i] = [float(v) for v in parts[:3]]
                feats[i] = [float(v) for v in parts[3 : 3 + c]]
                if has_labels:
                    labels[i] = int(parts[-1])
            except ValueError as e:
                raise FormatError(f"{path}:{i + 2}: unparseable value") from e
    return PointCloud(coords, feats, labels)


# --- resampling / augmentation --------------------------------------------------------


def resample_to_n(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """FPS-subsample down, or repeat points (sampled with replacement) up to n."""
    if n < 1:
        raise ContractError("resample target must be >= 1")
    if cloud.n >= n:
        idx = farthest_point_sample(cloud.coords, n)
    else:
        rng = np.random.default_rng(seed)
        idx = np.concatenate(
            [np.arange(cloud.n), rng.integers(0, cloud.n, n - cloud.n)]
        )
    return PointCloud(
        cloud.coords[idx],
        cloud.feats[idx],
        None if cloud.labels is None else cloud.labels[idx],
    )


@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.0
    jitter_clip: float = 0.0
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    rotate_axis: str = "none"  # none | z | any
    rotate_max: float = 0.0  # radians
    shift_range: float = 0.0
    color_drop: float = 0.0

    def __post_init__(self):
        if self.scale_lo > self.scale_hi:
            raise ConfigError("scale_lo must be <= scale_hi")
        if not 0.0 <= self.color_drop <= 1.0:
            raise ConfigError("color_drop must be a probability")
        if self.rotate_axis not in ("none", "z", "any"):
            raise ConfigError("rotate_axis must be none|z|any")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d):
        unknown = set(d) - set(AugmentConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        return AugmentConfig(**d)


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def augment(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """rotate -> scale -> shift -> jitter -> color drop; labels untouched."""
    coords = cloud.coords.astype(np.float64)
    if cfg.rotate_axis != "none" and cfg.rotate_max > 0:
        angle = rng.uniform(-cfg.rotate_max, cfg.rotate_max)
        if cfg.rotate_axis == "z":
            axis = np.array([0.0, 0.0, 1.0])
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
        coords = coords @ _rotation_matrix(axis, angle).T
    if (cfg.scale_lo, cfg.scale_hi) != (1.0, 1.0):
        coords = coords * rng.uniform(cfg.scale_lo, cfg.scale_hi)
    if cfg.shift_range > 0:
        coords = coords + rng.uniform(-cfg.shift_range, cfg.shift_range, size=3)
    if cfg.jitter_sigma > 0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=coords.shape)
        if cfg.jitter_clip > 0:
            noise = np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
        coords = coords + noise
    feats = cloud.feats
    if cfg.color_drop > 0 and feats.shape[1] > 0 and rng.uniform() < cfg.color_drop:
        feats = np.zeros_like(feats)
    return PointCloud(coords.astype(cloud.coords.dtype), feats.copy(), cloud.labels)


# --- dataset directories ----------------------------------------------------------------


def write_dataset(
    out_dir,
    task: str,
    spec: SyntheticSpec,
    train_per_class: int,
    val_per_class: int,
    force: bool = False,
) -> dict:
    """Generate train/ and val/ cdpc files plus manifest.json; returns the manifest."""
    if task not in ("classification", "segmentation"):
        raise ConfigError(f"task must be classification|segmentation, got {task!r}")
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"{out_dir} exists and is not empty (use force)")
    n_cls = len(spec.families)
    train = gen_shapes(spec, train_per_class * n_cls)
    val_spec = SyntheticSpec(spec.families, spec.points, spec.noise_sigma, spec.seed + 1)
    val = gen_shapes(val_spec, val_per_class * n_cls)

    manifest = {
        "task": task,
        "classes": list(spec.families),
        "num_parts": spec.total_parts,
        "points": spec.points,
        "files": {"train": [], "val": []},
    }
    for split, items in (("train", train), ("val", val)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i, (cloud, cls) in enumerate(items):
            rel = f"{split}/{spec.families[cls]}_{i:04d}.cdpc"
            write_cloud(cloud, os.path.join(out_dir, rel))
            manifest["files"][split].append({"path": rel, "class": cls})
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_dataset(root) -> dict:
    """Loads every cloud; returns manifest plus per-split [(cloud, class_id)]."""
    mpath = os.path.join(root, "manifest.json")
    if not os.path.isfile(mpath):
        raise ConfigError(f"{root}: no manifest.json (not a dataset directory)")
    with open(mpath) as f:
        manifest = json.load(f)
    num_parts = manifest.get("num_parts", 0)
    out = {"manifest": manifest, "splits": {}}
    for split, entries in manifest["files"].items():
        items = []
        for e in entries:
            cloud = read_cloud(os.path.join(root, e["path"]))
            if cloud.labels is not None and num_parts and cloud.labels.max() >= num_parts:
                raise FormatError(
                    f"{e['path']}: label {cloud.labels.max()} out of range [0, {num_parts})"
                )
            items.append((cloud, int(e["class"])))
        out["splits"][split] = items
    return out
