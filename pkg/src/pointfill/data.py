"""Point cloud ingestion, normalization, hole cropping, contrastive
augmentation, synthetic shape generation, and dataset splits.

Everything here is plain numpy; tensors only appear once data reaches the
model layers. All randomness flows through explicit generators so sample
preparation is reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

XYZ_BINARY_MAGIC = b"PCXB"
XYZ_BINARY_VERSION = 1

PRIMITIVE_KINDS = ("sphere", "cube-surface", "cylinder", "torus", "plane-with-hole")


class ParseError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # [P, 3]
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"PointCloud: expected P x 3 points, got {self.points.shape}")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class PartialSample:
    """One completion instance: the observed partial cloud, the dropped
    missing region, the frame+missing ground truth, and the viewpoint-based
    distance ordering that produced them."""

    x_p: np.ndarray  # [N, 3] partial input
    x_m: np.ndarray  # [M, 3] missing ground truth
    x_fm: np.ndarray  # [M+F, 3] frame + missing ground truth
    viewpoint: np.ndarray  # (3,)
    sorted_order: np.ndarray  # permutation of source indices, ascending distance


@dataclass
class AugmentedGroup:
    variants: list  # PointCloud entries, all derived from one source
    group_id: str


# ---------------------------------------------------------------------------
# file formats


def load_cloud(path, fmt: str = "xyz-ascii") -> PointCloud:
    path = Path(path)
    if fmt == "xyz-ascii":
        pts = _read_xyz_ascii(path)
    elif fmt == "xyz-binary":
        pts = _read_xyz_binary(path)
    else:
        raise ValueError(f"load_cloud: unknown format '{fmt}'")
    if pts.shape[0] == 0:
        raise ParseError(f"{path}: empty point cloud")
    return PointCloud(pts, source_id=path.stem)


def save_cloud(points: np.ndarray, path, fmt: str = "xyz-ascii"):
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"save_cloud: expected P x 3 points, got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("save_cloud: refusing to write an empty cloud")
    if fmt == "xyz-ascii":
        with open(path, "w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.10g} {y:.10g} {z:.10g}\n")
    elif fmt == "xyz-binary":
        header = XYZ_BINARY_MAGIC + struct.pack("<IQ", XYZ_BINARY_VERSION, pts.shape[0])
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
    else:
        raise ValueError(f"save_cloud: unknown format '{fmt}'")


def _read_xyz_ascii(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: not a number: {text!r}")
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _read_xyz_binary(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated header")
    if blob[:4] != XYZ_BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack("<IQ", blob[4:16])
    if version != XYZ_BINARY_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    expected = 16 + count * 24
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(count, 3).copy()


def write_manifest(path, entries):
    """entries: iterable of (relative path, label-or-empty)."""
    with open(path, "w") as fh:
        for cloud_path, label in entries:
            fh.write(f"{cloud_path},{'' if label is None else label}\n")


def read_manifest(path) -> list:
    """Returns [(path, label or None)] with paths resolved next to the manifest."""
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "," not in text:
                raise ParseError(f"{path}:{lineno}: expected 'path,label'")
            cloud_path, label = text.rsplit(",", 1)
            out.append((base / cloud_path, int(label) if label else None))
    return out


def load_manifest_clouds(path, fmt: str = "xyz-binary") -> list:
    clouds = []
    for cloud_path, label in read_manifest(path):
        cloud = load_cloud(cloud_path, fmt)
        cloud.label = label
        clouds.append(cloud)
    return clouds


# ---------------------------------------------------------------------------
# normalization and cropping


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the origin, then scale uniformly so max |coordinate| is 1."""
    pts = cloud.points
    if pts.shape[0] < 2:
        raise ValueError("normalize: need at least 2 points")
    centered = pts - pts.mean(axis=0)
    scale = np.abs(centered).max()
    if scale == 0.0:
        raise ValueError("normalize: degenerate cloud (all points identical)")
    return PointCloud(centered / scale, label=cloud.label, source_id=cloud.source_id)


def sample_viewpoint(rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the unit sphere, radius 1."""
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def crop_by_viewpoint(cloud: PointCloud, viewpoint, m: int, f: int = 0) -> PartialSample:
    """Sort points by ascending distance to the viewpoint, drop the closest
    M as the missing region, and take the following F as its frame."""
    pts = cloud.points
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    n_total = pts.shape[0]
    if m < 1:
        raise ValueError("crop_by_viewpoint: M must be >= 1")
    if f < 0:
        raise ValueError("crop_by_viewpoint: F must be >= 0")
    if m + f > n_total:
        raise ValueError(
            f"crop_by_viewpoint: M+F = {m + f} exceeds cloud size {n_total}")
    d = np.einsum("ij,ij->i", pts - viewpoint, pts - viewpoint)
    order = np.argsort(d, kind="stable")
    x_m = pts[order[:m]]
    frame = pts[order[m:m + f]]
    return PartialSample(
        x_p=pts[order[m:]],
        x_m=x_m,
        x_fm=np.concatenate([x_m, frame], axis=0),
        viewpoint=viewpoint,
        sorted_order=order,
    )


def two_hole_crop(cloud: PointCloud, viewpoints, m1: int, m2: int,
                  f: int = 0) -> PartialSample:
    """Two sequential viewpoint crops; the second acts on the remainder of
    the first. The missing region is the union of both holes and each hole
    contributes half of the frame budget."""
    v1, v2 = viewpoints
    if m2 == 0:
        return crop_by_viewpoint(cloud, v1, m1, f)
    f1 = f // 2
    f2 = f - f1
    first = crop_by_viewpoint(cloud, v1, m1, f1)
    remainder = PointCloud(first.x_p, label=cloud.label, source_id=cloud.source_id)
    second = crop_by_viewpoint(remainder, v2, m2, f2)
    x_m = np.concatenate([first.x_m, second.x_m], axis=0)
    frames = np.concatenate([first.x_fm[m1:], second.x_fm[m2:]], axis=0)
    order = np.concatenate([
        first.sorted_order[:m1],
        first.sorted_order[m1:][second.sorted_order],
    ])
    return PartialSample(
        x_p=second.x_p,
        x_m=x_m,
        x_fm=np.concatenate([x_m, frames], axis=0),
        viewpoint=np.asarray(v1, dtype=np.float64).reshape(3),
        sorted_order=order,
    )


# ---------------------------------------------------------------------------
# augmentation


def rotate_y(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return points @ rot.T


def augment_group(cloud: PointCloud, g: int, rng: np.random.Generator,
                  crop_fraction: float = 0.25,
                  scale_range=(0.8, 1.2),
                  jitter_sigma: float = 0.01,
                  jitter_clip: float = 0.05) -> AugmentedGroup:
    """G transformed-and-cropped variants of one cloud: y-axis rotation,
    uniform scaling, clipped Gaussian jitter, then a random viewpoint crop
    removing ``crop_fraction`` of the points."""
    variants = []
    n = len(cloud)
    m = max(1, int(round(n * crop_fraction)))
    for _ in range(g):
        pts = rotate_y(cloud.points, rng.uniform(0.0, 2.0 * np.pi))
        pts = pts * rng.uniform(*scale_range)
        if jitter_sigma > 0:
            pts = pts + np.clip(rng.normal(0.0, jitter_sigma, size=pts.shape),
                                -jitter_clip, jitter_clip)
        crop = crop_by_viewpoint(PointCloud(pts), sample_viewpoint(rng), m, 0)
        variants.append(PointCloud(crop.x_p, label=cloud.label,
                                   source_id=cloud.source_id))
    return AugmentedGroup(variants=variants, group_id=cloud.source_id)


# ---------------------------------------------------------------------------
# synthetic primitives


def generate_primitive(kind: str, n_points: int, rng: np.random.Generator,
                       normalized: bool = True) -> PointCloud:
    """Uniform surface sampling of a canonical primitive, labeled by kind."""
    if n_points < 8:
        raise ValueError("generate_primitive: need n_points >= 8")
    if kind not in PRIMITIVE_KINDS:
        raise ValueError(f"generate_primitive: unknown kind '{kind}'")
    sampler = {
        "sphere": _sample_sphere,
        "cube-surface": _sample_cube_surface,
        "cylinder": _sample_cylinder,
        "torus": _sample_torus,
        "plane-with-hole": _sample_plane_with_hole,
    }[kind]
    cloud = PointCloud(sampler(n_points, rng),
                       label=PRIMITIVE_KINDS.index(kind), source_id=kind)
    return normalize(cloud) if normalized else cloud


def _sample_sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube_surface(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    rows = np.arange(n)
    pts = np.empty((n, 3))
    pts[rows, axis] = sign
    pts[rows, (axis + 1) % 3] = uv[:, 0]
    pts[rows, (axis + 2) % 3] = uv[:, 1]
    return pts


def _sample_cylinder(n, rng, radius=0.5, height=2.0):
    side_area = 2.0 * np.pi * radius * height
    cap_area = 2.0 * np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    y_side = rng.uniform(-height / 2.0, height / 2.0, size=n)
    cap_sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    r_cap = radius * np.sqrt(rng.uniform(size=n))
    r = np.where(on_side, radius, r_cap)
    y = np.where(on_side, y_side, cap_sign * height / 2.0)
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _sample_torus(n, rng, ring_radius=1.0, tube_radius=0.35):
    # rejection on the surface-area jacobian (R + r cos phi)
    chunks = []
    need = n
    while need > 0:
        m = max(16, 2 * need)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
        keep = rng.uniform(size=m) <= (ring_radius + tube_radius * np.cos(phi)) / (
            ring_radius + tube_radius)
        theta, phi = theta[keep][:need], phi[keep][:need]
        rho = ring_radius + tube_radius * np.cos(phi)
        chunks.append(np.stack([rho * np.cos(theta), tube_radius * np.sin(phi),
                                rho * np.sin(theta)], axis=1))
        need -= theta.size
    return np.concatenate(chunks, axis=0)


def _sample_plane_with_hole(n, rng, half_side=1.0, hole_radius=0.4):
    chunks = []
    need = n
    while need > 0:
        m = max(16, 2 * need)
        xz = rng.uniform(-half_side, half_side, size=(m, 2))
        keep = np.einsum("ij,ij->i", xz, xz) >= hole_radius ** 2
        xz = xz[keep][:need]
        chunks.append(np.stack([xz[:, 0], np.zeros(xz.shape[0]), xz[:, 1]], axis=1))
        need -= xz.shape[0]
    return np.concatenate(chunks, axis=0)


def synthetic_corpus(n_shapes: int, n_points: int, rng: np.random.Generator,
                     kinds=PRIMITIVE_KINDS) -> list:
    """Desk-scale corpus: kinds cycle, each instance randomly stretched and
    rotated before normalization so classes have intra-class variety."""
    clouds = []
    for i in range(n_shapes):
        kind = kinds[i % len(kinds)]
        raw = generate_primitive(kind, n_points, rng, normalized=False)
        pts = raw.points * rng.uniform(0.6, 1.4, size=3)
        pts = rotate_y(pts, rng.uniform(0.0, 2.0 * np.pi))
        cloud = normalize(PointCloud(pts, label=raw.label,
                                     source_id=f"{kind}-{i:04d}"))
        clouds.append(cloud)
    return clouds


# ---------------------------------------------------------------------------
# splits


def make_split(clouds, train_fraction: float, seed: int):
    """Disjoint, exhaustive, seed-reproducible split; class-stratified when
    every cloud carries a label."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("make_split: train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    if clouds and all(c.label is not None for c in clouds):
        by_class = {}
        for idx, cloud in enumerate(clouds):
            by_class.setdefault(cloud.label, []).append(idx)
        train_idx, test_idx = [], []
        for label in sorted(by_class):
            members = np.array(by_class[label])
            if members.size < 2:
                raise ValueError(
                    f"make_split: class {label} has {members.size} sample(s), need >= 2")
            rng.shuffle(members)
            n_train = int(round(train_fraction * members.size))
            n_train = min(max(n_train, 1), members.size - 1)
            train_idx.extend(members[:n_train])
            test_idx.extend(members[n_train:])
    else:
        if len(clouds) < 2:
            raise ValueError("make_split: need at least 2 clouds")
        perm = rng.permutation(len(clouds))
        n_train = int(round(train_fraction * len(clouds)))
        n_train = min(max(n_train, 1), len(clouds) - 1)
        train_idx, test_idx = list(perm[:n_train]), list(perm[n_train:])
    train = [clouds[i] for i in sorted(train_idx)]
    test = [clouds[i] for i in sorted(test_idx)]
    return train, test
