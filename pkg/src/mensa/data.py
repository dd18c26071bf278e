"""Point-cloud datasets: PointDA-10 loading, synthetic multi-domain generation,
folds and augmentation.

Every random draw is made from a per-sample seed derived with
``numpy.random.SeedSequence`` so that serial and parallel producers yield the
same clouds.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_NUM_POINTS = 1024
PRIMITIVES = ("sphere", "box", "cylinder", "cone", "torus")
MIN_SHIFTED_POINTS = 8
SPLITS = ("train", "test")


class DataError(Exception):
    pass


class FormatError(DataError):
    pass


class GenerationError(DataError):
    pass


class StratificationError(DataError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    class_id: int = 0
    domain_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise FormatError(f"expected an M x 3 point array, got shape {self.points.shape}")

    def __len__(self):
        return len(self.points)


@dataclass
class DomainDataset:
    """All clouds of one domain and split, stored as a dense (S, N, 3) array."""

    points: np.ndarray
    labels: np.ndarray
    domain_id: int
    class_names: list[str]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.points) != len(self.labels):
            raise DataError("points and labels disagree in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("class id out of range for class_names")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> PointCloud:
        return PointCloud(self.points[i], int(self.labels[i]), self.domain_id)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_points(self) -> int:
        return self.points.shape[1] if self.points.ndim == 3 else 0

    @property
    def samples(self) -> list[PointCloud]:
        return [self[i] for i in range(len(self))]

    def subset(self, indices) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.points[indices], self.labels[indices], self.domain_id,
                             list(self.class_names), self.split, self.name)


@dataclass
class DomainShiftSpec:
    density_keep_fraction: float = 1.0
    jitter_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    # (low, high) in degrees for rotations about x, y, z
    rotation_bias: tuple = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    seed: int = 0

    def __post_init__(self):
        self.rotation_bias = tuple(tuple(float(v) for v in r) for r in self.rotation_bias)
        self.validate()

    def validate(self):
        problems = []
        if not 0.0 < self.density_keep_fraction <= 1.0:
            problems.append(f"density_keep_fraction={self.density_keep_fraction} not in (0, 1]")
        if not self.jitter_sigma >= 0.0:
            problems.append(f"jitter_sigma={self.jitter_sigma} must be >= 0")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            problems.append(f"occlusion_fraction={self.occlusion_fraction} not in [0, 1)")
        if len(self.rotation_bias) != 3 or any(len(r) != 2 or r[0] > r[1] for r in self.rotation_bias):
            problems.append(f"rotation_bias={self.rotation_bias} must be three (low, high) ranges")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def is_identity(self) -> bool:
        return (self.density_keep_fraction == 1.0 and self.jitter_sigma == 0.0
                and self.occlusion_fraction == 0.0
                and all(lo == hi == 0.0 for lo, hi in self.rotation_bias))


@dataclass
class FoldSplit:
    k: int
    assignments: np.ndarray

    def fold(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == i)

    def train_indices(self, i: int) -> np.ndarray:
        """Indices outside fold ``i``."""
        return np.flatnonzero(self.assignments != i)

    @property
    def sizes(self) -> list[int]:
        return [int((self.assignments == i).sum()) for i in range(self.k)]


# ---------------------------------------------------------------------------
# per-cloud operations


def _normalize_array(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale == 0.0:
        return np.zeros_like(pts)
    return centered / scale


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    return PointCloud(_normalize_array(pc.points), pc.class_id, pc.domain_id)


def _resample_array(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    m = len(points)
    if m == 0:
        raise ValueError("cannot resample an empty point cloud")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return points[idx]


def resample_points(pc: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Subsample without replacement, or pad with uniform draws from the cloud."""
    return PointCloud(_resample_array(pc.points, n, rng), pc.class_id, pc.domain_id)


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation Rz @ Ry @ Rx for angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def augment(pc: PointCloud, jitter_sigma: float, rotate_z: bool,
            rng: np.random.Generator) -> PointCloud:
    """Clipped Gaussian jitter (|noise| <= 3 sigma) and an optional random
    rotation about the gravity (z) axis."""
    pts = pc.points.astype(np.float64)
    if rotate_z:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        pts = pts @ rotation_matrix(0.0, 0.0, angle).T
    if jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, jitter_sigma, size=pts.shape),
                        -3 * jitter_sigma, 3 * jitter_sigma)
        pts = pts + noise
    return PointCloud(pts, pc.class_id, pc.domain_id)


def augment_batch(points: np.ndarray, jitter_sigma: float, rotate_z: bool,
                  rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`augment` over a (B, N, 3) batch."""
    out = points.astype(np.float32, copy=True)
    if rotate_z:
        angles = rng.uniform(0.0, 2.0 * math.pi, size=len(out))
        c, s = np.cos(angles), np.sin(angles)
        x, y = out[..., 0].copy(), out[..., 1].copy()
        out[..., 0] = c[:, None] * x - s[:, None] * y
        out[..., 1] = s[:, None] * x + c[:, None] * y
    if jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, jitter_sigma, size=out.shape),
                        -3 * jitter_sigma, 3 * jitter_sigma)
        out += noise.astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# synthetic primitives


def _sample_box(n, rng):
    a, b, c = rng.uniform(0.5, 1.0, size=3)
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([a, b, c])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
    return u


def _sample_cylinder(n, rng):
    r = rng.uniform(0.3, 0.6)
    h = rng.uniform(0.8, 1.6)
    side, cap = 2 * math.pi * r * h, math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, size=n), np.where(part == 1, -h / 2, h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_cone(n, rng):
    r = rng.uniform(0.4, 0.8)
    h = rng.uniform(0.8, 1.6)
    side, base = math.pi * r * math.hypot(r, h), math.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + base)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    # radial coordinate with density proportional to radius
    t = np.sqrt(rng.uniform(0, 1, size=n))
    rad = r * t
    z = np.where(on_side, h * (1 - t), 0.0) - h / 3
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_torus(n, rng):
    R = rng.uniform(0.6, 0.8)
    r = rng.uniform(0.15, 0.3)
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * math.pi, size=2 * n)
        v = rng.uniform(0, 2 * math.pi, size=2 * n)
        # area element is proportional to R + r cos v
        keep = rng.uniform(0, 1, size=2 * n) < (R + r * np.cos(v)) / (R + r)
        u, v = u[keep], v[keep]
        pts = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _sample_sphere(n, rng):
    radii = rng.uniform(0.8, 1.2, size=3)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radii


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
}


def sample_primitive(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform surface samples of a randomly proportioned primitive."""
    try:
        return _SAMPLERS[kind](n, rng)
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; choose from {PRIMITIVES}") from None


def _stage_rngs(seed: int, class_idx: int, sample_idx: int, split: str):
    """Independent generators per pipeline stage so that switching one shift
    axis on or off leaves every other draw unchanged."""
    ss = np.random.SeedSequence([seed, class_idx, sample_idx, SPLITS.index(split)])
    names = ("shape", "occlusion", "density", "jitter", "rotation", "resample")
    return dict(zip(names, (np.random.default_rng(s) for s in ss.spawn(len(names)))))


def shift_points(points: np.ndarray, shift: DomainShiftSpec, rngs: dict) -> np.ndarray:
    """Occlusion cut, density subsample, jitter and rotation, in that order.

    ``rngs`` maps stage names (occlusion, density, jitter, rotation) to
    generators.
    """
    pts = np.asarray(points, dtype=np.float64)
    if shift.occlusion_fraction > 0:
        rng = rngs["occlusion"]
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        proj = (pts - pts.mean(axis=0)) @ u
        cut = np.quantile(proj, 1.0 - shift.occlusion_fraction)
        pts = pts[proj <= cut]
    if shift.density_keep_fraction < 1.0:
        keep = int(round(len(pts) * shift.density_keep_fraction))
        idx = np.sort(rngs["density"].choice(len(pts), size=max(keep, 0), replace=False))
        pts = pts[idx]
    if len(pts) < MIN_SHIFTED_POINTS:
        raise GenerationError(
            f"shift leaves {len(pts)} points (< {MIN_SHIFTED_POINTS}); "
            f"occlusion_fraction={shift.occlusion_fraction}, "
            f"density_keep_fraction={shift.density_keep_fraction}")
    if shift.jitter_sigma > 0:
        pts = pts + rngs["jitter"].normal(0.0, shift.jitter_sigma, size=pts.shape)
    if any(hi > lo or lo != 0.0 for lo, hi in shift.rotation_bias):
        angles = [math.radians(rngs["rotation"].uniform(lo, hi)) for lo, hi in shift.rotation_bias]
        pts = pts @ rotation_matrix(*angles).T
    return pts


def generate_synthetic_domain(classes: Sequence[str], per_class: int, shift: DomainShiftSpec,
                              n_points: int = DEFAULT_NUM_POINTS, domain_id: int = 0,
                              split: str = "train", raw_points: int = 2048,
                              name: str = "") -> DomainDataset:
    """Surface-sample each primitive class ``per_class`` times and apply ``shift``.

    Raw shapes are normalized before shifting so that jitter and occlusion act
    in unit-sphere units; the shifted cloud is normalized again and resampled
    to ``n_points``.
    """
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    shift.validate()
    points = np.empty((len(classes) * per_class, n_points, 3), dtype=np.float32)
    labels = np.repeat(np.arange(len(classes)), per_class)
    for c, kind in enumerate(classes):
        for i in range(per_class):
            rngs = _stage_rngs(shift.seed, c, i, split)
            raw = _normalize_array(sample_primitive(kind, raw_points, rngs["shape"]))
            shifted = _normalize_array(shift_points(raw, shift, rngs))
            points[c * per_class + i] = _resample_array(shifted, n_points, rngs["resample"])
    return DomainDataset(points, labels, domain_id, list(classes), split, name)


# ---------------------------------------------------------------------------
# folds


def make_folds(ds: DomainDataset, k: int, seed: int) -> FoldSplit:
    """Class-stratified k-fold assignment.

    Each class is shuffled and dealt round-robin, continuing the deal where the
    previous class stopped so that overall fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    small = [ds.class_names[c] for c in range(ds.num_classes) if 0 < counts[c] < k]
    if small:
        raise StratificationError(f"classes with fewer than k={k} samples: {small}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(ds), dtype=np.int64)
    offset = 0
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        assignments[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldSplit(k, assignments)


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<domain>/<class>/<split>/*.npy


def _read_cloud(path: Path) -> np.ndarray:
    try:
        arr = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable point array ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise FormatError(f"{path}: expected an M x 3 array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number):
        raise FormatError(f"{path}: non-numeric dtype {arr.dtype}")
    return arr


def load_pointda_dir(root_path, domain_name: str, split: str = "train",
                     n_points: int = DEFAULT_NUM_POINTS, seed: int = 0,
                     domain_id: int = 0) -> DomainDataset:
    """Load ``<root>/<domain>/<class>/<split>/*.npy``.

    Class ids follow the lexicographic order of the class directory names.
    Every cloud is normalized to the unit sphere and resampled to
    ``n_points`` with a seed derived from (seed, class id, file index).
    """
    domain_dir = Path(root_path) / domain_name
    if not domain_dir.is_dir():
        raise FileNotFoundError(f"domain directory not found: {domain_dir}")
    class_names = sorted(p.name for p in domain_dir.iterdir() if p.is_dir())
    if not class_names:
        raise FormatError(f"{domain_dir}: no class subdirectories")
    clouds, labels = [], []
    for c, cname in enumerate(class_names):
        files = sorted((domain_dir / cname / split).glob("*.npy"))
        for i, f in enumerate(files):
            pts = _normalize_array(_read_cloud(f))
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i, SPLITS.index(split)]))
            clouds.append(_resample_array(pts, n_points, rng))
            labels.append(c)
    if not clouds:
        raise FormatError(f"{domain_dir}: no '{split}' samples found")
    return DomainDataset(np.stack(clouds), np.array(labels), domain_id, class_names, split, domain_name)


def save_domain(ds: DomainDataset, root, domain_name: str):
    """Write one split of a domain in the PointDA layout (float32 .npy)."""
    for c, cname in enumerate(ds.class_names):
        d = Path(root) / domain_name / cname / ds.split
        d.mkdir(parents=True, exist_ok=True)
        for j, i in enumerate(np.flatnonzero(ds.labels == c)):
            np.save(d / f"{j:05d}.npy", ds.points[i].astype("<f4"))


def write_manifest(path, entries: dict):
    lines = [f"{k} = {v}" for k, v in entries.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def validate_layout(root) -> tuple[dict, list[str]]:
    """Check a dataset root against the PointDA layout.

    Returns per-domain/split sample counts and a list of problems (empty when
    the layout is valid). Every array file is opened and shape-checked.
    """
    root = Path(root)
    counts: dict = {}
    problems: list[str] = []
    if not root.is_dir():
        return counts, [f"root directory not found: {root}"]
    domains = sorted(p for p in root.iterdir() if p.is_dir())
    if not domains:
        problems.append(f"{root}: no domain directories")
    for dom in domains:
        classes = sorted(p for p in dom.iterdir() if p.is_dir())
        if not classes:
            problems.append(f"{dom}: no class directories")
        for cls in classes:
            splits = {p.name for p in cls.iterdir() if p.is_dir()}
            unknown = splits - set(SPLITS)
            if unknown:
                problems.append(f"{cls}: unexpected split directories {sorted(unknown)}")
            if not splits & set(SPLITS):
                problems.append(f"{cls}: no train/test split directories")
            for split in SPLITS:
                files = sorted((cls / split).glob("*.npy"))
                key = f"{dom.name}/{split}"
                counts[key] = counts.get(key, 0) + len(files)
                for f in files:
                    try:
                        _read_cloud(f)
                    except FormatError as exc:
                        problems.append(str(exc))
        counts[f"{dom.name}/classes"] = len(classes)
    return counts, problems


# ---------------------------------------------------------------------------
# default desk benchmark


@dataclass
class SyntheticDomain:
    name: str
    shift: DomainShiftSpec


@dataclass
class BenchmarkSpec:
    classes: list = field(default_factory=lambda: ["box", "cylinder", "cone", "torus"])
    domains: list = field(default_factory=list)
    per_class: int = 200
    test_per_class: int = 50
    n_points: int = DEFAULT_NUM_POINTS


def default_benchmark(seed: int = 0, per_class: int = 200, test_per_class: int = 50,
                      n_points: int = DEFAULT_NUM_POINTS) -> BenchmarkSpec:
    """Clean source, noisy+tilted target, sparse+occluded target."""
    domains = [
        SyntheticDomain("clean", DomainShiftSpec(seed=seed * 3 + 0)),
        SyntheticDomain("noisy", DomainShiftSpec(jitter_sigma=0.03,
                                                 rotation_bias=((20.0, 50.0), (0.0, 0.0), (0.0, 360.0)),
                                                 seed=seed * 3 + 1)),
        SyntheticDomain("sparse", DomainShiftSpec(density_keep_fraction=0.3, occlusion_fraction=0.4,
                                                  seed=seed * 3 + 2)),
    ]
    return BenchmarkSpec(domains=domains, per_class=per_class, test_per_class=test_per_class,
                         n_points=n_points)


def shift_to_manifest(shift: DomainShiftSpec) -> dict:
    rb = ";".join(f"{lo:g}:{hi:g}" for lo, hi in shift.rotation_bias)
    return {
        "shift.density_keep_fraction": repr(shift.density_keep_fraction),
        "shift.jitter_sigma": repr(shift.jitter_sigma),
        "shift.occlusion_fraction": repr(shift.occlusion_fraction),
        "shift.rotation_bias": rb,
        "shift.seed": str(shift.seed),
    }


def shift_from_manifest(entries: dict) -> DomainShiftSpec:
    rb = tuple(tuple(float(v) for v in part.split(":")) for part in entries["shift.rotation_bias"].split(";"))
    return DomainShiftSpec(float(entries["shift.density_keep_fraction"]), float(entries["shift.jitter_sigma"]),
                           float(entries["shift.occlusion_fraction"]), rb, int(entries["shift.seed"]))


def write_benchmark(bench: BenchmarkSpec, root, domain_ids: dict | None = None) -> list[Path]:
    """Generate and write every domain of ``bench`` with a manifest per domain."""
    root = Path(root)
    written = []
    for d, dom in enumerate(bench.domains):
        did = d if domain_ids is None else domain_ids[dom.name]
        counts = {}
        for split, per in (("train", bench.per_class), ("test", bench.test_per_class)):
            ds = generate_synthetic_domain(bench.classes, per, dom.shift, bench.n_points, did, split, name=dom.name)
            save_domain(ds, root, dom.name)
            counts[split] = len(ds)
        entries = {
            "domain": dom.name,
            "domain_id": str(did),
            "classes": ",".join(bench.classes),
            "per_class.train": str(bench.per_class),
            "per_class.test": str(bench.test_per_class),
            "count.train": str(counts["train"]),
            "count.test": str(counts["test"]),
            "num_points": str(bench.n_points),
            **shift_to_manifest(dom.shift),
        }
        write_manifest(root / dom.name / "manifest.txt", entries)
        written.append(root / dom.name)
    return written


def load_synthetic_domain(root, domain_name: str, split: str = "train",
                          domain_id: int | None = None) -> DomainDataset:
    """Load a domain written by :func:`write_benchmark`.

    Class ids come from the manifest order; arrays are read as stored.
    """
    dom_dir = Path(root) / domain_name
    man = read_manifest(dom_dir / "manifest.txt")
    classes = man["classes"].split(",")
    did = int(man["domain_id"]) if domain_id is None else domain_id
    clouds, labels = [], []
    for c, cname in enumerate(classes):
        for f in sorted((dom_dir / cname / split).glob("*.npy")):
            clouds.append(_read_cloud(f).astype(np.float32))
            labels.append(c)
    if not clouds:
        raise FormatError(f"{dom_dir}: no '{split}' samples found")
    return DomainDataset(np.stack(clouds), np.array(labels), did, classes, split, domain_name)


def load_domain(root, domain_name: str, split: str = "train", n_points: int = DEFAULT_NUM_POINTS,
                seed: int = 0, domain_id: int = 0) -> DomainDataset:
    """Load a synthetic domain if it carries a manifest, else a PointDA directory."""
    if (Path(root) / domain_name / "manifest.txt").is_file():
        ds = load_synthetic_domain(root, domain_name, split, domain_id)
        if ds.num_points != n_points:
            rng = np.random.default_rng(seed)
            ds.points = np.stack([_resample_array(p, n_points, rng) for p in ds.points])
        return ds
    return load_pointda_dir(root, domain_name, split, n_points, seed, domain_id)
