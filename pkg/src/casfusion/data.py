"""Synthetic labeled indoor scenes, partial views, sample files and manifests."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geom

CLASS_NAMES = ("floor", "wall", "table", "chair", "cabinet", "sofa", "lamp", "clutter")

# RGB per class index (cycled when C > 8)
PALETTE = (
    (152, 118, 84),   # floor
    (200, 200, 200),  # wall
    (230, 25, 75),    # table
    (60, 180, 75),    # chair
    (0, 130, 200),    # cabinet
    (245, 130, 48),   # sofa
    (255, 225, 25),   # lamp
    (145, 30, 180),   # clutter
)

# (min size, max size) of furniture boxes per class, in metres (w, d, h)
_FURNITURE = {
    2: ((0.8, 0.6, 0.7), (1.6, 1.0, 0.8)),
    3: ((0.4, 0.4, 0.8), (0.6, 0.6, 1.0)),
    4: ((0.5, 0.4, 1.2), (1.2, 0.6, 2.0)),
    5: ((1.6, 0.8, 0.7), (2.2, 1.0, 0.9)),
    6: ((0.15, 0.15, 1.2), (0.3, 0.3, 1.7)),
    7: ((0.2, 0.2, 0.1), (0.5, 0.5, 0.4)),
}

ASCII_MAGIC = "casfusion-ascii v1"
BINARY_MAGIC = b"CFPC1"


class GenerationError(ValueError):
    pass


class SampleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    extents: tuple[float, float, float] = (6.0, 5.0, 2.6)
    walls: int = 2
    furniture: dict[int, int] = field(default_factory=lambda: {2: 1, 3: 2, 4: 1, 5: 1, 6: 1, 7: 2})
    num_classes: int = 8
    points: int = 4608
    seed: int = 0

    def validate(self) -> None:
        if min(self.extents) < 0 or self.extents[0] <= 0 or self.extents[1] <= 0:
            raise GenerationError(f"room extents must be positive, got {self.extents}")
        if not 0 <= self.walls <= 4:
            raise GenerationError("walls must be between 0 and 4")
        if self.walls and self.extents[2] <= 0:
            raise GenerationError("walls need a positive room height")
        for cls, count in self.furniture.items():
            if not 2 <= cls < self.num_classes or count < 0:
                raise GenerationError(f"bad furniture entry class={cls} count={count}")
        if self.points < 1:
            raise GenerationError("points must be positive")


# -- primitive surfaces ----------------------------------------------------------
# A face is a tuple (kind, ...geometry, label): ("rect", origin, u, v, label),
# ("tube", base_center, radius, height, label) or ("disk", center, radius, 0, label).

def _rect(origin, u, v, label):
    return ("rect", np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float), label)


def _box_faces(lo, size, label):
    x, y, z = lo
    w, d, h = size
    return [
        _rect((x, y, z + h), (w, 0, 0), (0, d, 0), label),
        _rect((x, y, z), (w, 0, 0), (0, 0, h), label),
        _rect((x, y + d, z), (w, 0, 0), (0, 0, h), label),
        _rect((x, y, z), (0, d, 0), (0, 0, h), label),
        _rect((x + w, y, z), (0, d, 0), (0, 0, h), label),
    ]


def _cylinder_faces(center, radius, height, label):
    c = np.asarray(center, float)
    return [("tube", c, radius, height, label), ("disk", c + (0, 0, height), radius, 0.0, label)]


def _area(face) -> float:
    kind = face[0]
    if kind == "rect":
        return float(np.linalg.norm(np.cross(face[2], face[3])))
    if kind == "tube":
        return 2 * np.pi * face[2] * face[3]
    return np.pi * face[2] ** 2


def _sample_face(face, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = face[0]
    if kind == "rect":
        s, t = rng.random((2, n, 1))
        return face[1] + s * face[2] + t * face[3]
    theta = rng.uniform(0, 2 * np.pi, n)
    if kind == "tube":
        z = rng.uniform(0, face[3], n)
        return face[1] + np.stack([face[2] * np.cos(theta), face[2] * np.sin(theta), z], axis=1)
    r = face[2] * np.sqrt(rng.random(n))
    return face[1] + np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], axis=1)


def scene_faces(spec: SceneSpec, rng: np.random.Generator) -> list:
    sx, sy, sz = spec.extents
    faces = [_rect((0, 0, 0), (sx, 0, 0), (0, sy, 0), 0)]
    walls = [
        _rect((0, 0, 0), (sx, 0, 0), (0, 0, sz), 1),
        _rect((0, 0, 0), (0, sy, 0), (0, 0, sz), 1),
        _rect((0, sy, 0), (sx, 0, 0), (0, 0, sz), 1),
        _rect((sx, 0, 0), (0, sy, 0), (0, 0, sz), 1),
    ]
    faces += walls[:spec.walls]
    for cls in sorted(spec.furniture):
        lo_size, hi_size = _FURNITURE.get(cls, ((0.3, 0.3, 0.3), (1.0, 1.0, 1.0)))
        for _ in range(spec.furniture[cls]):
            size = np.minimum(rng.uniform(lo_size, hi_size), (sx, sy, sz if sz > 0 else 1.0))
            lo = (rng.uniform(0, sx - size[0]), rng.uniform(0, sy - size[1]), 0.0)
            if cls == 6:
                r = size[0] / 2
                faces += _cylinder_faces((lo[0] + r, lo[1] + r, 0.0), r, size[2], cls)
            else:
                faces += _box_faces(lo, size, cls)
    return faces


@dataclass
class Normalization:
    offset: np.ndarray
    scale: float

    def apply(self, p) -> np.ndarray:
        return (np.asarray(p, float) - self.offset) * self.scale


def fit_normalization(points: np.ndarray) -> Normalization:
    """Shift the bounding box to the origin and scale its largest side to 1."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = float((hi - lo).max())
    return Normalization(offset=lo, scale=1.0 / span if span > 0 else 1.0)


def _f32(p: np.ndarray) -> np.ndarray:
    return np.asarray(p, dtype=np.float32).astype(np.float64)


def synth_scene_raw(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples in room coordinates (metres)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    faces = scene_faces(spec, rng)
    areas = np.array([_area(f) for f in faces])
    if areas.sum() <= 0:
        raise GenerationError("scene has zero surface area")
    counts = rng.multinomial(spec.points, areas / areas.sum())
    pts, labels = [], []
    for face, n in zip(faces, counts):
        if n:
            pts.append(_sample_face(face, n, rng))
            labels.append(np.full(n, face[-1], dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Labeled surface points normalized into the unit cube (float32-exact values)."""
    pts, labels = synth_scene_raw(spec)
    return _f32(fit_normalization(pts).apply(pts)), labels


def class_area_share(spec: SceneSpec) -> np.ndarray:
    """Expected per-class point share implied by surface areas."""
    faces = scene_faces(spec, np.random.default_rng(spec.seed))
    share = np.zeros(spec.num_classes)
    for f in faces:
        share[f[-1]] += _area(f)
    return share / share.sum()


def sample_viewpoint(rng: np.random.Generator, center=(0.5, 0.5, 0.5), diagonal: float = np.sqrt(3),
                     min_elevation: float = np.radians(20), max_elevation: float = np.radians(60)) -> np.ndarray:
    """A point on the upper hemisphere around ``center`` at 1.5x the scene diagonal."""
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(min_elevation, max_elevation)
    direction = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return np.asarray(center, float) + 1.5 * diagonal * direction


@dataclass
class Partial:
    points: np.ndarray
    source: np.ndarray
    resampled: bool = False
    degenerate: bool = False


def make_partial(gt_points, viewpoint, n: int, seed: int, method: str = "fps",
                 radius_factor: float = 1000.0) -> Partial:
    """Visible subset of ``gt_points`` reduced to exactly ``n`` points.

    When fewer than ``n`` points are visible the visible set is padded by
    sampling with replacement and ``resampled`` is set.
    """
    gt_points = np.asarray(gt_points, float)
    vis = geom.hpr_visible(gt_points, viewpoint, radius_factor)
    visible = vis.indices
    rng = np.random.default_rng(seed)
    resampled = False
    if len(visible) == n:
        chosen = visible
    elif len(visible) > n:
        if method == "fps":
            chosen = visible[geom.farthest_point_sample(gt_points[visible], n, seed)]
        elif method == "uniform":
            chosen = np.sort(rng.choice(visible, size=n, replace=False))
        else:
            raise ValueError(f"unknown partial sampling method {method!r}")
    else:
        resampled = True
        chosen = np.concatenate([visible, rng.choice(visible, size=n - len(visible))])
    return Partial(points=gt_points[chosen], source=chosen, resampled=resampled,
                   degenerate=vis.degenerate)


@dataclass
class SceneSample:
    sample_id: str
    partial: np.ndarray
    gt_points: np.ndarray
    gt_labels: np.ndarray
    viewpoint: np.ndarray
    num_classes: int = 8

    @property
    def key(self) -> int:
        return zlib.crc32(self.sample_id.encode())


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_sample(template: SceneSpec, seed: int, index: int, n_partial: int,
                partial_method: str = "fps", radius_factor: float = 1000.0) -> tuple[SceneSample, Partial]:
    s = sample_seed(seed, index)
    rng = np.random.default_rng(s)
    spec = replace(template, seed=s)
    gt, labels = synth_scene(spec)
    lo, hi = gt.min(axis=0), gt.max(axis=0)
    view = sample_viewpoint(rng, center=(lo + hi) / 2, diagonal=float(np.linalg.norm(hi - lo)))
    partial = make_partial(gt, view, n_partial, s, method=partial_method, radius_factor=radius_factor)
    sample = SceneSample(sample_id=f"scene_{index:05d}", partial=partial.points, gt_points=gt,
                         gt_labels=labels, viewpoint=view, num_classes=template.num_classes)
    return sample, partial


# -- sample files ---------------------------------------------------------------

def save_sample(path, points, labels=None, num_classes: int = 8, fmt: str | None = None) -> None:
    """Write points (+ optional labels, -1 when absent) as ASCII or binary."""
    path = Path(path)
    points = np.asarray(points, dtype=np.float64)
    labels = np.full(len(points), -1, dtype=np.int64) if labels is None else np.asarray(labels)
    fmt = fmt or ("ascii" if path.suffix == ".txt" else "binary")
    if fmt == "ascii":
        lines = [f"{ASCII_MAGIC} n={len(points)} c={num_classes}"]
        p32 = points.astype(np.float32)
        lines += [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in
                  zip(p32.astype(float).tolist(), labels.tolist())]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<II", len(points), num_classes))
            fh.write(points.astype("<f4").tobytes())
            fh.write(labels.astype("<i4").tobytes())
    else:
        raise ValueError(f"unknown sample format {fmt!r}")


def load_sample(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read a sample file; returns (points, labels, num_classes)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        return _load_binary(raw, path)
    return _load_ascii(raw.decode("utf-8", errors="replace"), path)


def _check_labels(labels: np.ndarray, c: int, path, line_of=lambda i: i + 1, what="row") -> None:
    bad = np.flatnonzero((labels < -1) | (labels >= c))
    if len(bad):
        i = int(bad[0])
        raise SampleFormatError(f"{path}: {what} {line_of(i)}: label {int(labels[i])} outside [-1, {c})")


def _load_binary(raw: bytes, path) -> tuple[np.ndarray, np.ndarray, int]:
    head = len(BINARY_MAGIC)
    if len(raw) < head + 8:
        raise SampleFormatError(f"{path}: truncated header")
    n, c = struct.unpack_from("<II", raw, head)
    need = head + 8 + 12 * n + 4 * n
    if len(raw) != need:
        raise SampleFormatError(f"{path}: expected {need} bytes for n={n}, found {len(raw)}")
    off = head + 8
    pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 12 * n).astype(np.int64)
    _check_labels(labels, c, path, line_of=lambda i: i, what="row")
    return pts, labels, int(c)


def _load_ascii(text: str, path) -> tuple[np.ndarray, np.ndarray, int]:
    lines = text.splitlines()
    if not lines:
        raise SampleFormatError(f"{path}: line 1: empty file")
    head = lines[0].split()
    try:
        if " ".join(head[:2]) != ASCII_MAGIC or len(head) != 4:
            raise ValueError
        n = int(head[2].removeprefix("n="))
        c = int(head[3].removeprefix("c="))
    except ValueError:
        raise SampleFormatError(f"{path}: line 1: malformed header {lines[0]!r}") from None
    body = lines[1:]
    if len(body) < n:
        raise SampleFormatError(f"{path}: line {len(lines) + 1}: expected {n} points, found {len(body)}")
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body[:n]):
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError
            pts[i] = [float(v) for v in parts[:3]]
            labels[i] = int(parts[3])
        except ValueError:
            raise SampleFormatError(f"{path}: line {i + 2}: malformed row {line!r}") from None
    if any(line.strip() for line in body[n:]):
        raise SampleFormatError(f"{path}: line {n + 2}: unexpected trailing data")
    _check_labels(labels, c, path, line_of=lambda i: i + 2, what="line")
    return pts, labels, c


def write_ply(path, points, labels) -> None:
    """ASCII PLY with per-vertex class colors."""
    points = np.asarray(points, float)
    labels = np.asarray(labels, dtype=np.int64)
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    rows = []
    for (x, y, z), l in zip(points.tolist(), labels.tolist()):
        r, g, b = PALETTE[l % len(PALETTE)] if l >= 0 else (0, 0, 0)
        rows.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(header + rows) + "\n")


def check_ply(path) -> int:
    """Validate header/vertex-count consistency; returns the vertex count."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise SampleFormatError(f"{path}: missing ply magic")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise SampleFormatError(f"{path}: missing end_header") from None
    count = None
    props = 0
    for line in lines[1:end]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props += 1
    body = [line for line in lines[end + 1:] if line.strip()]
    if count is None or len(body) != count:
        raise SampleFormatError(f"{path}: header declares {count} vertices, found {len(body)}")
    for i, line in enumerate(body):
        if len(line.split()) != props:
            raise SampleFormatError(f"{path}: line {end + 2 + i}: expected {props} values")
    return count


# -- datasets -------------------------------------------------------------------

@dataclass
class ManifestEntry:
    sample_id: str
    split: str
    partial_path: Path
    gt_path: Path
    viewpoint: np.ndarray


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    n_partial: int
    n_gt: int
    num_classes: int
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def write_manifest(path, manifest: Manifest) -> None:
    root = Path(path).parent
    lines = [f"# casfusion-manifest v1 n={manifest.n_partial} m_gt={manifest.n_gt} "
             f"c={manifest.num_classes}"]
    for e in manifest.entries:
        v = " ".join(repr(float(x)) for x in e.viewpoint)
        lines.append("\t".join([e.sample_id, e.split, str(e.partial_path.relative_to(root)),
                                str(e.gt_path.relative_to(root)), v]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    root = path.parent
    lines = path.read_text().splitlines()
    consts = {}
    entries = []
    for i, line in enumerate(lines, start=1):
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    consts[k] = int(v)
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise SampleFormatError(f"{path}: line {i}: expected 5 tab-separated fields")
        view = np.array([float(x) for x in parts[4].split()])
        entries.append(ManifestEntry(parts[0], parts[1], root / parts[2], root / parts[3], view))
    missing = {"n", "m_gt", "c"} - set(consts)
    if missing:
        raise SampleFormatError(f"{path}: manifest header lacks {sorted(missing)}")
    return Manifest(entries, consts["n"], consts["m_gt"], consts["c"], root)


def load_entry(entry: ManifestEntry, num_classes: int) -> SceneSample:
    partial, _, _ = load_sample(entry.partial_path)
    gt, labels, c = load_sample(entry.gt_path)
    if c != num_classes:
        raise SampleFormatError(f"{entry.gt_path}: file has c={c}, manifest says {num_classes}")
    return SceneSample(entry.sample_id, partial, gt, labels, entry.viewpoint, c)


def split_assignment(count: int, ratios: tuple[float, float], seed: int) -> list[str]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(round(ratios[0] * count))
    splits = ["test"] * count
    for i in order[:n_train]:
        splits[i] = "train"
    return splits


def build_dataset(out_dir, count: int, template: SceneSpec, ratios=(0.8, 0.2), seed: int = 0,
                  n_partial: int = 1024, fmt: str = "binary", partial_method: str = "fps",
                  radius_factor: float = 1000.0) -> Manifest:
    """Generate ``count`` scenes under ``out_dir`` and write ``manifest.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = split_assignment(count, ratios, seed)
    ext = ".txt" if fmt == "ascii" else ".bin"
    entries = []
    for i in range(count):
        sample, _ = make_sample(template, seed, i, n_partial, partial_method, radius_factor)
        pp = out_dir / f"{sample.sample_id}_partial{ext}"
        gp = out_dir / f"{sample.sample_id}_gt{ext}"
        save_sample(pp, sample.partial, None, template.num_classes, fmt)
        save_sample(gp, sample.gt_points, sample.gt_labels, template.num_classes, fmt)
        entries.append(ManifestEntry(sample.sample_id, splits[i], pp, gp, sample.viewpoint))
    manifest = Manifest(entries, n_partial, template.points, template.num_classes, out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest
