"""Point-cloud datasets: synthetic shapes, OFF meshes, augmentation and batching.

On-disk layout of a dataset directory::

    manifest.txt   key = value lines
    train.pcd      PCD1 packed binary
    test.pcd
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SHAPE_FAMILIES = ("sphere", "cube", "cylinder", "torus", "plane")
PCD_MAGIC = b"PCD1"
TRANSLATE_RANGE = 0.1


class OFFError(ValueError):
    """Malformed OFF input; the message carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Mesh:
    vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3 int


@dataclass
class Split:
    points: np.ndarray  # S x N x 3
    labels: np.ndarray  # S, uint8-compatible ints

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Batch:
    coords: np.ndarray  # B x N x 3
    labels: np.ndarray  # B


@dataclass
class DatasetManifest:
    class_names: list
    n_points: int
    seed: int
    source: str
    train: Split = field(repr=False)
    test: Split = field(repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def counts(self, split: str) -> list:
        labels = getattr(self, split).labels
        return np.bincount(labels, minlength=self.n_classes).tolist()


# -- geometry ----------------------------------------------------------------

def normalize(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    centered = points - points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0:
        return centered
    return centered / radius


def augment(points: np.ndarray, seed, translate: float = TRANSLATE_RANGE) -> np.ndarray:
    """Random translation: one uniform offset in [-translate, translate] per axis."""
    rng = np.random.default_rng(seed)
    offset = rng.uniform(-translate, translate, size=3)
    return points + offset


def augment_batch(coords: np.ndarray, rng: np.random.Generator, translate: float = TRANSLATE_RANGE):
    offsets = rng.uniform(-translate, translate, size=(coords.shape[0], 1, 3))
    return coords + offsets


def _rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def _sample_family(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if name == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if name == "cube":
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        pts[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
        return pts
    if name == "cylinder":
        # side wall and both caps, area-weighted (r = 1, height 2)
        side, cap = 4 * np.pi, np.pi
        kind = rng.choice(3, size=n, p=[side / (side + 2 * cap), cap / (side + 2 * cap), cap / (side + 2 * cap)])
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = np.where(kind == 0, 1.0, np.sqrt(rng.uniform(0, 1, size=n)))
        z = np.where(kind == 0, rng.uniform(-1, 1, size=n), np.where(kind == 1, 1.0, -1.0))
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if name == "torus":
        big, small = 1.0, 0.35
        # rejection sampling gives uniform area density
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, size=2 * n)
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(0, 1, size=2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
        return out[:n]
    if name == "plane":
        xy = rng.uniform(-1, 1, size=(n, 2))
        n_bumps = 3
        centers = rng.uniform(-0.7, 0.7, size=(n_bumps, 2))
        heights = rng.uniform(0.15, 0.4, size=n_bumps)
        d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
        z = (heights * np.exp(-d2 / (2 * 0.2**2))).sum(1)
        return np.column_stack([xy, z])
    raise ValueError(f"unknown shape family {name!r}; choose from {', '.join(SHAPE_FAMILIES)}")


def sample_shape(name: str, n_points: int, rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
    """One raw (un-normalized) sample: family surface, random scale and z-rotation.

    ``jitter`` adds isotropic Gaussian noise of that standard deviation to every
    point after scaling, which makes neighbouring families harder to tell apart.
    """
    pts = _sample_family(name, n_points, rng)
    pts = pts * rng.uniform(0.8, 1.2)
    if jitter > 0:
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return _rotate_z(pts, rng.uniform(0, 2 * np.pi))


def _split_indices(labels: np.ndarray, rng: np.random.Generator, test_fraction: float = 0.2):
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def generate_synthetic(families: Sequence[str], samples_per_class: int, n_points: int = 1024,
                       seed: int = 0, jitter: float = 0.0) -> DatasetManifest:
    """Labelled clouds, one class per shape family, split 80/20 per class."""
    families = list(families)
    if len(families) < 2:
        raise ValueError("need at least two shape families")
    for name in families:
        if name not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {name!r}; choose from {', '.join(SHAPE_FAMILIES)}")
    if samples_per_class < 5:
        raise ValueError(f"samples_per_class={samples_per_class} is too small to split (need >= 5)")
    if n_points < 8:
        raise ValueError(f"n_points={n_points} must be >= 8")
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, name in enumerate(families):
        for _ in range(samples_per_class):
            clouds.append(normalize(sample_shape(name, n_points, rng, jitter)))
            labels.append(label)
    points = np.stack(clouds)
    labels = np.array(labels, dtype=np.int64)
    tr, te = _split_indices(labels, rng)
    return DatasetManifest(
        class_names=families, n_points=n_points, seed=seed, source="synthetic:" + ",".join(families) + (f";jitter={jitter!r}" if jitter else ""),
        train=Split(points[tr], labels[tr]), test=Split(points[te], labels[te]),
    )


# -- OFF meshes --------------------------------------------------------------

def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _numbers(tokens, lineno, cast):
    try:
        return [cast(t) for t in tokens]
    except ValueError:
        raise OFFError(f"non-numeric token in {' '.join(tokens)!r}", lineno) from None


def parse_off(data) -> Mesh:
    """Parse an OFF mesh; polygons are fan-triangulated from their first vertex.

    Accepts the ``OFF<nv> <nf> <ne>`` variant where counts share the header line.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = _content_lines(text)
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise OFFError("empty file", 1) from None
    head = tokens[0]
    if not head.startswith("OFF"):
        raise OFFError(f"missing OFF header, found {head!r}", lineno)
    rest = ([head[3:]] if head[3:] else []) + tokens[1:]
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise OFFError("truncated file: missing element counts", lineno + 1) from None
    counts = _numbers(rest, lineno, int)
    if len(counts) < 2:
        raise OFFError("expected vertex and face counts", lineno)
    nv, nf = counts[0], counts[1]
    if nv < 0 or nf < 0:
        raise OFFError("negative element count", lineno)

    vertices = np.zeros((nv, 3))
    for i in range(nv):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise OFFError(f"truncated file: expected {nv} vertices, got {i}", lineno + 1) from None
        coords = _numbers(tokens, lineno, float)
        if len(coords) < 3:
            raise OFFError("vertex needs three coordinates", lineno)
        vertices[i] = coords[:3]

    tris = []
    for i in range(nf):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise OFFError(f"truncated file: expected {nf} faces, got {i}", lineno + 1) from None
        vals = _numbers(tokens, lineno, int)
        k = vals[0]
        if k < 3 or len(vals) < k + 1:
            raise OFFError(f"face declares {k} vertices but lists {len(vals) - 1}", lineno)
        idx = vals[1:k + 1]
        for v in idx:
            if not 0 <= v < nv:
                raise OFFError(f"face index {v} out of range [0, {nv})", lineno)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return Mesh(vertices, faces)


def serialize_off(mesh: Mesh) -> bytes:
    buf = io.StringIO()
    buf.write("OFF\n")
    buf.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        buf.write(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        buf.write("3 " + " ".join(str(int(i)) for i in f) + "\n")
    return buf.getvalue().encode("utf-8")


def triangle_areas(mesh: Mesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n_points: int, seed) -> np.ndarray:
    """Area-weighted face choice, then uniform barycentric sampling inside the face."""
    areas = triangle_areas(mesh) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has no face with nonzero area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n_points, p=areas / total)
    u, v = rng.uniform(size=(2, n_points))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[face, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _mesh_class(path: Path, root: Path) -> str:
    rel = path.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    stem = path.stem
    return stem.rsplit("_", 1)[0] if "_" in stem else stem


def load_mesh_dir(mesh_dir, n_points: int = 1024, seed: int = 0):
    """Sample one cloud per OFF file below ``mesh_dir``.

    The class is the first sub-directory name, or for files at the top level the
    filename stem before its last underscore (ModelNet naming, ``chair_0001.off``).
    Files under a ``train``/``test`` directory keep that split; the rest are split
    80/20 per class.  Returns ``(manifest, errors)`` where errors lists
    ``(filename, message)`` for every file that failed to parse or sample.
    """
    root = Path(mesh_dir)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".off" and p.is_file())
    records, errors = [], []
    for i, path in enumerate(files):
        try:
            mesh = parse_off(path.read_bytes())
            pts = normalize(sample_surface(mesh, n_points, seed=[seed, i]))
        except ValueError as exc:
            errors.append((str(path.relative_to(root)), str(exc)))
            continue
        parts = {p.lower() for p in path.relative_to(root).parts[:-1]}
        fixed = "train" if "train" in parts else "test" if "test" in parts else None
        records.append((_mesh_class(path, root), pts, fixed))
    names = sorted({r[0] for r in records})
    if len(names) < 1:
        raise ValueError(f"no usable OFF files under {mesh_dir}")
    points = np.stack([r[1] for r in records])
    labels = np.array([names.index(r[0]) for r in records], dtype=np.int64)
    fixed = np.array([r[2] or "" for r in records])
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(fixed == "")
    tr, te = _split_indices(labels[free], rng) if len(free) else (np.zeros(0, int), np.zeros(0, int))
    train_idx = np.sort(np.concatenate([np.flatnonzero(fixed == "train"), free[tr]]))
    test_idx = np.sort(np.concatenate([np.flatnonzero(fixed == "test"), free[te]]))
    # class-grouped order, the same order the PCD1 writer stores
    train_idx = train_idx[np.argsort(labels[train_idx], kind="stable")]
    test_idx = test_idx[np.argsort(labels[test_idx], kind="stable")]
    manifest = DatasetManifest(
        class_names=names, n_points=n_points, seed=seed, source=f"meshes:{root}",
        train=Split(points[train_idx], labels[train_idx]), test=Split(points[test_idx], labels[test_idx]),
    )
    return manifest, errors


# -- batching ----------------------------------------------------------------

def iter_batches(split: Split, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
    """Yield batches in order (or in a shuffled order when ``rng`` is given)."""
    order = np.arange(len(split)) if rng is None else rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(split.points[idx], split.labels[idx])


# -- PCD1 packed binary ------------------------------------------------------

def write_pcd(split: Split, n_classes: int, path) -> None:
    """Magic, then uint32 C, C per-class counts, N; float64 coords; uint8 labels.

    Samples are stored grouped by class so the header counts describe the payload.
    """
    order = np.argsort(split.labels, kind="stable")
    labels = split.labels[order]
    points = split.points[order]
    counts = np.bincount(labels, minlength=n_classes) if len(labels) else np.zeros(n_classes, int)
    n = points.shape[1] if points.ndim == 3 else 0
    with open(path, "wb") as fh:
        fh.write(PCD_MAGIC)
        fh.write(struct.pack(f"<I{n_classes}II", n_classes, *counts.tolist(), n))
        fh.write(np.ascontiguousarray(points, dtype="<f8").tobytes())
        fh.write(labels.astype(np.uint8).tobytes())


def read_pcd(path) -> tuple:
    """Returns ``(split, n_classes)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != PCD_MAGIC:
        raise ValueError(f"{path}: not a PCD1 file")
    (c,) = struct.unpack_from("<I", raw, 4)
    counts = struct.unpack_from(f"<{c}I", raw, 8)
    (n,) = struct.unpack_from("<I", raw, 8 + 4 * c)
    off = 12 + 4 * c
    total = sum(counts)
    expected = off + total * n * 3 * 8 + total
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    points = np.frombuffer(raw, dtype="<f8", count=total * n * 3, offset=off).reshape(total, n, 3)
    labels = np.frombuffer(raw, dtype=np.uint8, count=total, offset=off + total * n * 24).astype(np.int64)
    if not np.array_equal(np.bincount(labels, minlength=c)[:c], np.array(counts)) or (total and labels.max() >= c):
        raise ValueError(f"{path}: labels disagree with header counts")
    return Split(points.astype(np.float64), labels), c


def save_dataset(ds: DatasetManifest, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pcd(ds.train, ds.n_classes, out / "train.pcd")
    write_pcd(ds.test, ds.n_classes, out / "test.pcd")
    lines = [
        f"classes = {','.join(ds.class_names)}",
        f"n_points = {ds.n_points}",
        f"seed = {ds.seed}",
        f"source = {ds.source}",
        f"train_count = {len(ds.train)}",
        f"test_count = {len(ds.test)}",
        f"train_per_class = {','.join(map(str, ds.counts('train')))}",
        f"test_per_class = {','.join(map(str, ds.counts('test')))}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_dataset(path) -> DatasetManifest:
    root = Path(path)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root}: no manifest.txt (is this a dataset directory?)")
    meta = read_manifest(root / "manifest.txt")
    train, c1 = read_pcd(root / "train.pcd")
    test, c2 = read_pcd(root / "test.pcd")
    names = meta["classes"].split(",")
    if not c1 == c2 == len(names):
        raise ValueError(f"{root}: class count mismatch between manifest and data files")
    if int(meta["train_count"]) != len(train) or int(meta["test_count"]) != len(test):
        raise ValueError(f"{root}: manifest sample counts disagree with data files")
    return DatasetManifest(
        class_names=names, n_points=int(meta["n_points"]), seed=int(meta["seed"]),
        source=meta.get("source", ""), train=train, test=test,
    )


def dataset_exists(path) -> bool:
    root = Path(path)
    return any(os.path.exists(root / f) for f in ("manifest.txt", "train.pcd", "test.pcd"))
