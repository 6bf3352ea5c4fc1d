"""Point-cloud files, normalisation, toy corpora and the preprocessed hierarchy store.

A store is a directory holding ``manifest.txt`` and one little-endian
float32 blob per cloud and level (``cloud_00000_L0.bin`` ...), rows of 3.
Level ``k`` has ``N / D**k`` rows and is cluster-contiguous with respect to
level ``k + 1``.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import as_generator, check_cloud, check_positive_int
from .exceptions import CloudFormatError
from .geometry import build_hierarchy, check_pair

__all__ = [
    "NormalizationParams",
    "load_cloud",
    "save_cloud",
    "sample_mesh_surface",
    "normalize",
    "ingest",
    "toy_shapes",
    "TOY_KINDS",
    "HierarchyStore",
    "preprocess_dataset",
    "default_store_path",
]

logger = logging.getLogger(__name__)

CLOUD_SUFFIXES = {".xyz": "xyz", ".txt": "xyz", ".ply": "ply", ".obj": "obj", ".bin": "bin"}


@dataclass
class NormalizationParams:
    centroid: np.ndarray
    scale: float


# file formats

def _fmt_for(path, fmt):
    if fmt is not None:
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix not in CLOUD_SUFFIXES:
        raise ValueError(f"cannot infer point-cloud format from {path!s}")
    return CLOUD_SUFFIXES[suffix]


def _parse_floats(parts, path, lineno, count=3):
    try:
        values = [float(v) for v in parts[:count]]
    except ValueError:
        raise CloudFormatError("expected numeric coordinates", path, lineno) from None
    if len(values) < count:
        raise CloudFormatError(f"expected {count} coordinates, found {len(values)}", path, lineno)
    return values


def _load_xyz(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.replace(",", " ").split()
            if not parts or parts[0].startswith("#"):
                continue
            rows.append(_parse_floats(parts, path, lineno))
    return rows


def _load_obj(path, with_faces=False):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append(_parse_floats(parts[1:], path, lineno))
            elif parts[0] == "f" and with_faces:
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise CloudFormatError("bad face record", path, lineno) from None
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan triangulation of polygons
                faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
    return (verts, faces) if with_faces else verts


def _load_ply(path):
    with open(path, "rb") as fh:
        lines = fh.read().decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", path, 1)
    n_vertex, props, in_vertex, fmt, body_start = None, [], False, None, None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vertex is None:
        raise CloudFormatError("incomplete header", path)
    if fmt != "ascii":
        raise CloudFormatError(f"unsupported ply format {fmt!r} (only ascii)", path)
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise CloudFormatError("vertex element lacks x/y/z properties", path) from None
    rows = []
    body = lines[body_start:]
    for offset in range(n_vertex):
        lineno = body_start + offset + 1
        if offset >= len(body) or not body[offset].split():
            raise CloudFormatError(
                f"header declares {n_vertex} vertices but only {offset} rows follow", path, lineno
            )
        parts = body[offset].split()
        if len(parts) < len(props):
            raise CloudFormatError(f"expected {len(props)} values", path, lineno)
        rows.append(_parse_floats([parts[c] for c in cols], path, lineno))
    return rows


def load_cloud(path, fmt=None):
    """Read all vertices of an xyz, ply (ascii), obj or raw float32 file as an (N, 3) array."""
    fmt = _fmt_for(path, fmt)
    if fmt == "bin":
        data = np.fromfile(path, dtype="<f4")
        if data.size % 3:
            raise CloudFormatError(f"{data.size} floats is not a whole number of rows", path)
        rows = data.reshape(-1, 3).astype(np.float64)
    elif fmt == "xyz":
        rows = _load_xyz(path)
    elif fmt == "ply":
        rows = _load_ply(path)
    elif fmt == "obj":
        rows = _load_obj(path)
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    if len(rows) == 0:
        raise ValueError(f"{path}: file contains no points")
    return np.asarray(rows, dtype=np.float64)


def save_cloud(path, cloud, fmt=None):
    cloud = check_cloud(cloud)
    fmt = _fmt_for(path, fmt)
    if fmt == "bin":
        cloud.astype("<f4").tofile(path)
    elif fmt == "xyz":
        # float32 round-trips through 9 significant digits
        np.savetxt(path, cloud.astype(np.float32), fmt="%.9g")
    elif fmt == "ply":
        header = f"ply\nformat ascii 1.0\nelement vertex {len(cloud)}\n" \
                 "property float x\nproperty float y\nproperty float z\nend_header\n"
        with open(path, "w") as fh:
            fh.write(header)
            np.savetxt(fh, cloud.astype(np.float32), fmt="%.9g")
    else:
        raise ValueError(f"cannot write format {fmt!r}")


def sample_mesh_surface(vertices, faces, n_points, rng=None):
    """Area-weighted uniform sampling of ``n_points`` on a triangle mesh."""
    rng = as_generator(rng)
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if not areas.sum() > 0:
        raise ValueError("mesh has zero surface area")
    pick = rng.choice(len(tri), size=n_points, p=areas / areas.sum())
    u, v = rng.random((2, n_points))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = tri[pick]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


# normalisation and replica subsampling

def normalize(cloud):
    """Center on the centroid and scale so the largest point norm is 1."""
    cloud = check_cloud(cloud)
    centroid = cloud.mean(axis=0)
    centered = cloud - centroid
    scale = float(np.max(np.linalg.norm(centered, axis=1)))
    if scale == 0.0:
        scale = 1.0
    return centered / scale, NormalizationParams(centroid=centroid, scale=scale)


def ingest(cloud, n_points, replicas, rng=None):
    """Normalise ``cloud`` and draw ``replicas`` subsamples of ``n_points`` without replacement."""
    cloud = check_cloud(cloud)
    n_points = check_positive_int(n_points, "n_points")
    replicas = check_positive_int(replicas, "replicas")
    if len(cloud) < n_points:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than the requested {n_points}")
    rng = as_generator(rng)
    normed, params = normalize(cloud)
    subsets = [normed[rng.choice(len(normed), n_points, replace=False)] for _ in range(replicas)]
    return subsets, params


# toy shapes

TOY_KINDS = ("sphere", "torus", "two_boxes", "ring2d")


def _sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(n, rng, major=0.7, minor=0.3):
    # surface density of the tube angle is proportional to major + minor*cos(v)
    out = np.empty((0, 2))
    while len(out) < n:
        v = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
        keep = rng.uniform(0.0, major + minor, 2 * n) < major + minor * np.cos(v)
        u = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n].T
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _two_boxes(n, rng, side=0.6, gap=0.6):
    box = rng.integers(0, 2, n)
    face = rng.integers(0, 6, n)
    pts = rng.uniform(-0.5, 0.5, (n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2, 0.5, -0.5)
    pts *= side
    pts[:, 0] += np.where(box == 1, 1.0, -1.0) * (gap + side) / 2.0
    return pts


def _ring2d(n, rng):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)


_TOY_BUILDERS = {"sphere": _sphere, "torus": _torus, "two_boxes": _two_boxes, "ring2d": _ring2d}


def toy_shapes(kind, n_points, count, rng=None, max_angle=np.pi / 12):
    """Surface samples of a named toy shape with mild random rotation and ±10% scale jitter.

    Returns an array of shape (count, n_points, 3).
    """
    if kind not in _TOY_BUILDERS:
        raise ValueError(f"unknown toy shape {kind!r}; choose from {', '.join(TOY_KINDS)}")
    n_points = check_positive_int(n_points, "n_points")
    count = check_positive_int(count, "count")
    rng = as_generator(rng)
    out = np.empty((count, n_points, 3))
    for i in range(count):
        pts = _TOY_BUILDERS[kind](n_points, rng)
        axis = _sphere(1, rng)[0]
        angle = rng.uniform(-max_angle, max_angle)
        rot = Rotation.from_rotvec(angle * axis).as_matrix()
        out[i] = rng.uniform(0.9, 1.1) * pts @ rot.T
    return out


# hierarchy store

def default_store_path():
    return os.environ.get("MFM_STORE", "store")


class HierarchyStore:
    """Directory of preprocessed multi-level clouds.

    Use :meth:`create` to start a store and :meth:`add` to append clouds,
    then :meth:`flush` to write the manifest; :class:`HierarchyStore` (path)
    opens an existing one.
    """

    MANIFEST = "manifest.txt"

    def __init__(self, root):
        self.root = Path(root)
        self.meta = {}
        self.records = []
        manifest = self.root / self.MANIFEST
        if manifest.exists():
            self._read_manifest(manifest)

    @classmethod
    def create(cls, root, *, name, n_points, ratio, n_stages, replicas=1, seed=0):
        store = cls.__new__(cls)
        store.root = Path(root)
        store.root.mkdir(parents=True, exist_ok=True)
        store.meta = {
            "name": name, "n_points": int(n_points), "ratio": int(ratio),
            "n_stages": int(n_stages), "replicas": int(replicas), "seed": int(seed),
        }
        store.records = []
        return store

    @property
    def n_points(self):
        return int(self.meta["n_points"])

    @property
    def ratio(self):
        return int(self.meta["ratio"])

    @property
    def n_stages(self):
        return int(self.meta["n_stages"])

    def __len__(self):
        return len(self.records)

    def _blob(self, index, level):
        return self.root / f"cloud_{index:05d}_L{level}.bin"

    def add(self, levels, *, source="", replica=0, label="", params=None):
        index = len(self.records)
        if len(levels) != self.n_stages + 1:
            raise ValueError(f"expected {self.n_stages + 1} levels, got {len(levels)}")
        for k, level in enumerate(levels):
            expected = self.n_points // self.ratio**k
            if len(level) != expected:
                raise ValueError(f"level {k} has {len(level)} rows, expected {expected}")
            np.asarray(level, dtype="<f4").tofile(self._blob(index, k))
        centroid = np.zeros(3) if params is None else params.centroid
        scale = 1.0 if params is None else params.scale
        self.records.append({
            "source": source, "replica": int(replica), "label": label or "-",
            "centroid": np.asarray(centroid, dtype=np.float64), "scale": float(scale),
        })
        return index

    def flush(self):
        lines = ["# msflow hierarchy store"]
        lines += [f"{key} = {value}" for key, value in self.meta.items()]
        lines.append(f"count = {len(self.records)}")
        lines.append("[records]")
        for i, rec in enumerate(self.records):
            c = rec["centroid"]
            lines.append(
                f"{i}\t{rec['source']}\t{rec['replica']}\t{rec['label']}\t"
                f"{float(c[0])!r}\t{float(c[1])!r}\t{float(c[2])!r}\t{float(rec['scale'])!r}"
            )
        (self.root / self.MANIFEST).write_text("\n".join(lines) + "\n")

    def _read_manifest(self, path):
        in_records = False
        for line in path.read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            if line == "[records]":
                in_records = True
                continue
            if in_records:
                parts = line.split("\t")
                if len(parts) != 8:
                    raise CloudFormatError("malformed record", path)
                self.records.append({
                    "source": parts[1], "replica": int(parts[2]), "label": parts[3],
                    "centroid": np.array([float(v) for v in parts[4:7]]), "scale": float(parts[7]),
                })
            else:
                key, _, value = (p.strip() for p in line.partition("="))
                if key in ("n_points", "ratio", "n_stages", "replicas", "seed", "count"):
                    value = int(value)
                self.meta[key] = value

    def levels(self, index, check=True):
        """All levels of cloud ``index`` as float32 arrays, finest first."""
        out = []
        for k in range(self.n_stages + 1):
            data = np.fromfile(self._blob(index, k), dtype="<f4")
            expected = self.n_points // self.ratio**k
            if data.size != expected * 3:
                raise CloudFormatError(f"level {k} blob has {data.size // 3} rows, expected {expected}",
                                       self._blob(index, k))
            out.append(data.reshape(-1, 3))
        if check:
            for k in range(self.n_stages):
                check_pair(out[k + 1], out[k].astype(np.float64), self.ratio, atol=1e-6)
        return out

    def level_array(self, k):
        """Level ``k`` of every cloud stacked into shape (count, N / D**k, 3)."""
        return np.stack([self.levels(i, check=False)[k] for i in range(len(self))])

    def stage_pairs(self, k):
        """``(coarse, fine)`` arrays for training stage ``k``."""
        if not 0 <= k < self.n_stages:
            raise ValueError(f"stage {k} out of range for a {self.n_stages}-stage store")
        levels = [self.levels(i, check=False) for i in range(len(self))]
        fine = np.stack([lv[k] for lv in levels]).astype(np.float64)
        coarse = np.stack([lv[k + 1] for lv in levels]).astype(np.float64)
        return coarse, fine

    def labels(self):
        return [rec["label"] for rec in self.records]


def _iter_cloud_files(input_dir):
    root = Path(input_dir)
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.suffix.lower() in CLOUD_SUFFIXES:
            yield path


def preprocess_dataset(input_dir, out_root, n_points, ratio, n_stages, replicas=1, seed=0,
                       name=None, **downsample_kwargs):
    """Normalise, subsample and downsample every cloud under ``input_dir`` into a store.

    Each cloud gets its own random stream derived from ``seed`` and its
    position in the sorted file listing, so re-running is byte-identical.
    Labels are taken from the file's parent directory relative to
    ``input_dir`` (empty for top-level files). Unreadable clouds are logged
    and skipped; if none succeed a ``ValueError`` is raised.
    """
    files = list(_iter_cloud_files(input_dir))
    if not files:
        raise ValueError(f"no point-cloud files found under {input_dir}")
    store = HierarchyStore.create(out_root, name=name or Path(input_dir).name, n_points=n_points,
                                  ratio=ratio, n_stages=n_stages, replicas=replicas, seed=seed)
    seeds = np.random.SeedSequence(seed).spawn(len(files))
    failures = []
    for path, ss in zip(files, seeds):
        rel = path.relative_to(input_dir)
        label = rel.parent.as_posix() if rel.parent != Path(".") else ""
        try:
            cloud = load_cloud(path)
            subsets, params = ingest(cloud, n_points, replicas, np.random.default_rng(ss))
            for r, sub in enumerate(subsets):
                hier = build_hierarchy(sub, ratio, n_stages, **downsample_kwargs)
                store.add(hier.levels, source=rel.as_posix(), replica=r, label=label, params=params)
        except (ValueError, OSError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            failures.append((path, exc))
    if len(failures) == len(files):
        raise ValueError(f"all {len(files)} clouds failed to preprocess; first error: {failures[0][1]}")
    store.flush()
    return store
