"""Mesh ingestion, point sampling, normalization, and Chamfer distance.

Meshes are triangle soups loaded from OBJ.  Point clouds are stored as
struct-of-arrays and carry the affine transform that maps the original
mesh coordinates to the cloud's current frame, so downstream annotations
(axes, ranges) can always be moved between frames.

All operations here are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

PC_MAGIC = b"PCLD"
PC_VERSION = 1


class MeshError(ValueError):
    """Raised for unloadable or structurally invalid meshes."""


@dataclass
class Mesh:
    """Triangle mesh: vertices (V,3) float64 and faces (F,3) int vertex ids."""

    vertices: np.ndarray
    faces: np.ndarray
    _edge_faces: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-300)

    def edge_faces(self) -> dict[tuple[int, int], list[int]]:
        """Map (lo, hi) vertex-id edge -> face indices sharing it (cached)."""
        if self._edge_faces is None:
            edge_map: dict[tuple[int, int], list[int]] = {}
            for fi, (i, j, k) in enumerate(self.faces):
                for a, b in ((i, j), (j, k), (k, i)):
                    key = (int(a), int(b)) if a < b else (int(b), int(a))
                    edge_map.setdefault(key, []).append(fi)
            self._edge_faces = edge_map
        return self._edge_faces

    def validate(self) -> "Mesh":
        """Check indices, drop zero-area faces (with a warning)."""
        if self.n_vertices == 0 or self.n_faces == 0:
            raise MeshError("empty mesh")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise MeshError("face references a vertex out of range")
        areas = self.face_areas()
        keep = areas > 0.0
        if not keep.all():
            warnings.warn(f"dropping {int((~keep).sum())} degenerate (zero-area) faces")
            if not keep.any():
                raise MeshError("all faces degenerate")
            return Mesh(self.vertices, self.faces[keep])
        return self


@dataclass(frozen=True)
class NormalizationTransform:
    """Affine map p_out = scale * p_in + translation (isotropic, invertible)."""

    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.translation

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) / self.scale

    def compose_after(self, scale: float, translation: np.ndarray) -> "NormalizationTransform":
        """The transform 'first self, then (scale, translation)'."""
        return NormalizationTransform(
            self.scale * scale, self.translation * scale + np.asarray(translation, float)
        )


@dataclass(frozen=True)
class PointSample:
    """One sampled surface point (a view row of a PointCloud)."""

    position: np.ndarray
    normal: np.ndarray
    feature: np.ndarray
    source_face: int


@dataclass
class PointCloud:
    """Sampled points with normals, optional features, and source faces.

    ``transform`` maps original mesh coordinates to this cloud's frame; it
    is the identity for freshly sampled clouds and records normalization
    and augmentation as they are applied.
    """

    positions: np.ndarray
    normals: np.ndarray
    features: np.ndarray
    source_faces: np.ndarray
    transform: NormalizationTransform = field(default_factory=NormalizationTransform)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        self.source_faces = np.asarray(self.source_faces, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> PointSample:
        return PointSample(
            self.positions[i], self.normals[i], self.features[i], int(self.source_faces[i])
        )


# ---------------------------------------------------------------------------
# OBJ I/O


def load_mesh(path) -> Mesh:
    """Load an OBJ triangle mesh; quads are fan-triangulated from their first vertex.

    Materials, texture coordinates, and normals in the file are ignored.
    Degenerate faces are dropped during validation; empty meshes are rejected.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split("#", 1)[0].split()
                if not parts:
                    continue
                tag = parts[0]
                if tag == "v":
                    if len(parts) < 4:
                        raise MeshError(f"{path}:{lineno}: vertex with <3 coordinates")
                    vertices.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    if len(parts) < 4:
                        raise MeshError(f"{path}:{lineno}: face with <3 vertices")
                    idx = []
                    for token in parts[1:]:
                        raw = token.split("/")[0]
                        i = int(raw)
                        # OBJ indices are 1-based; negatives count from the end
                        idx.append(i - 1 if i > 0 else len(vertices) + i)
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse OBJ file {path}: {exc}") from exc
    if not vertices or not faces:
        raise MeshError(f"empty mesh in {path}")
    mesh = Mesh(np.array(vertices), np.array(faces))
    boundary = sum(1 for fs in mesh.edge_faces().values() if len(fs) != 2)
    if boundary:
        warnings.warn(f"{path}: {boundary} non-interior edges (mesh is not closed/manifold)")
    return mesh.validate()


def save_obj(mesh: Mesh, path) -> None:
    """Write vertices and triangles; %.17g keeps float64 round trips exact."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# sharp edges and sampling


def sharp_edges(mesh: Mesh, angle_threshold_deg: float) -> list[tuple[tuple[int, int], float]]:
    """Interior edges whose dihedral angle exceeds the threshold.

    The dihedral angle is the angle between the two adjacent face normals,
    so coplanar faces score 0.  Boundary and non-manifold edges are skipped.
    """
    normals = mesh.face_normals()
    out = []
    for edge, face_ids in mesh.edge_faces().items():
        if len(face_ids) != 2:
            continue
        cosang = float(np.clip(np.dot(normals[face_ids[0]], normals[face_ids[1]]), -1.0, 1.0))
        angle = float(np.degrees(np.arccos(cosang)))
        if angle > angle_threshold_deg:
            out.append((edge, angle))
    return out


def _sample_on_faces(mesh: Mesh, face_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a, b, c = mesh.face_corners()
    a, b, c = a[face_ids], b[face_ids], c[face_ids]
    u = rng.random(len(face_ids))
    v = rng.random(len(face_ids))
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def sample_point_cloud(
    mesh: Mesh,
    n: int,
    sharp_fraction: float = 0.5,
    angle_threshold_deg: float = 30.0,
    seed: int = 0,
    cover_all_faces: bool = False,
) -> PointCloud:
    """Sample `n` points: an area-weighted surface share and a sharp-edge share.

    floor(n * (1 - sharp_fraction)) points are drawn area-uniformly on the
    surface and the remainder length-uniformly on edges whose dihedral angle
    exceeds the threshold (falling back to surface points when the mesh has
    no sharp edges).  With ``cover_all_faces`` the first |F| surface points
    sit at face centroids so every face owns at least one sample.  Sharp-edge
    samples take the normal of one adjacent face, chosen by coin flip.
    Deterministic for a fixed seed.
    """
    if n <= 0:
        raise ValueError("sample_point_cloud: n must be positive")
    if not 0.0 <= sharp_fraction <= 1.0:
        raise ValueError("sample_point_cloud: sharp_fraction must be in [0, 1]")
    if cover_all_faces and n < mesh.n_faces:
        raise ValueError(
            f"sample_point_cloud: n={n} < face count {mesh.n_faces} with cover_all_faces"
        )
    rng = np.random.default_rng(seed)
    normals = mesh.face_normals()
    n_surface = int(np.floor(n * (1.0 - sharp_fraction)))

    edges = sharp_edges(mesh, angle_threshold_deg)
    if not edges:
        n_surface = n
    n_edge = n - n_surface

    pos_chunks, nrm_chunks, face_chunks = [], [], []

    if cover_all_faces:
        # centroid pass first; counts toward the surface share
        a, b, c = mesh.face_corners()
        pos_chunks.append((a + b + c) / 3.0)
        nrm_chunks.append(normals.copy())
        face_chunks.append(np.arange(mesh.n_faces))
        n_surface = max(n_surface - mesh.n_faces, 0)
        n_edge = n - mesh.n_faces - n_surface

    if n_surface > 0:
        areas = mesh.face_areas()
        probs = areas / areas.sum()
        counts = rng.multinomial(n_surface, probs)
        face_ids = np.repeat(np.arange(mesh.n_faces), counts)
        pos_chunks.append(_sample_on_faces(mesh, face_ids, rng))
        nrm_chunks.append(normals[face_ids])
        face_chunks.append(face_ids)

    if n_edge > 0:
        edge_verts = np.array([e for e, _ in edges], dtype=np.int64)
        edge_face_pairs = np.array(
            [mesh.edge_faces()[e][:2] for e, _ in edges], dtype=np.int64
        )
        p0 = mesh.vertices[edge_verts[:, 0]]
        p1 = mesh.vertices[edge_verts[:, 1]]
        lengths = np.linalg.norm(p1 - p0, axis=1)
        probs = lengths / lengths.sum()
        counts = rng.multinomial(n_edge, probs)
        edge_ids = np.repeat(np.arange(len(edges)), counts)
        t = rng.random(n_edge)
        pos_chunks.append(p0[edge_ids] + t[:, None] * (p1[edge_ids] - p0[edge_ids]))
        side = rng.integers(0, 2, n_edge)
        chosen_faces = edge_face_pairs[edge_ids, side]
        nrm_chunks.append(normals[chosen_faces])
        face_chunks.append(chosen_faces)

    positions = np.concatenate(pos_chunks)
    return PointCloud(
        positions=positions,
        normals=np.concatenate(nrm_chunks),
        features=np.zeros((len(positions), 0)),
        source_faces=np.concatenate(face_chunks),
    )


def normalize(points: PointCloud) -> PointCloud:
    """Isotropically scale + translate so the tight bbox is centered at the
    origin with its longest axis spanning exactly 1.

    Degenerate clouds (all points identical) keep unit scale and are only
    centered.  The applied map is composed into the cloud's transform.
    """
    if len(points) == 0:
        raise ValueError("normalize: empty point cloud")
    lo = points.positions.min(axis=0)
    hi = points.positions.max(axis=0)
    extent = float((hi - lo).max())
    scale = 1.0 if extent == 0.0 else 1.0 / extent
    center = (lo + hi) / 2.0
    translation = -center * scale
    return PointCloud(
        positions=points.positions * scale + translation,
        normals=points.normals.copy(),
        features=points.features.copy(),
        source_faces=points.source_faces.copy(),
        transform=points.transform.compose_after(scale, translation),
    )


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Bidirectional Chamfer distance between two point sets.

    0.5 * (mean over a of nearest distance into b + mean over b of nearest
    distance into a), computed with a KD-tree; matches the O(n^2) definition
    to within floating-point rounding.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer: point sets must be nonempty")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


# ---------------------------------------------------------------------------
# point-cloud binary format: magic "PCLD", version u32, n u32, d u32, then
# per point position(3xf32), normal(3xf32), feature(d x f32), face u32;
# little-endian throughout.


def save_point_cloud(points: PointCloud, path) -> None:
    n = len(points)
    d = points.feature_dim
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC)
        fh.write(struct.pack("<III", PC_VERSION, n, d))
        rec = np.zeros((n, 6 + d), dtype="<f4")
        rec[:, 0:3] = points.positions
        rec[:, 3:6] = points.normals
        if d:
            rec[:, 6:] = points.features
        body = np.zeros((n, (6 + d) * 4 + 4), dtype=np.uint8)
        body[:, : (6 + d) * 4] = rec.view(np.uint8).reshape(n, -1)
        body[:, (6 + d) * 4 :] = (
            points.source_faces.astype("<u4").view(np.uint8).reshape(n, 4)
        )
        fh.write(body.tobytes())


def load_point_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PC_MAGIC:
        raise ValueError(f"not a point-cloud file: bad magic {blob[:4]!r}")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != PC_VERSION:
        raise ValueError(f"unsupported point-cloud version {version}")
    stride = (6 + d) * 4 + 4
    expected = 16 + n * stride
    if len(blob) != expected:
        raise ValueError(f"point-cloud file truncated: {len(blob)} bytes, expected {expected}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, stride)
    rec = body[:, : (6 + d) * 4].copy().view("<f4").reshape(n, 6 + d)
    faces = body[:, (6 + d) * 4 :].copy().view("<u4").reshape(n)
    return PointCloud(
        positions=rec[:, 0:3].astype(np.float64),
        normals=rec[:, 3:6].astype(np.float64),
        features=rec[:, 6:].astype(np.float64),
        source_faces=faces.astype(np.int64),
    )
