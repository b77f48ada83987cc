"""Geometry extraction and quantitative evaluation: marching cubes over the
density field, area-weighted mesh sampling, scale estimation, ICP with a
Kabsch/SVD rigid fit, and point-cloud F-score."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .field import FieldModel


@dataclass
class Mesh:
    vertices: np.ndarray   # (M, 3) float
    faces: np.ndarray      # (F, 3) int indices

    @property
    def is_empty(self) -> bool:
        return self.vertices.size == 0 or self.faces.size == 0


@dataclass
class PointCloud:
    points: np.ndarray     # (P, 3)


@dataclass
class RigidTransform:
    rotation: np.ndarray       # (3, 3) orthonormal, det +1
    translation: np.ndarray    # (3,)
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must be proper (det +1)")
        self.rotation = R
        self.translation = np.asarray(self.translation, dtype=float)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (N, 3) point array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite points")
    return np.asarray(pts, dtype=float)


# ---------------------------------------------------------------------------
# isosurface extraction

def _density_on_lattice(field, grid_res: int, bbox_half: float) -> np.ndarray:
    coords = np.linspace(-bbox_half, bbox_half, grid_res)
    X, Y, Z = np.meshgrid(coords, coords, coords, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    if hasattr(field, "density"):
        fn = field.density
    elif callable(field):
        fn = field
    else:
        raise TypeError("field must expose .density(points) or be callable")
    out = np.empty(len(pts))
    chunk = 131072
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = fn(pts[s:s + chunk])
    return out.reshape(grid_res, grid_res, grid_res)


def _weld(verts: np.ndarray, faces: np.ndarray):
    uniq, inverse = np.unique(verts.round(decimals=9), axis=0, return_inverse=True)
    faces = inverse[faces]
    keep = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2]))
    faces = faces[keep]
    # drop exact zero-area faces
    a = uniq[faces[:, 1]] - uniq[faces[:, 0]]
    b = uniq[faces[:, 2]] - uniq[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    return uniq, faces[area2 > 0]


def marching_cubes(field, grid_res: int, iso: float,
                   bbox_half: float | None = None) -> Mesh:
    """Classic 256-case marching cubes on a grid_res^3 lattice inside the box.

    An isosurface that does not exist (iso above the maximum) yields an empty
    mesh rather than an error. Vertices are welded and degenerate faces
    dropped.
    """
    if grid_res < 8:
        raise ValueError("grid_res must be >= 8")
    if iso <= 0:
        raise ValueError("iso must be positive")
    if bbox_half is None:
        if isinstance(field, FieldModel):
            bbox_half = field.config.bbox_half_extent
        else:
            raise ValueError("bbox_half required for non-model fields")
    vol = _density_on_lattice(field, grid_res, bbox_half)
    if vol.max() <= iso or vol.min() >= iso:
        return Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=int))
    spacing = 2.0 * bbox_half / (grid_res - 1)
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=iso, spacing=(spacing, spacing, spacing),
        method="lorensen", allow_degenerate=False)
    verts = verts - bbox_half
    verts, faces = _weld(verts, faces)
    return Mesh(vertices=verts, faces=faces.astype(int))


def mesh_face_areas(mesh: Mesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 1]] - mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 2]] - mesh.vertices[mesh.faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def sample_mesh_points(mesh: Mesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform area-weighted surface samples via barycentric draws."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh_face_areas(mesh)
    probs = areas / areas.sum()
    face_idx = rng.choice(len(mesh.faces), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
        + v[:, None] * (tri[:, 2] - tri[:, 0])
    return PointCloud(points=pts)


# ---------------------------------------------------------------------------
# alignment

def estimate_scale(src, dst) -> float:
    """Ratio of RMS distances from the respective centroids."""
    s = _as_points(src)
    d = _as_points(dst)
    if len(s) < 3 or len(d) < 3:
        raise ValueError("need at least 3 points per cloud")
    rs = np.sqrt(np.mean(np.sum((s - s.mean(axis=0)) ** 2, axis=1)))
    rd = np.sqrt(np.mean(np.sum((d - d.mean(axis=0)) ** 2, axis=1)))
    if rs < 1e-12 or rd < 1e-12:
        raise ValueError("degenerate cloud with zero spread")
    return float(rd / rs)


def _kabsch(src: np.ndarray, dst: np.ndarray):
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (dst - cd).T @ (src - cs)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = cd - R @ cs
    return R, t


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-6):
    """Iterated closest point: alternate nearest-neighbor correspondence and
    a Kabsch/SVD rigid fit. Scale must be pre-applied.

    Returns (RigidTransform, rms_history).
    """
    s = _as_points(src)
    d = _as_points(dst)
    if len(s) == 0 or len(d) == 0:
        raise ValueError("empty cloud")
    tree = cKDTree(d)
    R = np.eye(3)
    t = np.zeros(3)
    history = []
    for _ in range(max_iters):
        cur = s @ R.T + t
        dist, idx = tree.query(cur)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if history and history[-1] - rms < tol:
            history.append(rms)
            break
        history.append(rms)
        R, t = _kabsch(s, d[idx])
    return RigidTransform(rotation=R, translation=t, scale=1.0), history


def f_score(pred, gt, tau: float = 0.05) -> dict:
    """Point-cloud precision/recall/F at distance threshold tau."""
    p = _as_points(pred)
    g = _as_points(gt)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("empty cloud")
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    precision = float(np.mean(d_pg <= tau))
    recall = float(np.mean(d_gp <= tau))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "fscore": f}


def align_and_score(pred, gt, tau: float = 0.05, max_iters: int = 50,
                    tol: float = 1e-6):
    """Scale estimate, then ICP, then F-score in the ground-truth frame.

    Returns (metrics dict, RigidTransform with the scale folded in).
    """
    p = _as_points(pred)
    g = _as_points(gt)
    scale = estimate_scale(p, g)
    rigid, _ = icp_align(p * scale, g, max_iters=max_iters, tol=tol)
    aligned = rigid.apply(p * scale)
    metrics = f_score(aligned, g, tau=tau)
    metrics.update({"tau": tau, "n_pred": int(len(p)), "n_gt": int(len(g))})
    transform = RigidTransform(rotation=rigid.rotation, translation=rigid.translation,
                               scale=scale)
    return metrics, transform


def write_metrics(metrics: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# mesh / point-cloud files

def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_ply_mesh(mesh: Mesh, path) -> None:
    _write_ply(path, mesh.vertices, mesh.faces)


def save_ply_points(cloud, path) -> None:
    _write_ply(path, _as_points(cloud), None)


def _write_ply(path, verts: np.ndarray, faces) -> None:
    n_face = 0 if faces is None else len(faces)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(verts)}",
              "property float x", "property float y", "property float z"]
    if faces is not None:
        header += [f"element face {n_face}",
                   "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(verts, dtype="<f4").tobytes())
        if faces is not None:
            rec = np.empty(n_face, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            fh.write(rec.tobytes())


def load_ply_points(path) -> PointCloud:
    """Vertex positions from an ASCII or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        n_vertex = 0
        props = []       # (name, dtype) for the vertex element
        element = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            parts = line.decode("ascii").strip().split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                element = parts[1]
                if element == "vertex":
                    n_vertex = int(parts[2])
            elif parts[0] == "property" and element == "vertex":
                if parts[1] == "list":
                    raise ValueError("list property on vertices unsupported")
                props.append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        type_map = {"float": "<f4", "float32": "<f4", "double": "<f8",
                    "float64": "<f8", "uchar": "u1", "uint8": "u1",
                    "int": "<i4", "int32": "<i4"}
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, type_map[t]) for name, t in props])
            data = np.frombuffer(fh.read(dtype.itemsize * n_vertex), dtype=dtype)
        elif fmt == "ascii":
            rows = [fh.readline().split() for _ in range(n_vertex)]
            arr = np.array(rows, dtype=float)
            data = {name: arr[:, i] for i, (name, _) in enumerate(props)}
        else:
            raise ValueError(f"unsupported PLY format {fmt!r}")
        pts = np.stack([np.asarray(data["x"], dtype=float),
                        np.asarray(data["y"], dtype=float),
                        np.asarray(data["z"], dtype=float)], axis=1)
    return PointCloud(points=pts)
