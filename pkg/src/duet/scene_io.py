"""Dataset, camera, image, and mesh interchange.

Directory layout of a dataset:

    cameras.json      list of {file, fx, fy, cx, cy, width, height,
                      world_to_camera: 12 floats row-major (3x4)}
    rgb/NNNN.png      8-bit color
    depth/NNNN.png    16-bit, millimeters, 0 = invalid
    normal/NNNN.png   RGB-encoded camera-space normals, n = 2*c/255 - 1
    mesh.ply          optional ground-truth mesh
    seed_points.ply   sparse points standing in for SfM output
    splits.json       {"train": [...], "test": [...]} frame indices
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_UNIT_MM = 1000.0  # scene unit = meter, depth PNGs store millimeters


class DatasetError(ValueError):
    """Raised when a dataset directory is malformed."""


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3,3) world-to-camera rotation
    translation: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rrt = self.rotation @ self.rotation.T
        if not np.allclose(rrt, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation has negative determinant")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) -> camera frame."""
        return points @ self.rotation.T + self.translation

    def to_world_dir(self, dirs_cam: np.ndarray) -> np.ndarray:
        """Camera-frame directions (N,3) -> world frame."""
        return dirs_cam @ self.rotation

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions through pixel centers, z=1. Shape (H,W,3)."""
        j = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        i = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        xs, ys = np.meshgrid(j, i)
        return np.stack([xs, ys, np.ones_like(xs)], axis=-1)


def project(camera: Camera, point: np.ndarray):
    """Project world point(s) to (u, v, z). z <= 0 means behind the camera."""
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    pc = camera.to_camera(p.reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    if single:
        return float(u[0]), float(v[0]), float(z[0])
    return u, v, z


@dataclass
class Frame:
    """Per-view bundle of camera and image maps.

    Depth is z-depth along the camera axis, 0 marks invalid pixels.
    Normals are unit vectors in camera space, the zero vector marks invalid.
    """

    camera: Camera
    rgb: np.ndarray  # (H,W,3) in [0,1]
    depth: np.ndarray  # (H,W)
    normal: np.ndarray  # (H,W,3)

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w) or self.normal.shape != (h, w, 3):
            raise ValueError("frame image shapes do not match the camera resolution")


@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex colors."""

    vertices: np.ndarray  # (V,3)
    triangles: np.ndarray  # (T,3) int
    colors: np.ndarray | None = None  # (V,3) in [0,1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def validate(self):
        if np.any(~np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and np.any(self.triangle_areas() <= 0):
            raise ValueError("mesh has degenerate triangles")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


@dataclass
class Dataset:
    frames: list[Frame]
    test_frames: list[Frame] = field(default_factory=list)
    gt_mesh: TriMesh | None = None
    seed_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# image encoding
# ---------------------------------------------------------------------------

def _write_rgb_png(path: Path, rgb: np.ndarray):
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_rgb_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _write_depth_png(path: Path, depth: np.ndarray):
    mm = np.clip(np.round(depth * DEPTH_UNIT_MM), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)


def _read_depth_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / DEPTH_UNIT_MM


def _write_normal_png(path: Path, normal: np.ndarray):
    enc = np.clip(np.round((normal + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(enc, mode="RGB").save(path)


def _read_normal_png(path: Path) -> np.ndarray:
    enc = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    n = enc * (2.0 / 255.0) - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    # invalid pixels encode near (128,128,128); renormalize everything else
    valid = norm[..., 0] >= 0.1
    out = np.zeros_like(n)
    out[valid] = n[valid] / norm[valid]
    return out


# ---------------------------------------------------------------------------
# PLY / OBJ meshes
# ---------------------------------------------------------------------------

def save_mesh(mesh: TriMesh, path, fmt: str | None = None):
    """Write a mesh as binary PLY or as OBJ (with vertex-color extension)."""
    path = Path(path)
    if fmt is None:
        fmt = "OBJ" if path.suffix.lower() == ".obj" else "PLY"
    fmt = fmt.upper()
    if fmt == "PLY":
        _save_ply(path, mesh.vertices, mesh.triangles, mesh.colors)
    elif fmt == "OBJ":
        _save_obj(path, mesh)
    else:
        raise ValueError(f"unknown mesh format: {fmt}")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"mesh file not found: {path}")
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    verts, tris, cols = _load_ply(path)
    return TriMesh(verts, tris, cols)


def _save_ply(path: Path, verts: np.ndarray, tris: np.ndarray, colors: np.ndarray | None):
    with open(path, "wb") as f:
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}"]
        header += ["property float x", "property float y", "property float z"]
        if colors is not None:
            header += ["property uchar red", "property uchar green", "property uchar blue"]
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices", "end_header"]
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is not None:
            vdtype = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec = np.empty(len(verts), dtype=vdtype)
            rec["xyz"] = verts.astype("<f4")
            rec["rgb"] = np.clip(np.round(colors * 255.0), 0, 255).astype("u1")
        else:
            vdtype = np.dtype([("xyz", "<f4", 3)])
            rec = np.empty(len(verts), dtype=vdtype)
            rec["xyz"] = verts.astype("<f4")
        f.write(rec.tobytes())
        fdtype = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
        frec = np.empty(len(tris), dtype=fdtype)
        frec["n"] = 3
        frec["idx"] = tris.astype("<i4")
        f.write(frec.tobytes())


def _load_ply(path: Path):
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise DatasetError(f"not a PLY file: {path}")
        fmt = None
        n_verts = n_faces = 0
        vert_props: list[tuple[str, str]] = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise DatasetError(f"unterminated PLY header: {path}")
            tok = line.strip().decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    n_verts = int(tok[2])
                elif element == "face":
                    n_faces = int(tok[2])
            elif tok[0] == "property" and element == "vertex" and tok[1] != "list":
                vert_props.append((tok[2], tok[1]))
            elif tok[0] == "end_header":
                break
        if fmt == "ascii":
            return _load_ply_ascii(f, n_verts, n_faces, vert_props, path)
        if fmt != "binary_little_endian":
            raise DatasetError(f"unsupported PLY format {fmt}: {path}")
        type_map = {"float": "<f4", "float32": "<f4", "double": "<f8",
                    "uchar": "u1", "uint8": "u1", "int": "<i4", "uint": "<u4"}
        vdtype = np.dtype([(name, type_map[t]) for name, t in vert_props])
        vraw = np.frombuffer(f.read(vdtype.itemsize * n_verts), dtype=vdtype, count=n_verts)
        verts = np.stack([vraw[c].astype(np.float64) for c in ("x", "y", "z")], axis=1) if n_verts else np.zeros((0, 3))
        names = [n for n, _ in vert_props]
        colors = None
        if all(c in names for c in ("red", "green", "blue")) and n_verts:
            colors = np.stack([vraw[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1) / 255.0
        tris = np.zeros((0, 3), dtype=np.int64)
        if n_faces:
            out = np.empty((n_faces, 3), dtype=np.int64)
            for i in range(n_faces):
                (cnt,) = struct.unpack("<B", f.read(1))
                idx = struct.unpack(f"<{cnt}i", f.read(4 * cnt))
                if cnt != 3:
                    raise DatasetError(f"non-triangle face in {path}")
                out[i] = idx
            tris = out
        return verts, tris, colors


def _load_ply_ascii(f, n_verts, n_faces, vert_props, path):
    names = [n for n, _ in vert_props]
    rows = [f.readline().split() for _ in range(n_verts)]
    data = np.asarray(rows, dtype=np.float64) if n_verts else np.zeros((0, len(names)))
    verts = data[:, [names.index(c) for c in ("x", "y", "z")]] if n_verts else np.zeros((0, 3))
    colors = None
    if all(c in names for c in ("red", "green", "blue")) and n_verts:
        colors = data[:, [names.index(c) for c in ("red", "green", "blue")]] / 255.0
    tris = np.zeros((0, 3), dtype=np.int64)
    if n_faces:
        out = []
        for _ in range(n_faces):
            tok = f.readline().split()
            if int(tok[0]) != 3:
                raise DatasetError(f"non-triangle face in {path}")
            out.append([int(t) for t in tok[1:4]])
        tris = np.asarray(out, dtype=np.int64)
    return verts, tris, colors


def _save_obj(path: Path, mesh: TriMesh):
    with open(path, "w", encoding="ascii") as f:
        for i, v in enumerate(mesh.vertices):
            if mesh.colors is not None:
                c = mesh.colors[i]
                f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
            else:
                f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _load_obj(path: Path) -> TriMesh:
    verts, cols, tris = [], [], []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
                if len(tok) >= 7:
                    cols.append([float(x) for x in tok[4:7]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
                tris.append(idx)
    colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
    return TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(tris, dtype=np.int64).reshape(-1, 3), colors)


def save_points_ply(path, points: np.ndarray):
    _save_ply(Path(path), np.asarray(points, dtype=np.float64).reshape(-1, 3), np.zeros((0, 3), dtype=np.int64), None)


def load_points_ply(path) -> np.ndarray:
    verts, _, _ = _load_ply(Path(path))
    return verts


def save_cameras(path, cameras: list[Camera]):
    """Camera list in the cameras.json schema (file names are synthetic)."""
    entries = []
    for i, c in enumerate(cameras):
        w2c = np.concatenate([c.rotation, c.translation[:, None]], axis=1)
        entries.append({"file": f"{i:04d}.png", "fx": c.fx, "fy": c.fy, "cx": c.cx,
                        "cy": c.cy, "width": c.width, "height": c.height,
                        "world_to_camera": [float(x) for x in w2c.reshape(-1)]})
    with open(path, "w") as f:
        json.dump(entries, f, indent=1)


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        entries = json.load(f)
    cams = []
    for e in entries:
        w2c = np.asarray(e["world_to_camera"], dtype=np.float64).reshape(3, 4)
        cams.append(Camera(e["fx"], e["fy"], e["cx"], e["cy"],
                           int(e["width"]), int(e["height"]), w2c[:, :3], w2c[:, 3]))
    return cams


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path):
    path = Path(path)
    (path / "rgb").mkdir(parents=True, exist_ok=True)
    (path / "depth").mkdir(exist_ok=True)
    (path / "normal").mkdir(exist_ok=True)
    all_frames = list(dataset.frames) + list(dataset.test_frames)
    cams = []
    for i, fr in enumerate(all_frames):
        name = f"{i:04d}.png"
        _write_rgb_png(path / "rgb" / name, fr.rgb)
        _write_depth_png(path / "depth" / name, fr.depth)
        _write_normal_png(path / "normal" / name, fr.normal)
        c = fr.camera
        w2c = np.concatenate([c.rotation, c.translation[:, None]], axis=1)
        cams.append({
            "file": name, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "world_to_camera": [float(x) for x in w2c.reshape(-1)],
        })
    with open(path / "cameras.json", "w") as f:
        json.dump(cams, f, indent=1)
    with open(path / "splits.json", "w") as f:
        json.dump({"train": list(range(len(dataset.frames))),
                   "test": list(range(len(dataset.frames), len(all_frames)))}, f)
    save_points_ply(path / "seed_points.ply", dataset.seed_points)
    if dataset.gt_mesh is not None:
        save_mesh(dataset.gt_mesh, path / "mesh.ply", "PLY")


def load_dataset(path) -> Dataset:
    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"missing cameras file: {cam_file}")
    with open(cam_file) as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"unparsable cameras file {cam_file}: {e}") from e

    frames = []
    for entry in entries:
        name = entry["file"]
        rgb_path = path / "rgb" / name
        if not rgb_path.exists():
            raise DatasetError(f"missing rgb image: {rgb_path}")
        w2c = np.asarray(entry["world_to_camera"], dtype=np.float64)
        if w2c.size != 12:
            raise DatasetError(f"unparsable transform for {name} in {cam_file}")
        w2c = w2c.reshape(3, 4)
        try:
            cam = Camera(entry["fx"], entry["fy"], entry["cx"], entry["cy"],
                         int(entry["width"]), int(entry["height"]), w2c[:, :3], w2c[:, 3])
        except ValueError as e:
            raise DatasetError(f"bad camera for {name} in {cam_file}: {e}") from e
        rgb = _read_rgb_png(rgb_path)
        depth_path = path / "depth" / name
        depth = _read_depth_png(depth_path) if depth_path.exists() else np.zeros(rgb.shape[:2])
        normal_path = path / "normal" / name
        normal = _read_normal_png(normal_path) if normal_path.exists() else np.zeros_like(rgb)
        if rgb.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"image size mismatch for {rgb_path}")
        frames.append(Frame(cam, rgb, depth, normal))

    if not frames:
        raise DatasetError(f"dataset has no frames: {path}")

    split_file = path / "splits.json"
    if split_file.exists():
        with open(split_file) as f:
            splits = json.load(f)
        train = [frames[i] for i in splits.get("train", range(len(frames)))]
        test = [frames[i] for i in splits.get("test", [])]
    else:
        train, test = frames, []
    if not train:
        raise DatasetError(f"dataset has no training frames: {path}")

    seed_file = path / "seed_points.ply"
    if not seed_file.exists():
        raise DatasetError(f"missing seed points: {seed_file}")
    seed_points = load_points_ply(seed_file)
    if len(seed_points) == 0:
        raise DatasetError(f"empty seed points: {seed_file}")

    mesh_file = path / "mesh.ply"
    gt_mesh = load_mesh(mesh_file) if mesh_file.exists() else None
    return Dataset(train, test, gt_mesh, seed_points)
