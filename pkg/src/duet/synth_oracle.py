"""Analytic ground-truth scenes standing in for real captures.

Scenes are unions of signed primitives with exact SDFs; renders are
sphere-traced against the analytic field, so depth/normal maps carry no
approximation beyond the tracer epsilon. These renders substitute for
camera captures, the jittered ray hits for SfM points, and the corrupted
copies for monocular depth/normal priors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene_io import Camera, Dataset, Frame, TriMesh

TRACE_STEPS = 128
TRACE_EPS = 1e-4
LIGHT_DIR = np.array([0.35, -0.45, 0.82])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)


@dataclass
class Shape:
    """A signed primitive. kind: 'sphere' | 'box' | 'plane'.

    flip marks room shells: flipped shapes are unioned among themselves,
    then negated, so their interior becomes free space.
    """

    kind: str
    albedo: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    half_extents: np.ndarray = field(default_factory=lambda: np.ones(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0
    flip: bool = False

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points) - self.center if self.kind != "plane" else np.atleast_2d(points)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.radius
        if self.kind == "box":
            q = np.abs(p) - self.half_extents
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        if self.kind == "plane":
            return p @ self.normal - self.offset
        raise ValueError(f"unknown shape kind: {self.kind}")


@dataclass
class AnalyticScene:
    shapes: list[Shape]

    def sdf_per_shape(self, points: np.ndarray) -> np.ndarray:
        return np.stack([s.sdf(points) for s in self.shapes], axis=-1)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        solid = [s.sdf(p) for s in self.shapes if not s.flip]
        shell = [s.sdf(p) for s in self.shapes if s.flip]
        parts = list(solid)
        if shell:
            parts.append(-np.min(np.stack(shell, axis=-1), axis=-1))
        return np.min(np.stack(parts, axis=-1), axis=-1)

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        """Albedo of the closest shape (shell distances folded like sdf)."""
        p = np.atleast_2d(points)
        dists = []
        for s in self.shapes:
            d = s.sdf(p)
            dists.append(-d if s.flip else d)
        idx = np.argmin(np.abs(np.stack(dists, axis=-1)), axis=-1)
        albedos = np.stack([s.albedo for s in self.shapes])
        return albedos[idx]


def analytic_sdf(scene: AnalyticScene, point: np.ndarray):
    """Signed distance: negative inside solid matter, positive in free space."""
    out = scene.sdf(point)
    return float(out[0]) if np.asarray(point).ndim == 1 else out


def sdf_gradient(scene: AnalyticScene, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scene SDF."""
    p = np.atleast_2d(points)
    g = np.zeros_like(p)
    for a in range(3):
        dp = np.zeros(3)
        dp[a] = h
        g[:, a] = (scene.sdf(p + dp) - scene.sdf(p - dp)) / (2 * h)
    return g


def sphere_trace(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray,
                 max_dist: float = 50.0):
    """March unit rays to the first zero crossing.

    Returns (t, hit): ray parameters and hit mask. Misses get t = 0.
    """
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    n = len(d)
    if len(o) == 1:
        o = np.broadcast_to(o, d.shape)
    t = np.zeros(n)
    live = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(TRACE_STEPS):
        if not live.any():
            break
        p = o[live] + t[live, None] * d[live]
        s = scene.sdf(p)
        newly_hit = s < TRACE_EPS
        idx = np.flatnonzero(live)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(s, 0.0)
        done = newly_hit | (t[idx] > max_dist)
        live[idx[done]] = False
    t[~hit] = 0.0
    return t, hit


def render_ground_truth(scene: AnalyticScene, camera: Camera, background=(0.0, 0.0, 0.0)) -> Frame:
    """Sphere-trace an analytic frame: z-depth, camera-space normals, Lambert rgb."""
    rays_cam = camera.pixel_rays().reshape(-1, 3)
    norms = np.linalg.norm(rays_cam, axis=-1, keepdims=True)
    unit_cam = rays_cam / norms
    unit_world = camera.to_world_dir(unit_cam)
    origin = camera.origin

    t, hit = sphere_trace(scene, origin[None, :], unit_world)
    h_idx = np.flatnonzero(hit)
    depth = np.zeros(len(rays_cam))
    normal_cam = np.zeros((len(rays_cam), 3))
    rgb = np.tile(np.asarray(background, dtype=np.float64), (len(rays_cam), 1))
    if len(h_idx):
        pts = origin + t[h_idx, None] * unit_world[h_idx]
        depth[h_idx] = t[h_idx] * unit_cam[h_idx, 2]  # z-depth, not ray length
        g = sdf_gradient(scene, pts)
        g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        normal_cam[h_idx] = g @ camera.rotation.T
        lambert = np.clip(g @ LIGHT_DIR, 0.0, 1.0)
        rgb[h_idx] = scene.albedo_at(pts) * (0.25 + 0.75 * lambert[:, None])
    h, w = camera.height, camera.width
    return Frame(camera, rgb.reshape(h, w, 3), depth.reshape(h, w), normal_cam.reshape(h, w, 3))


def corrupt_priors(frame: Frame, depth_scale: float, depth_shift: float,
                   normal_noise_deg: float, rng_seed: int, depth_noise: float = 0.01) -> Frame:
    """Synthesize imperfect monocular priors from a ground-truth render.

    Depth gets an affine map plus multiplicative noise (fraction depth_noise);
    normals are rotated about random axes by angles up to normal_noise_deg.
    Invalid pixels stay invalid. Deterministic given rng_seed.
    """
    rng = np.random.default_rng(rng_seed)
    depth = frame.depth.copy()
    valid = depth > 0
    depth[valid] = depth_scale * depth[valid] + depth_shift
    if depth_noise > 0:
        noise = 1.0 + depth_noise * rng.standard_normal(depth.shape)
        depth[valid] = depth[valid] * noise[valid]
    depth[valid] = np.maximum(depth[valid], 1e-6)

    normal = frame.normal.copy()
    nvalid = np.linalg.norm(normal, axis=-1) > 0.5
    if normal_noise_deg > 0 and nvalid.any():
        idx = np.flatnonzero(nvalid.reshape(-1))
        n = normal.reshape(-1, 3)[idx]
        axes = rng.standard_normal((len(idx), 3))
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        ang = rng.uniform(0.0, np.deg2rad(normal_noise_deg), len(idx))
        ca, sa = np.cos(ang)[:, None], np.sin(ang)[:, None]
        dot = np.sum(axes * n, axis=-1, keepdims=True)
        rot = n * ca + np.cross(axes, n) * sa + axes * dot * (1 - ca)
        rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
        flat = normal.reshape(-1, 3)
        flat[idx] = rot
        normal = flat.reshape(frame.normal.shape)
    return Frame(frame.camera, frame.rgb.copy(), depth, normal)


# ---------------------------------------------------------------------------
# scene builders
# ---------------------------------------------------------------------------

def _look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation/translation, camera z toward the target."""
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera x,y,z axes in world
    return rot, -rot @ eye


def _camera_at(eye, target, resolution: int, fov_deg: float = 60.0) -> Camera:
    f = 0.5 * resolution / np.tan(np.deg2rad(fov_deg) / 2)
    rot, t = _look_at(np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64))
    return Camera(f, f, resolution / 2, resolution / 2, resolution, resolution, rot, t)


def _scene_sphere() -> AnalyticScene:
    return AnalyticScene([Shape("sphere", np.array([0.75, 0.35, 0.3]), radius=1.0)])


def _scene_room() -> AnalyticScene:
    return AnalyticScene([
        Shape("box", np.array([0.7, 0.7, 0.65]), half_extents=np.array([1.5, 1.2, 1.0]), flip=True),
        Shape("box", np.array([0.3, 0.5, 0.75]), center=np.array([0.6, -0.4, -0.6]),
              half_extents=np.array([0.45, 0.35, 0.4])),
        Shape("sphere", np.array([0.8, 0.4, 0.25]), center=np.array([-0.7, 0.5, -0.62]), radius=0.38),
    ])


def _scene_two_room() -> AnalyticScene:
    # two shells overlapping around x = 0 leave a connected free space
    return AnalyticScene([
        Shape("box", np.array([0.7, 0.65, 0.6]), center=np.array([-1.1, 0.0, 0.0]),
              half_extents=np.array([1.3, 1.0, 0.9]), flip=True),
        Shape("box", np.array([0.6, 0.7, 0.65]), center=np.array([1.1, 0.0, 0.0]),
              half_extents=np.array([1.3, 1.0, 0.9]), flip=True),
        Shape("box", np.array([0.35, 0.45, 0.7]), center=np.array([-1.2, 0.3, -0.55]),
              half_extents=np.array([0.35, 0.3, 0.35])),
        Shape("sphere", np.array([0.8, 0.35, 0.3]), center=np.array([1.3, -0.3, -0.55]), radius=0.33),
    ])


def _orbit_cameras_sphere(n_views: int, resolution: int) -> list[Camera]:
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        az = golden * i
        el = np.arcsin(-0.72 + 1.44 * (i + 0.5) / n_views)
        eye = 3.0 * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(_camera_at(eye, np.zeros(3), resolution))
    return cams


def _orbit_cameras_room(scene: AnalyticScene, n_views: int, resolution: int,
                        center=(0.0, 0.0, 0.0), radius: float = 0.8) -> list[Camera]:
    center = np.asarray(center, dtype=np.float64)
    cams = []
    tilts = np.array([-0.5, 0.0, 0.5])
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        eye = center + radius * np.array([np.cos(az), np.sin(az), 0.15 * np.sin(3 * az)])
        # look across the room, tilted to sweep floor and ceiling
        tgt_dir = -np.array([np.cos(az), np.sin(az), -tilts[i % 3]])
        cams.append(_camera_at(eye, eye + tgt_dir, resolution))
    return cams


def make_scene(spec: str, resolution: int, n_views: int, seed: int = 0,
               voxel_size: float = 0.04) -> tuple[Dataset, AnalyticScene]:
    """Build an oracle dataset: GT renders, noisy seed points, GT mesh.

    Seed points are 2,000 ray hits jittered by Gaussian noise with sigma of
    two voxel sizes, standing in for a sparse noisy SfM point cloud.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if spec == "sphere":
        scene = _scene_sphere()
        cams = _orbit_cameras_sphere(n_views, resolution)
        bounds = (np.array([-1.4, -1.4, -1.4]), np.array([1.4, 1.4, 1.4]))
    elif spec == "room":
        scene = _scene_room()
        cams = _orbit_cameras_room(scene, n_views, resolution)
        bounds = (np.array([-1.7, -1.4, -1.2]), np.array([1.7, 1.4, 1.2]))
    elif spec == "two_room":
        scene = _scene_two_room()
        half = n_views // 2
        cams = _orbit_cameras_room(scene, half, resolution, center=(-1.1, 0.0, 0.0), radius=0.65)
        cams += _orbit_cameras_room(scene, n_views - half, resolution, center=(1.1, 0.0, 0.0), radius=0.65)
        bounds = (np.array([-2.6, -1.2, -1.1]), np.array([2.6, 1.2, 1.1]))
    else:
        raise ValueError(f"unknown scene spec: {spec}")

    frames = [render_ground_truth(scene, c) for c in cams]
    rng = np.random.default_rng(seed)
    seed_points = _jittered_ray_hits(frames, rng, n_points=2000, sigma=2.0 * voxel_size)
    gt_mesh = analytic_mesh(scene, bounds, resolution=0.02)
    return Dataset(frames, [], gt_mesh, seed_points), scene


def _jittered_ray_hits(frames: list[Frame], rng: np.random.Generator,
                       n_points: int, sigma: float) -> np.ndarray:
    pts = []
    per_frame = int(np.ceil(n_points / len(frames)))
    for fr in frames:
        cam = fr.camera
        valid = np.flatnonzero(fr.depth.reshape(-1) > 0)
        if len(valid) == 0:
            continue
        take = rng.choice(valid, size=min(per_frame, len(valid)), replace=False)
        rays = cam.pixel_rays().reshape(-1, 3)[take]
        d = fr.depth.reshape(-1)[take]
        pts.append(cam.origin + (d[:, None] * rays) @ cam.rotation)
    pts = np.concatenate(pts)[:n_points]
    return pts + sigma * rng.standard_normal(pts.shape)


def analytic_mesh(scene: AnalyticScene, bounds, resolution: float = 0.02) -> TriMesh:
    """Ground-truth mesh via marching cubes on a dense sampling of the SDF."""
    from skimage import measure

    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    dims = np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 2)
    xs = [lo[a] + resolution * np.arange(dims[a]) for a in range(3)]
    grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1)
    vals = scene.sdf(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    verts, faces, _, _ = measure.marching_cubes(vals, level=0.0, spacing=(resolution,) * 3)
    verts = verts + lo
    mesh = TriMesh(verts, faces.astype(np.int64))
    areas = mesh.triangle_areas()
    mesh.triangles = mesh.triangles[areas > 1e-14]
    return mesh
