"""Sparse, surface-local SDF field on a block-hashed corner grid.

Values live at voxel corners (integer lattice g, world position
g * voxel_size) grouped into dense 8x8x8 blocks, so trilinear cells and
marching-cubes cells coincide. The effective field is
f_v = sdf_init + sdf_residual: fusion writes sdf_init, optimization only
touches the residual, and a reset re-fuses sdf_init and zeroes residuals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLOCK = 8
BLOCK_CORNERS = BLOCK**3
FUSE_WEIGHT_CAP = 64.0
_KEY_K = 1 << 20
_KEY_OFF = 1 << 19

# the 8 cell-corner offsets in a fixed order (x-major bit pattern)
CELL_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def _encode_keys(ijk: np.ndarray) -> np.ndarray:
    ijk = ijk + _KEY_OFF
    return (ijk[..., 0] * _KEY_K + ijk[..., 1]) * _KEY_K + ijk[..., 2]


@dataclass
class SdfQuery:
    """Batched trilinear SDF lookup with everything the backward pass needs."""

    value: np.ndarray  # (N,)
    gradient: np.ndarray  # (N,3) spatial d f / d x
    valid: np.ndarray  # (N,) bool
    corner_lin: np.ndarray  # (N,8) flat corner ids, -1 where missing
    weights: np.ndarray  # (N,8) trilinear weights
    weight_grads: np.ndarray  # (N,8,3) d weights / d point


class SparseVoxelGrid:
    def __init__(self, voxel_size: float, truncation: float):
        if truncation < 2 * voxel_size:
            raise ValueError("truncation must be at least two voxel sizes")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.block_keys = np.zeros((0, 3), dtype=np.int64)
        self.key_to_row: dict[int, int] = {}
        self.sdf_init = np.zeros((0, BLOCK_CORNERS))
        self.sdf_residual = np.zeros((0, BLOCK_CORNERS))
        self.color = np.zeros((0, BLOCK_CORNERS, 3))
        self.weight = np.zeros((0, BLOCK_CORNERS))

    # -- storage ------------------------------------------------------------

    @property
    def block_count(self) -> int:
        return len(self.block_keys)

    def sdf_values(self) -> np.ndarray:
        """Effective field f_v = sdf_init + sdf_residual, flat (B*512,)."""
        return (self.sdf_init + self.sdf_residual).reshape(-1)

    def add_blocks(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        enc = _encode_keys(keys)
        fresh = np.array([e not in self.key_to_row for e in enc.tolist()], dtype=bool)
        keys = keys[fresh]
        if len(keys) == 0:
            return
        start = self.block_count
        for i, e in enumerate(_encode_keys(keys).tolist()):
            self.key_to_row[e] = start + i
        self.block_keys = np.concatenate([self.block_keys, keys])
        n = len(keys)
        self.sdf_init = np.concatenate([self.sdf_init, np.full((n, BLOCK_CORNERS), self.truncation)])
        self.sdf_residual = np.concatenate([self.sdf_residual, np.zeros((n, BLOCK_CORNERS))])
        self.color = np.concatenate([self.color, np.zeros((n, BLOCK_CORNERS, 3))])
        self.weight = np.concatenate([self.weight, np.zeros((n, BLOCK_CORNERS))])

    def lookup_rows(self, enc_keys: np.ndarray) -> np.ndarray:
        """Encoded block keys -> block rows, -1 where unallocated."""
        if enc_keys.size == 0:
            return np.zeros(0, dtype=np.int64)
        uniq, inv = np.unique(enc_keys, return_inverse=True)
        rows = np.fromiter((self.key_to_row.get(int(k), -1) for k in uniq), dtype=np.int64, count=len(uniq))
        return rows[inv].reshape(enc_keys.shape)

    def corner_lookup(self, corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer corner coords (...,3) -> (flat ids, found mask)."""
        corners = np.asarray(corners, dtype=np.int64)
        block = corners >> 3
        off = corners & 7
        rows = self.lookup_rows(_encode_keys(block))
        found = rows >= 0
        lin = rows * BLOCK_CORNERS + (off[..., 0] * BLOCK + off[..., 1]) * BLOCK + off[..., 2]
        lin[~found] = -1
        return lin, found

    def corner_positions(self) -> np.ndarray:
        """World positions of every allocated corner, flat (B*512, 3)."""
        o = np.stack(np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), np.arange(BLOCK),
                                 indexing="ij"), axis=-1).reshape(-1, 3)
        g = self.block_keys[:, None, :] * BLOCK + o[None, :, :]
        return g.reshape(-1, 3) * self.voxel_size

    # -- queries ------------------------------------------------------------

    def query(self, points: np.ndarray) -> SdfQuery:
        """Trilinear f_v and its analytic spatial gradient at world points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(pts)
        q = pts / self.voxel_size
        base = np.floor(q).astype(np.int64)
        frac = q - base
        corners = base[:, None, :] + CELL_OFFSETS[None]
        lin, found = self.corner_lookup(corners)
        flat_w = self.weight.reshape(-1)
        fused = np.zeros((n, 8), dtype=bool)
        fused[found] = flat_w[lin[found]] > 0
        valid = found.all(axis=1) & fused.all(axis=1)

        wx = np.stack([1.0 - frac[:, 0], frac[:, 0]], axis=1)
        wy = np.stack([1.0 - frac[:, 1], frac[:, 1]], axis=1)
        wz = np.stack([1.0 - frac[:, 2], frac[:, 2]], axis=1)
        dsign = np.where(CELL_OFFSETS == 0, -1.0, 1.0)  # d weight / d frac
        ox, oy, oz = CELL_OFFSETS[:, 0], CELL_OFFSETS[:, 1], CELL_OFFSETS[:, 2]
        weights = wx[:, ox] * wy[:, oy] * wz[:, oz]
        wg = np.zeros((n, 8, 3))
        wg[:, :, 0] = dsign[None, :, 0] * wy[:, oy] * wz[:, oz] / self.voxel_size
        wg[:, :, 1] = wx[:, ox] * dsign[None, :, 1] * wz[:, oz] / self.voxel_size
        wg[:, :, 2] = wx[:, ox] * wy[:, oy] * dsign[None, :, 2] / self.voxel_size

        f = np.zeros((n, 8))
        flat_f = self.sdf_values()
        f[found] = flat_f[lin[found]]
        value = np.where(valid, np.sum(weights * f, axis=1), 0.0)
        gradient = np.where(valid[:, None], np.sum(wg * f[:, :, None], axis=1), 0.0)
        return SdfQuery(value, gradient, valid, lin, weights, wg)

    def query_color(self, points: np.ndarray):
        """Trilinear color c_v. Returns (color (N,3), valid, corner_lin, weights)."""
        q = self.query(points)
        col = np.zeros((len(q.value), 8, 3))
        flat_c = self.color.reshape(-1, 3)
        found = q.corner_lin >= 0
        col[found] = flat_c[q.corner_lin[found]]
        out = np.where(q.valid[:, None], np.sum(q.weights[:, :, None] * col, axis=1), 0.0)
        return out, q.valid, q.corner_lin, q.weights

    def scatter_residual_grads(self, corner_lin: np.ndarray, corner_grads: np.ndarray,
                               out: np.ndarray):
        """Accumulate per-corner gradients into a (B,512) array, fixed order."""
        lin = corner_lin.reshape(-1)
        ok = lin >= 0
        np.add.at(out.reshape(-1), lin[ok], corner_grads.reshape(-1)[ok])


def query_sdf(grid: SparseVoxelGrid, point: np.ndarray) -> SdfQuery:
    return grid.query(point)


def backward_sdf(query: SdfQuery, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain an upstream scalar gradient through the trilinear interpolation.

    Returns (corner_lin (N,8), corner gradients (N,8), point gradients (N,3)).
    Raises on invalid queries; filter first.
    """
    up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if not np.all(query.valid):
        raise ValueError("backward_sdf requires valid queries")
    corner_grads = up[:, None] * query.weights
    point_grads = up[:, None] * query.gradient
    return query.corner_lin, corner_grads, point_grads


def allocate_from_points(points: np.ndarray, voxel_size: float, truncation: float) -> SparseVoxelGrid:
    """Allocate every block whose corner span touches a point +- truncation."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        raise ValueError("cannot allocate from an empty point set")
    grid = SparseVoxelGrid(voxel_size, truncation)
    # block b spans corner positions [8b, 8b+7]*vs; overlap test per axis
    blo = np.ceil(((pts - truncation) / voxel_size - (BLOCK - 1)) / BLOCK).astype(np.int64)
    bhi = np.floor((pts + truncation) / voxel_size / BLOCK).astype(np.int64)
    nb = bhi - blo + 1
    keys = []
    for i in range(int(nb[:, 0].max())):
        for j in range(int(nb[:, 1].max())):
            for k in range(int(nb[:, 2].max())):
                mask = (i < nb[:, 0]) & (j < nb[:, 1]) & (k < nb[:, 2])
                if mask.any():
                    keys.append(blo[mask] + np.array([i, j, k], dtype=np.int64))
    allk = np.concatenate(keys)
    enc = _encode_keys(allk)
    _, first = np.unique(enc, return_index=True)
    grid.add_blocks(allk[np.sort(first)])
    return grid


def tsdf_fuse(grid: SparseVoxelGrid, frames):
    """Fuse depth maps into sdf_init/color by weighted running means.

    Corners are updated only inside the truncation band around the observed
    depth; the per-corner observation weight is capped so early frames stay
    movable.
    """
    if grid.block_count == 0:
        return
    pos = grid.corner_positions()
    flat_init = grid.sdf_init.reshape(-1)
    flat_col = grid.color.reshape(-1, 3)
    flat_w = grid.weight.reshape(-1)
    for fr in frames:
        cam = fr.camera
        pc = pos @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        ok = z > 1e-6
        u = np.zeros(len(z))
        v = np.zeros(len(z))
        u[ok] = cam.fx * pc[ok, 0] / z[ok] + cam.cx
        v[ok] = cam.fy * pc[ok, 1] / z[ok] + cam.cy
        ui = np.floor(u).astype(np.int64)
        vi = np.floor(v).astype(np.int64)
        ok &= (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        ui, vi = np.clip(ui, 0, cam.width - 1), np.clip(vi, 0, cam.height - 1)
        d = fr.depth[vi, ui]
        ok &= d > 0
        sdf_p = d - z
        ok &= np.abs(sdf_p) <= grid.truncation
        sel = np.flatnonzero(ok)
        if len(sel) == 0:
            continue
        obs = np.clip(sdf_p[sel], -grid.truncation, grid.truncation)
        rgb = fr.rgb[vi[sel], ui[sel]]
        w_old = flat_w[sel]
        flat_init[sel] = (flat_init[sel] * w_old + obs) / (w_old + 1.0)
        flat_col[sel] = (flat_col[sel] * w_old[:, None] + rgb) / (w_old + 1.0)[:, None]
        flat_w[sel] = np.minimum(w_old + 1.0, FUSE_WEIGHT_CAP)
    grid.sdf_init = flat_init.reshape(grid.sdf_init.shape)
    grid.color = flat_col.reshape(grid.color.shape)
    grid.weight = flat_w.reshape(grid.weight.shape)


def unproject_depth(frame) -> np.ndarray:
    """Valid depth pixels -> world points (N,3)."""
    cam = frame.camera
    rays = cam.pixel_rays().reshape(-1, 3)
    d = frame.depth.reshape(-1)
    sel = d > 0
    pts_cam = d[sel, None] * rays[sel]
    return (pts_cam - cam.translation) @ cam.rotation


def fuse_from_renders(surfels, cameras, voxel_size: float, truncation: float,
                      background=(0.0, 0.0, 0.0)) -> tuple[SparseVoxelGrid, list]:
    """Render depth from the surfels for every camera, then allocate + fuse."""
    from .scene_io import Frame
    from .surfel_raster import rasterize

    frames = []
    points = []
    for cam in cameras:
        out = rasterize(surfels, cam, background)
        fr = Frame(cam, out.rgb, out.depth, out.normal)
        frames.append(fr)
        if (fr.depth > 0).any():
            points.append(unproject_depth(fr))
    if not points:
        raise ValueError("surfels render no valid depth; cannot build the voxel scaffold")
    grid = allocate_from_points(np.concatenate(points), voxel_size, truncation)
    tsdf_fuse(grid, frames)
    return grid, frames


def reset_from_render(grid_config: tuple[float, float], surfels, cameras,
                      background=(0.0, 0.0, 0.0)) -> SparseVoxelGrid:
    """Rebuild the grid from current renders; residuals restart at zero."""
    voxel_size, truncation = grid_config
    grid, _ = fuse_from_renders(surfels, cameras, voxel_size, truncation, background)
    return grid


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_grid(grid: SparseVoxelGrid, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "grid.json", "w") as f:
        json.dump({"voxel_size": grid.voxel_size, "truncation": grid.truncation,
                   "block_count": grid.block_count}, f)
    with open(path / "grid_blocks.bin", "wb") as f:
        f.write(grid.block_keys.astype("<i8").tobytes())
        f.write(grid.sdf_init.astype("<f8").tobytes())
        f.write(grid.sdf_residual.astype("<f8").tobytes())
        f.write(grid.color.astype("<f8").tobytes())
        f.write(grid.weight.astype("<f8").tobytes())


def load_grid(path) -> SparseVoxelGrid:
    path = Path(path)
    with open(path / "grid.json") as f:
        head = json.load(f)
    grid = SparseVoxelGrid(head["voxel_size"], head["truncation"])
    b = head["block_count"]
    with open(path / "grid_blocks.bin", "rb") as f:
        raw = f.read()
    off = 0

    def take(dtype, shape):
        nonlocal off
        cnt = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype, count=cnt, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(np.float64) if dtype != "<i8" else arr.astype(np.int64)

    grid.block_keys = take("<i8", (b, 3))
    grid.sdf_init = take("<f8", (b, BLOCK_CORNERS))
    grid.sdf_residual = take("<f8", (b, BLOCK_CORNERS))
    grid.color = take("<f8", (b, BLOCK_CORNERS, 3))
    grid.weight = take("<f8", (b, BLOCK_CORNERS))
    grid.key_to_row = {int(e): i for i, e in enumerate(_encode_keys(grid.block_keys))}
    return grid
