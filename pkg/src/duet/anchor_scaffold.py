"""Anchor-managed surfel population.

Anchors live on a fixed grid (one per occupied cell, seeded from the SfM
stand-in points) and each owns k learnable surfel parameter sets: offsets
inside the anchor cube plus per-slot orientation, log-scales,
logit-opacity, and logit-color. Running gradient/opacity statistics drive
growth and pruning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rotation import frame_from_axis_angle
from .surfel_raster import SurfelBatch

DEFAULT_K = 10
INIT_OPACITY = 0.1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


@dataclass
class Anchor:
    """Single-anchor view (copies of one scaffold row)."""

    position: np.ndarray
    cell: tuple[int, int, int]
    extent: float
    offsets: np.ndarray  # (k,3)
    axis_angle: np.ndarray  # (k,3)
    log_scales: np.ndarray  # (k,2)
    logit_opacity: np.ndarray  # (k,)
    color_logit: np.ndarray  # (k,3)
    grad_accum: float
    opacity_accum: float
    obs_count: int


class AnchorScaffold:
    """Struct-of-arrays anchor set; rows align across all arrays."""

    PARAM_NAMES = ("offsets", "axis_angle", "log_scales", "logit_opacity", "color_logit")

    def __init__(self, cell_size: float, k: int = DEFAULT_K, seed: int = 0):
        self.cell_size = float(cell_size)
        self.extent = float(cell_size)
        self.k = int(k)
        self.rng = np.random.default_rng(seed)
        self.cells = np.zeros((0, 3), dtype=np.int64)
        self.positions = np.zeros((0, 3))
        self.offsets = np.zeros((0, k, 3))
        self.axis_angle = np.zeros((0, k, 3))
        self.log_scales = np.zeros((0, k, 2))
        self.logit_opacity = np.zeros((0, k))
        self.color_logit = np.zeros((0, k, 3))
        self.grad_accum = np.zeros(0)
        self.opacity_accum = np.zeros(0)
        self.obs_count = np.zeros(0, dtype=np.int64)
        self.slot_grad_accum = np.zeros((0, k))
        self.slot_obs = np.zeros((0, k), dtype=np.int64)
        self.cell_index: dict[tuple[int, int, int], int] = {}

    def __len__(self):
        return len(self.positions)

    @property
    def n_surfels(self) -> int:
        return len(self) * self.k

    def get_anchor(self, i: int) -> Anchor:
        return Anchor(self.positions[i].copy(), tuple(self.cells[i]), self.extent,
                      self.offsets[i].copy(), self.axis_angle[i].copy(),
                      self.log_scales[i].copy(), self.logit_opacity[i].copy(),
                      self.color_logit[i].copy(), float(self.grad_accum[i]),
                      float(self.opacity_accum[i]), int(self.obs_count[i]))

    def quantize(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.atleast_2d(points) / self.cell_size).astype(np.int64)

    def _default_params(self, n: int):
        self.offsets = np.concatenate([self.offsets, self.rng.uniform(-0.5, 0.5, (n, self.k, 3))])
        self.axis_angle = np.concatenate([self.axis_angle, np.zeros((n, self.k, 3))])
        self.log_scales = np.concatenate([
            self.log_scales, np.full((n, self.k, 2), np.log(0.5 * self.cell_size))])
        self.logit_opacity = np.concatenate([
            self.logit_opacity, np.full((n, self.k), inverse_sigmoid(INIT_OPACITY))])
        self.color_logit = np.concatenate([self.color_logit, np.zeros((n, self.k, 3))])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.opacity_accum = np.concatenate([self.opacity_accum, np.zeros(n)])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(n, dtype=np.int64)])
        self.slot_grad_accum = np.concatenate([self.slot_grad_accum, np.zeros((n, self.k))])
        self.slot_obs = np.concatenate([self.slot_obs, np.zeros((n, self.k), dtype=np.int64)])

    def add_anchors(self, positions: np.ndarray, cells: np.ndarray) -> int:
        """Append anchors at given positions/cells (cells must be empty). Returns count added."""
        positions = np.atleast_2d(positions)
        cells = np.atleast_2d(cells).astype(np.int64)
        fresh = [i for i, c in enumerate(map(tuple, cells)) if c not in self.cell_index]
        if not fresh:
            return 0
        positions, cells = positions[fresh], cells[fresh]
        start = len(self)
        for i, c in enumerate(map(tuple, cells)):
            self.cell_index[c] = start + i
        self.cells = np.concatenate([self.cells, cells])
        self.positions = np.concatenate([self.positions, positions])
        self._default_params(len(cells))
        return len(cells)

    def prune(self, keep: np.ndarray) -> np.ndarray:
        """Drop anchors where keep is False. Returns the kept row indices."""
        kept = np.flatnonzero(keep)
        for name in ("cells", "positions", "offsets", "axis_angle", "log_scales",
                     "logit_opacity", "color_logit", "grad_accum", "opacity_accum",
                     "obs_count", "slot_grad_accum", "slot_obs"):
            setattr(self, name, getattr(self, name)[kept])
        self.cell_index = {tuple(c): i for i, c in enumerate(self.cells)}
        return kept

    def reset_stats(self):
        self.grad_accum[:] = 0
        self.opacity_accum[:] = 0
        self.obs_count[:] = 0
        self.slot_grad_accum[:] = 0
        self.slot_obs[:] = 0

    def surfel_centers(self) -> np.ndarray:
        return (self.positions[:, None, :] + self.offsets * self.extent).reshape(-1, 3)

    def delete_slots(self, slot_mask: np.ndarray):
        """Silence surfel slots: opacity driven to ~0, offsets reinitialized."""
        mask = slot_mask.reshape(len(self), self.k)
        self.logit_opacity[mask] = -12.0
        self.offsets[mask] = self.rng.uniform(-0.5, 0.5, (int(mask.sum()), 3))


def init_anchors(seed_points: np.ndarray, anchor_cell_size: float,
                 k: int = DEFAULT_K, seed: int = 0) -> AnchorScaffold:
    """One anchor per occupied cell, placed at the mean of the cell's points."""
    pts = np.atleast_2d(np.asarray(seed_points, dtype=np.float64))
    if len(pts) == 0:
        raise ValueError("cannot initialize anchors from an empty seed set")
    sc = AnchorScaffold(anchor_cell_size, k=k, seed=seed)
    cells = sc.quantize(pts)
    uniq, inv = np.unique(cells, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, pts)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    sc.add_anchors(sums / counts[:, None], uniq)
    return sc


def spawn_surfels(scaffold: AnchorScaffold) -> SurfelBatch:
    """Materialize the k surfels of every anchor, in anchor-major order.

    Surfel index = anchor_row * k + slot. Deterministic given parameters.
    """
    A, k = len(scaffold), scaffold.k
    centers = scaffold.surfel_centers()
    t_u, t_v = frame_from_axis_angle(scaffold.axis_angle.reshape(-1, 3))
    scales = np.exp(scaffold.log_scales.reshape(-1, 2))
    alpha = sigmoid(scaffold.logit_opacity.reshape(-1))
    color = sigmoid(scaffold.color_logit.reshape(-1, 3))
    if A == 0:
        return SurfelBatch(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))
    return SurfelBatch(centers, t_u, t_v, scales, alpha, color)


def accumulate_stats(scaffold: AnchorScaffold, screen_grad_norms: np.ndarray,
                     weight_sums: np.ndarray, visible: np.ndarray):
    """Fold one render/backward step into the running densification statistics.

    Inputs are per-surfel (anchor-major spawn order): screen-space positional
    gradient norms, per-frame blend-weight sums, and a visibility mask.
    Anchors with no visible spawn are untouched.
    """
    A, k = len(scaffold), scaffold.k
    g = screen_grad_norms.reshape(A, k)
    ws = weight_sums.reshape(A, k)
    vis = visible.reshape(A, k)

    nvis = vis.sum(axis=1)
    seen = nvis > 0
    if not seen.any():
        return
    g_step = np.where(seen, np.sum(g * vis, axis=1) / np.maximum(nvis, 1), 0.0)
    o_step = np.where(seen, np.sum(ws * vis, axis=1) / np.maximum(nvis, 1), 0.0)
    n = scaffold.obs_count[seen].astype(np.float64)
    scaffold.grad_accum[seen] = (scaffold.grad_accum[seen] * n + g_step[seen]) / (n + 1)
    scaffold.opacity_accum[seen] = (scaffold.opacity_accum[seen] * n + o_step[seen]) / (n + 1)
    scaffold.obs_count[seen] += 1

    sn = scaffold.slot_obs[vis].astype(np.float64)
    scaffold.slot_grad_accum[vis] = (scaffold.slot_grad_accum[vis] * sn + g[vis]) / (sn + 1)
    scaffold.slot_obs[vis] += 1


# ---------------------------------------------------------------------------
# checkpointing: one flat little-endian record per anchor + JSON sidecar
# ---------------------------------------------------------------------------

def _record_dtype(k: int) -> np.dtype:
    return np.dtype([
        ("cell", "<i8", 3), ("position", "<f8", 3),
        ("offsets", "<f8", (k, 3)), ("axis_angle", "<f8", (k, 3)),
        ("log_scales", "<f8", (k, 2)), ("logit_opacity", "<f8", k),
        ("color_logit", "<f8", (k, 3)),
        ("grad_accum", "<f8"), ("opacity_accum", "<f8"), ("obs_count", "<i8"),
    ])


def save_scaffold(scaffold: AnchorScaffold, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rec = np.empty(len(scaffold), dtype=_record_dtype(scaffold.k))
    rec["cell"] = scaffold.cells
    rec["position"] = scaffold.positions
    rec["offsets"] = scaffold.offsets
    rec["axis_angle"] = scaffold.axis_angle
    rec["log_scales"] = scaffold.log_scales
    rec["logit_opacity"] = scaffold.logit_opacity
    rec["color_logit"] = scaffold.color_logit
    rec["grad_accum"] = scaffold.grad_accum
    rec["opacity_accum"] = scaffold.opacity_accum
    rec["obs_count"] = scaffold.obs_count
    with open(path / "anchors.bin", "wb") as f:
        f.write(rec.tobytes())
    with open(path / "anchors.json", "w") as f:
        json.dump({"anchor_count": len(scaffold), "k": scaffold.k,
                   "cell_size": scaffold.cell_size, "extent": scaffold.extent}, f)


def load_scaffold(path) -> AnchorScaffold:
    path = Path(path)
    with open(path / "anchors.json") as f:
        head = json.load(f)
    k = head["k"]
    sc = AnchorScaffold(head["cell_size"], k=k)
    sc.extent = head["extent"]
    rec = np.fromfile(path / "anchors.bin", dtype=_record_dtype(k))
    n = head["anchor_count"]
    sc.cells = rec["cell"].astype(np.int64).reshape(n, 3)
    sc.positions = rec["position"].astype(np.float64).reshape(n, 3)
    sc.offsets = rec["offsets"].astype(np.float64).reshape(n, k, 3)
    sc.axis_angle = rec["axis_angle"].astype(np.float64).reshape(n, k, 3)
    sc.log_scales = rec["log_scales"].astype(np.float64).reshape(n, k, 2)
    sc.logit_opacity = rec["logit_opacity"].astype(np.float64).reshape(n, k)
    sc.color_logit = rec["color_logit"].astype(np.float64).reshape(n, k, 3)
    sc.grad_accum = rec["grad_accum"].astype(np.float64).reshape(n)
    sc.opacity_accum = rec["opacity_accum"].astype(np.float64).reshape(n)
    sc.obs_count = rec["obs_count"].astype(np.int64).reshape(n)
    sc.slot_grad_accum = np.zeros((n, k))
    sc.slot_obs = np.zeros((n, k), dtype=np.int64)
    sc.cell_index = {tuple(c): i for i, c in enumerate(sc.cells)}
    return sc
