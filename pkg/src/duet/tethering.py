"""Coupling between the anchor scaffold and the voxel SDF.

Explicit pass: anchors may only exist and grow inside the confidence band
|f_v| < tau_d around the zero-level set; anchors that drift out, go dark
(low accumulated opacity), or leave the allocated region are pruned, and
spawned surfels outside the region are removed outright.

Implicit pass: a per-surfel penalty on f_v at the surfel center pulls
surfels toward the surface while back-propagating into the SDF residuals,
so both representations move toward each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchor_scaffold import AnchorScaffold
from .voxel_scaffold import SparseVoxelGrid, backward_sdf


@dataclass
class TetherConfig:
    tau_g: float = 2e-4  # screen-gradient growth threshold
    tau_p: float = 5e-3  # accumulated-opacity prune threshold
    tau_d: float = 0.1  # confidence band half-width, scene units
    interval: int = 100  # steps between explicit passes
    lambda_t: float = 5.0  # implicit loss weight
    use_band: bool = True  # band gates off = plain statistics-driven management
    loss_mode: str = "squared"  # "squared" | "abs" penalty on f_v

    def __post_init__(self):
        if min(self.tau_g, self.tau_p, self.tau_d) <= 0 or self.interval <= 0:
            raise ValueError("tether thresholds and interval must be positive")


@dataclass
class TetherReport:
    grown: int = 0
    pruned_opacity: int = 0
    pruned_band: int = 0
    deleted_out_of_scaffold: int = 0

    def to_dict(self) -> dict:
        return {"grown": self.grown, "pruned_opacity": self.pruned_opacity,
                "pruned_band": self.pruned_band,
                "deleted_out_of_scaffold": self.deleted_out_of_scaffold}


def explicit_tether(scaffold: AnchorScaffold, grid: SparseVoxelGrid,
                    cfg: TetherConfig) -> TetherReport:
    """One growth/prune pass gated by the SDF confidence band.

    Prune first (opacity evidence, out-of-band, out-of-scaffold), then grow
    from the survivors' high-gradient spawns into empty in-band cells, then
    remove spawned surfels whose centers left the allocated region and reset
    every statistics window. Anchors without observations since the last
    pass are exempt from the statistics-driven rules.
    """
    report = TetherReport()
    if len(scaffold) == 0:
        return report

    has_obs = scaffold.obs_count > 0
    q_anchor = grid.query(scaffold.positions)

    prune_opacity = has_obs & (scaffold.opacity_accum < cfg.tau_p)
    if cfg.use_band:
        out_of_band = q_anchor.valid & (np.abs(q_anchor.value) > cfg.tau_d)
        invalid = ~q_anchor.valid
        prune_band = out_of_band | invalid
    else:
        prune_band = np.zeros(len(scaffold), dtype=bool)
    prune = prune_opacity | prune_band
    report.pruned_opacity = int(np.count_nonzero(prune_opacity & ~prune_band))
    report.pruned_band = int(np.count_nonzero(prune_band))

    # growth proposals come from surviving anchors with strong evidence
    survivors = ~prune
    anchor_hot = survivors & has_obs & (scaffold.grad_accum > cfg.tau_g)
    slot_mean = np.where(scaffold.slot_obs > 0, scaffold.slot_grad_accum, 0.0)
    hot_slots = anchor_hot[:, None] & (scaffold.slot_obs > 0) & (slot_mean > cfg.tau_g)
    proposals = scaffold.surfel_centers().reshape(len(scaffold), scaffold.k, 3)[hot_slots]

    scaffold.prune(survivors)

    if len(proposals):
        cells = scaffold.quantize(proposals)
        if cfg.use_band:
            q_prop = grid.query(proposals)
            ok = q_prop.valid & (np.abs(q_prop.value) < cfg.tau_d)
        else:
            ok = np.ones(len(proposals), dtype=bool)
        report.grown = scaffold.add_anchors(proposals[ok], cells[ok])

    if cfg.use_band and len(scaffold):
        centers = scaffold.surfel_centers()
        q_surf = grid.query(centers)
        dead = ~q_surf.valid
        report.deleted_out_of_scaffold = int(np.count_nonzero(dead))
        if dead.any():
            scaffold.delete_slots(dead)

    scaffold.reset_stats()
    return report


def implicit_tether_loss(surfel_centers: np.ndarray, grid: SparseVoxelGrid,
                         mode: str = "squared"):
    """Surface-pull penalty on f_v at each surfel center.

    Returns (loss, per-point gradients (N,3), corner ids (M,8), corner
    gradients (M,8), valid mask). Points with invalid queries contribute
    nothing. "squared" penalizes f_v^2 (the default reading); "abs" uses
    |f_v|.
    """
    pts = np.atleast_2d(np.asarray(surfel_centers, dtype=np.float64))
    n = len(pts)
    point_grads = np.zeros((n, 3))
    q = grid.query(pts)
    valid = q.valid
    if not valid.any():
        return 0.0, point_grads, np.zeros((0, 8), dtype=np.int64), np.zeros((0, 8)), valid

    f = q.value[valid]
    if mode == "squared":
        loss = float(np.sum(f * f))
        upstream = 2.0 * f
    elif mode == "abs":
        loss = float(np.sum(np.abs(f)))
        upstream = np.sign(f)
    else:
        raise ValueError(f"unknown tether loss mode: {mode}")

    qv = _subset_query(q, valid)
    corner_lin, corner_grads, pg = backward_sdf(qv, upstream)
    point_grads[valid] = pg
    return loss, point_grads, corner_lin, corner_grads, valid


def _subset_query(q, mask):
    from .voxel_scaffold import SdfQuery

    return SdfQuery(q.value[mask], q.gradient[mask], q.valid[mask],
                    q.corner_lin[mask], q.weights[mask], q.weight_grads[mask])
