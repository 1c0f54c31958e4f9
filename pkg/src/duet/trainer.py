"""The optimization loop: warm-up, voxel bootstrap, interleaved updates.

Schedule (0-based iteration t):
  t < warm_up                      surfel losses only
  t == warm_up                     bootstrap the voxel grid from renders
  every voxel_reset_interval after re-fuse the grid, residuals to zero
  every tether_interval after      explicit growth/prune pass
Monocular-prior weights anneal linearly until iteration 10,000. One frame
per iteration; fully deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .anchor_scaffold import (AnchorScaffold, accumulate_stats, init_anchors,
                              save_scaffold, sigmoid, spawn_surfels)
from .losses import (LossWeights, depth_distortion_loss, mono_depth_loss,
                     mono_normal_loss, normal_consistency_loss,
                     photometric_loss, total_loss, voxel_losses)
from .rotation import frame_backward
from .scene_io import Dataset, Frame, save_cameras
from .surfel_raster import rasterize, rasterize_backward, screen_space_gradients
from .tethering import TetherConfig, explicit_tether, implicit_tether_loss
from .voxel_scaffold import SparseVoxelGrid, reset_from_render, save_grid

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-15


@dataclass
class TrainConfig:
    total_iters: int = 20000
    warm_up: int = 1500
    voxel_reset_interval: int = 1500
    tether_interval: int = 100
    anchor_cell_size: float = 0.1
    k: int = 10
    voxel_size: float = 0.04
    truncation: float = 0.12
    lr_offsets: float = 1.6e-3  # scaled by scene extent
    lr_axis_angle: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_sdf_residual: float = 1e-3
    lr_voxel_color: float = 2.5e-3
    voxel_rays: int = 1024
    voxel_samples: int = 8
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = final checkpoint only
    background: tuple = (0.0, 0.0, 0.0)
    tether_enabled: bool = True
    threads: int = 1  # informational; kernels are single-threaded
    weights: LossWeights = field(default_factory=LossWeights)
    tether: TetherConfig = field(default_factory=TetherConfig)

    def __post_init__(self):
        if self.warm_up >= self.total_iters:
            raise ValueError("warm_up must be smaller than total_iters")
        if min(self.voxel_reset_interval, self.tether_interval) <= 0:
            raise ValueError("intervals must be positive")
        if not self.tether_enabled:
            self.tether.use_band = False
            self.tether.lambda_t = 0.0
            self.weights.lambda_t = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "tether" in d and isinstance(d["tether"], dict):
            d["tether"] = TetherConfig(**d["tether"])
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


class OptimizerState:
    """Adam moments per named parameter group."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def ensure(self, name: str, shape):
        if name not in self.m or self.m[name].shape != tuple(shape):
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.steps[name] = 0

    def drop(self, name: str):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.steps.pop(name, None)

    def remap_rows(self, name: str, old_rows: np.ndarray, n_new: int):
        """Carry moments of surviving rows, zeros for appended rows."""
        if name not in self.m:
            return
        for acc in (self.m, self.v):
            kept = acc[name][old_rows]
            fresh = np.zeros((n_new,) + acc[name].shape[1:])
            acc[name] = np.concatenate([kept, fresh])


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
              name: str, lr: float):
    """Bias-corrected Adam update in place."""
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch for {name}: {params.shape} vs {grads.shape}")
    state.ensure(name, params.shape)
    state.steps[name] += 1
    t = state.steps[name]
    m, v = state.m[name], state.v[name]
    m *= ADAM_B1
    m += (1 - ADAM_B1) * grads
    v *= ADAM_B2
    v += (1 - ADAM_B2) * grads * grads
    mh = m / (1 - ADAM_B1**t)
    vh = v / (1 - ADAM_B2**t)
    params -= lr * mh / (np.sqrt(vh) + ADAM_EPS)


@dataclass
class TrainResult:
    scaffold: AnchorScaffold
    grid: SparseVoxelGrid | None
    log: list[str]
    cameras: list


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    scaffold = init_anchors(dataset.seed_points, cfg.anchor_cell_size, k=cfg.k, seed=cfg.seed)
    centroid = dataset.seed_points.mean(axis=0)
    scene_extent = float(np.max(np.linalg.norm(dataset.seed_points - centroid, axis=1)))
    lr_offsets = cfg.lr_offsets * max(scene_extent, 1e-6)

    cameras = [fr.camera for fr in dataset.frames]
    opt = OptimizerState()
    grid: SparseVoxelGrid | None = None
    log: list[str] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "config_resolved.json", "w") as f:
            json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)

    def emit(record: dict):
        log.append(json.dumps(record, sort_keys=True))

    def checkpoint(t: int):
        if out_path is None:
            return
        ck = out_path / f"ckpt_{t}"
        save_scaffold(scaffold, ck)
        if grid is not None:
            save_grid(grid, ck)
        save_cameras(ck / "cameras.json", cameras)

    for t in range(cfg.total_iters):
        # ---- voxel bootstrap / periodic re-fuse -----------------------------
        if t >= cfg.warm_up and (t - cfg.warm_up) % cfg.voxel_reset_interval == 0:
            surfels = spawn_surfels(scaffold)
            grid = reset_from_render((cfg.voxel_size, cfg.truncation), surfels,
                                     cameras, cfg.background)
            opt.drop("sdf_residual")
            opt.drop("voxel_color")
            emit({"iter": t, "event": "bootstrap" if t == cfg.warm_up else "voxel_reset",
                  "blocks": grid.block_count})

        frame = dataset.frames[int(rng.integers(len(dataset.frames)))]
        surfels = spawn_surfels(scaffold)
        out = rasterize(surfels, frame.camera, cfg.background)

        parts = {}
        w = cfg.weights
        parts["L_c"], g_rgb = photometric_loss(out.rgb, frame.rgb, w.lambda_ssim)
        parts["L_d"], gd_w, gd_z = depth_distortion_loss(out)
        parts["L_n"], gn_w, gn_n = normal_consistency_loss(out)
        parts["L_md"], g_depth = mono_depth_loss(out.depth, frame.depth)
        parts["L_mn"], g_normal = mono_normal_loss(out.normal, frame.normal)

        res_grad = col_grad = None
        tether_pg = tether_corners = None
        if grid is not None:
            rendered = Frame(frame.camera, out.rgb, out.depth, out.normal)
            vparts, res_grad, col_grad = voxel_losses(
                grid, rendered, rng, cfg.voxel_rays, cfg.voxel_samples, weights=w)
            parts.update(vparts)
            lt, tether_pg, t_lin, t_cg, _ = implicit_tether_loss(
                surfels.p, grid, mode=cfg.tether.loss_mode)
            parts["L_t"] = lt
            tether_corners = (t_lin, t_cg)

        breakdown = total_loss(parts, w, t)

        lam_md, lam_mn = w.lambda_md(t), w.lambda_mn(t)
        frag_w = w.lambda_d * gd_w + w.lambda_n * gn_w
        frag_z = w.lambda_d * gd_z
        frag_n = w.lambda_n * gn_n
        sg = rasterize_backward(out, grad_rgb=g_rgb, grad_depth=lam_md * g_depth,
                                grad_normal=lam_mn * g_normal, grad_alpha=None,
                                frag_grad_w=frag_w, frag_grad_z=frag_z, frag_grad_n=frag_n)

        # densification statistics use the rendering-path gradients only
        screen = screen_space_gradients(surfels, frame.camera, sg.p)
        weight_sums = out.surfel_weight_sums()
        accumulate_stats(scaffold, np.linalg.norm(screen, axis=1), weight_sums,
                         weight_sums > 0)

        g_p = sg.p
        if tether_pg is not None and w.lambda_t > 0:
            g_p = g_p + w.lambda_t * tether_pg

        A, k = len(scaffold), scaffold.k
        alpha = sigmoid(scaffold.logit_opacity.reshape(-1))
        color = sigmoid(scaffold.color_logit.reshape(-1, 3))
        grads = {
            "offsets": (g_p * scaffold.extent).reshape(A, k, 3),
            "axis_angle": frame_backward(scaffold.axis_angle.reshape(-1, 3),
                                         sg.t_u, sg.t_v).reshape(A, k, 3),
            "log_scales": (sg.scales * np.exp(scaffold.log_scales.reshape(-1, 2))).reshape(A, k, 2),
            "logit_opacity": (sg.alpha * alpha * (1 - alpha)).reshape(A, k),
            "color_logit": (sg.color * color * (1 - color)).reshape(A, k, 3),
        }
        adam_step(scaffold.offsets, grads["offsets"], opt, "offsets", lr_offsets)
        adam_step(scaffold.axis_angle, grads["axis_angle"], opt, "axis_angle", cfg.lr_axis_angle)
        adam_step(scaffold.log_scales, grads["log_scales"], opt, "log_scales", cfg.lr_scales)
        adam_step(scaffold.logit_opacity, grads["logit_opacity"], opt, "logit_opacity", cfg.lr_opacity)
        adam_step(scaffold.color_logit, grads["color_logit"], opt, "color_logit", cfg.lr_color)
        np.clip(scaffold.offsets, -1.0, 1.0, out=scaffold.offsets)

        if grid is not None:
            if tether_corners is not None and w.lambda_t > 0:
                grid.scatter_residual_grads(tether_corners[0],
                                            w.lambda_t * tether_corners[1], res_grad)
            adam_step(grid.sdf_residual, res_grad, opt, "sdf_residual", cfg.lr_sdf_residual)
            adam_step(grid.color, col_grad, opt, "voxel_color", cfg.lr_voxel_color)
            np.clip(grid.color, 0.0, 1.0, out=grid.color)

        # ---- explicit tether cadence ----------------------------------------
        if grid is not None and t > cfg.warm_up and (t - cfg.warm_up) % cfg.tether_interval == 0:
            old_cells = dict(scaffold.cell_index)
            report = explicit_tether(scaffold, grid, cfg.tether)
            rows = [old_cells.get(tuple(c), -1) for c in scaffold.cells]
            _remap_anchor_groups(opt, np.asarray(rows, dtype=np.int64), scaffold)
            emit({"iter": t, "event": "tether", **report.to_dict()})

        if t % cfg.log_every == 0 or t == cfg.total_iters - 1:
            emit({"iter": t, "lambda_md": lam_md, "lambda_mn": lam_mn,
                  "n_anchors": len(scaffold), "loss": breakdown.to_dict()})
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            checkpoint(t + 1)

    checkpoint(cfg.total_iters)
    if out_path is not None:
        with open(out_path / "log.jsonl", "w") as f:
            f.write("\n".join(log) + "\n")
    return TrainResult(scaffold, grid, log, cameras)


def _remap_anchor_groups(opt: OptimizerState, old_rows: np.ndarray, scaffold: AnchorScaffold):
    """After prune/grow: carry Adam moments by anchor identity (cell)."""
    survivors = old_rows[old_rows >= 0]
    n_new = int(np.count_nonzero(old_rows < 0))
    for name in ("offsets", "axis_angle", "log_scales", "logit_opacity", "color_logit"):
        if name not in opt.m:
            continue
        # rows are ordered: survivors keep their relative order, fresh rows append
        opt.remap_rows(name, survivors, n_new)
