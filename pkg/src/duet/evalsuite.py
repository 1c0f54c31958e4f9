"""Geometric and image evaluation.

Mesh metrics follow the point-set protocol: sample both meshes uniformly
by area, measure exact point-to-triangle distances (never point-to-point,
so target discretization does not bias the numbers), and threshold at T
for precision/recall. Gaussian-center metrics reuse the same distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .losses import image_ssim
from .scene_io import TriMesh


@dataclass
class SurfaceSamples:
    points: np.ndarray
    source: str = ""
    n: int = 0


@dataclass
class ReconMetrics:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float
    threshold: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "comp": self.comp, "prec": self.prec,
                "recall": self.recall, "fscore": self.fscore, "threshold": self.threshold}


def fscore(prec: float, recall: float) -> float:
    if prec + recall <= 0:
        return 0.0
    return 2.0 * prec * recall / (prec + recall)


def sample_surface(mesh: TriMesh, n: int, seed: int = 0, source: str = "") -> SurfaceSamples:
    """Area-weighted triangle choice + uniform barycentric coordinates."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot sample an empty mesh")
    if n == 0:
        return SurfaceSamples(np.zeros((0, 3)), source, 0)
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(probs), size=n, p=probs)
    r1 = rng.uniform(0.0, 1.0, n)
    r2 = rng.uniform(0.0, 1.0, n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    v = mesh.vertices
    t = mesh.triangles[tri]
    pts = v[t[:, 0]] + r1[:, None] * (v[t[:, 1]] - v[t[:, 0]]) + r2[:, None] * (v[t[:, 2]] - v[t[:, 0]])
    return SurfaceSamples(pts, source, n)


def point_triangle_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact distance between paired points and triangles (abc), vectorized."""
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = points - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = points - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)

    closest = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    done |= m

    m = ~done & (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    done |= m

    vc = d1 * d4 - d3 * d2
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = np.where(np.abs(d1 - d3) > 1e-300, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0)
    closest[m] = a[m] + t[m, None] * ab[m]
    done |= m

    m = ~done & (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    done |= m

    vb = d5 * d2 - d1 * d6
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = np.where(d2 - d6 == 0, 0.0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6))
    closest[m] = a[m] + t[m, None] * ac[m]
    done |= m

    va = d3 * d6 - d5 * d4
    m = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    denom = (d4 - d3) + (d5 - d6)
    t = np.where(denom == 0, 0.0, (d4 - d3) / np.where(denom == 0, 1.0, denom))
    closest[m] = b[m] + t[m, None] * (c[m] - b[m])
    done |= m

    m = ~done
    denom = np.where(va + vb + vc == 0, 1.0, va + vb + vc)
    v = vb / denom
    w = vc / denom
    closest[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    return np.linalg.norm(points - closest, axis=-1)


def nearest_distance(points, mesh: TriMesh, chunk: int = 20000) -> np.ndarray:
    """Exact per-point distance to the triangle set via centroid-tree pruning."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot measure distance to an empty mesh")
    pts = points.points if isinstance(points, SurfaceSamples) else np.atleast_2d(points)
    v = mesh.vertices
    tris = mesh.triangles
    A, B, C = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    centroids = (A + B + C) / 3.0
    radii = np.maximum(np.maximum(np.linalg.norm(A - centroids, axis=1),
                                  np.linalg.norm(B - centroids, axis=1)),
                       np.linalg.norm(C - centroids, axis=1))
    r_max = float(radii.max())
    tree = cKDTree(centroids)

    out = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        d0, j0 = tree.query(p)
        ub = d0 + radii[j0]  # distance to one concrete triangle bounds the optimum
        cand = tree.query_ball_point(p, ub + r_max + 1e-12)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if counts.sum() else np.zeros(0, dtype=np.int64)
        rep = np.repeat(np.arange(len(p)), counts)
        d = point_triangle_distance(p[rep], A[flat], B[flat], C[flat])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        out[lo:lo + len(p)] = np.minimum.reduceat(d, offsets)
    return out


def reconstruction_metrics(pred: TriMesh, gt: TriMesh, T: float = 0.05,
                           n_samples: int = 100000, seed: int = 0) -> ReconMetrics:
    """Acc/Comp/Prec/Recall/F-score between sampled point sets and meshes."""
    if len(pred.triangles) == 0 or len(gt.triangles) == 0:
        raise ValueError("reconstruction metrics need non-empty meshes")
    ps = sample_surface(pred, n_samples, seed, "pred")
    gs = sample_surface(gt, n_samples, seed + 1, "gt")
    d_pred = nearest_distance(ps, gt)
    d_gt = nearest_distance(gs, pred)
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    prec = float(np.mean(d_pred < T))
    recall = float(np.mean(d_gt < T))
    return ReconMetrics(acc, comp, prec, recall, fscore(prec, recall), T)


def gaussian_distribution_metrics(centers: np.ndarray, gt: TriMesh, thresholds):
    """Mean center-to-surface distance and the out-of-surface ratio per threshold."""
    centers = np.atleast_2d(centers)
    if len(centers) == 0 or len(gt.triangles) == 0:
        raise ValueError("gaussian metrics need non-empty inputs")
    d = nearest_distance(centers, gt)
    d_gs = float(d.mean())
    deltas = {float(t): float(np.mean(d > t)) for t in thresholds}
    return d_gs, deltas


def image_metrics(rendered: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(PSNR dB capped at 100, mean SSIM)."""
    if rendered.shape != gt.shape:
        raise ValueError("image metrics need matching resolutions")
    mse = float(np.mean((rendered - gt) ** 2))
    psnr = 100.0 if mse < 1e-10 else min(100.0, 10.0 * np.log10(1.0 / mse))
    return float(psnr), image_ssim(rendered, gt)
