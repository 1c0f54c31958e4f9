"""Axis-angle rotations and tangent-frame helpers.

Surfel orientations are stored as unconstrained axis-angle 3-vectors; the
tangent frame is the first two columns of the Rodrigues rotation. Written
with explicit component arithmetic so reductions have a fixed order.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (N,3) -> rotation matrices (N,3,3)."""
    w = np.atleast_2d(omega)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    # series for sin(t)/t and (1-cos t)/t^2 near zero
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = skew(w)
    K2 = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * K2


def skew(w: np.ndarray) -> np.ndarray:
    """(N,3) -> (N,3,3) cross-product matrices."""
    w = np.atleast_2d(w)
    out = np.zeros((len(w), 3, 3))
    out[:, 0, 1] = -w[:, 2]
    out[:, 0, 2] = w[:, 1]
    out[:, 1, 0] = w[:, 2]
    out[:, 1, 2] = -w[:, 0]
    out[:, 2, 0] = -w[:, 1]
    out[:, 2, 1] = w[:, 0]
    return out


def frame_from_axis_angle(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent frame (t_u, t_v) = first two rotation columns. Shapes (N,3)."""
    R = rodrigues(omega)
    return R[:, :, 0].copy(), R[:, :, 1].copy()


def rodrigues_backward(omega: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Chain dL/dR (N,3,3) back to dL/domega (N,3).

    Uses the Gallego-Yezzi closed form
        dR/dw_i = ((w_i [w]x + [w x (I - R) e_i]x) / |w|^2) R,
    with the limit dR/dw_i = [e_i]x at the identity.
    """
    w = np.atleast_2d(omega)
    n = len(w)
    R = rodrigues(w)
    theta2 = np.sum(w * w, axis=-1)
    small = theta2 < _SMALL_ANGLE**2
    grad = np.zeros((n, 3))
    eye = np.eye(3)
    ImR = eye[None] - R
    for i in range(3):
        e = eye[i]
        v = np.cross(w, ImR[:, :, i])  # w x ((I-R) e_i), (I-R)e_i is column i
        A = w[:, i, None, None] * skew(w) + skew(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            dRdwi = (A / np.where(small, 1.0, theta2)[:, None, None]) @ R
        dRdwi_small = skew(np.broadcast_to(e, (n, 3)))
        dRdwi = np.where(small[:, None, None], dRdwi_small, dRdwi)
        grad[:, i] = np.sum(dRdwi * grad_R, axis=(1, 2))
    return grad


def frame_backward(omega: np.ndarray, grad_tu: np.ndarray, grad_tv: np.ndarray) -> np.ndarray:
    """Chain tangent-frame gradients back to the axis-angle parameters."""
    n = len(np.atleast_2d(omega))
    grad_R = np.zeros((n, 3, 3))
    grad_R[:, :, 0] = grad_tu
    grad_R[:, :, 1] = grad_tv
    return rodrigues_backward(omega, grad_R)


def project_stiefel(t_u: np.ndarray, t_v: np.ndarray,
                    grad_tu: np.ndarray, grad_tv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project ambient frame gradients onto the orthonormality manifold.

    For X = [t_u t_v], the tangent projection is G - X sym(X^T G).
    """
    X = np.stack([t_u, t_v], axis=-1)  # (N,3,2)
    G = np.stack([grad_tu, grad_tv], axis=-1)
    XtG = np.swapaxes(X, 1, 2) @ G  # (N,2,2)
    sym = 0.5 * (XtG + np.swapaxes(XtG, 1, 2))
    P = G - X @ sym
    return P[:, :, 0].copy(), P[:, :, 1].copy()
