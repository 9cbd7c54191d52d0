import logging
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH
from app.core.exceptions import ContractError, SingularSystemError
from app.schemas import TPSTransform

logger = logging.getLogger(__name__)


# -----------------------
# Thin-plate spline
# -----------------------
def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 with U(0) = 0, evaluated on squared distances."""
    out = np.zeros_like(r2, dtype=np.float64)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def _tps_system(src: np.ndarray, dst: np.ndarray, regularization: float) -> Tuple[np.ndarray, np.ndarray]:
    """The bordered [K + lambda I, P; P^T, 0] system and its right-hand side."""
    n = src.shape[0]
    K = tps_kernel(_pairwise_sq(src, src)) + regularization * np.eye(n)
    P = np.hstack([np.ones((n, 1)), src])
    A = np.block([[K, P], [P.T, np.zeros((3, 3))]])
    rhs = np.vstack([dst, np.zeros((3, 2))])
    return A, rhs


def fit_tps(src: np.ndarray, dst: np.ndarray, regularization: float = 0.0) -> TPSTransform:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ContractError(f"control point counts differ: {src.shape[0]} vs {dst.shape[0]}", field="dst")
    n = src.shape[0]
    if n < 3:
        raise ContractError(f"TPS needs at least 3 control points, got {n}", field="src")
    if regularization < 0:
        raise ContractError("regularization must be non-negative", field="regularization")

    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise SingularSystemError("control points are collinear; TPS system is singular", field="src")

    A, rhs = _tps_system(src, dst, regularization)

    try:
        theta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"TPS system is singular: {e}", field="src")
    if not np.all(np.isfinite(theta)):
        raise SingularSystemError("TPS solve produced non-finite coefficients", field="src")

    return TPSTransform(
        control_src=src,
        control_dst=dst,
        affine=theta[n:].T.copy(),
        radial_weights=theta[:n].copy(),
        regularization=float(regularization),
    )


def tps_map_points(t: TPSTransform, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    U = tps_kernel(_pairwise_sq(pts, t.control_src))
    P = np.hstack([np.ones((pts.shape[0], 1)), pts])
    return P @ t.affine.T + U @ t.radial_weights


def bending_energy(t: TPSTransform) -> float:
    K = tps_kernel(_pairwise_sq(t.control_src, t.control_src))
    w = t.radial_weights
    return float(np.einsum("ic,ij,jc->", w, K, w))


def _least_squares_inverse(t: TPSTransform) -> TPSTransform:
    """Minimum-norm solution of the dst -> src system, for targets the exact solve rejects."""
    src, dst = t.control_dst, t.control_src
    n = src.shape[0]
    A, rhs = _tps_system(src, dst, t.regularization)
    theta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return TPSTransform(
        control_src=src,
        control_dst=dst,
        affine=theta[n:].T.copy(),
        radial_weights=theta[:n].copy(),
        regularization=t.regularization,
    )


def _sample_coords(t: TPSTransform, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every output pixel, from the spline fitted dst -> src."""
    try:
        backward = fit_tps(t.control_dst, t.control_src, t.regularization)
    except SingularSystemError as e:
        logger.warning("Inverse TPS is singular (%s); using the least-squares inverse", e)
        backward = _least_squares_inverse(t)
    ys, xs = np.mgrid[0:height, 0:width]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = tps_map_points(backward, grid)
    return src[:, 1].reshape(height, width), src[:, 0].reshape(height, width)


def _outside(rows: np.ndarray, cols: np.ndarray, height: int, width: int, eps: float = 1e-6) -> np.ndarray:
    return (rows < -eps) | (rows > height - 1 + eps) | (cols < -eps) | (cols > width - 1 + eps)


def apply_tps(t: TPSTransform, img: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Backward warp with bilinear sampling; samples leaving the frame take ``fill``."""
    img = np.asarray(img, dtype=np.float64)
    height, width = img.shape[:2]
    rows, cols = _sample_coords(t, height, width)
    outside = _outside(rows, cols, height, width)
    rows_c = np.clip(rows, 0, height - 1)
    cols_c = np.clip(cols, 0, width - 1)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], [rows_c, cols_c], order=1, mode="nearest")
    out[outside] = fill
    return np.clip(out, 0.0, 1.0)


def apply_tps_labels(t: TPSTransform, labels: np.ndarray, fill: int = 0) -> np.ndarray:
    """Nearest-label backward warp for segmentation masks."""
    height, width = labels.shape
    rows, cols = _sample_coords(t, height, width)
    outside = _outside(rows, cols, height, width)
    r = np.clip(np.rint(rows), 0, height - 1).astype(np.int64)
    c = np.clip(np.rint(cols), 0, width - 1).astype(np.int64)
    out = labels[r, c].copy()
    out[outside] = fill
    return out


def frame_anchor_points(height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> np.ndarray:
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]])


# -----------------------
# Gaussian feathered compositing
# -----------------------
def feather_kernel(radius: int) -> np.ndarray:
    """Isotropic Gaussian, sigma = radius / 2, truncated to the disc of the given radius, sum 1."""
    if radius <= 0:
        return np.ones((1, 1))
    sigma = radius / 2.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    r2 = xx ** 2 + yy ** 2
    k = np.exp(-r2 / (2.0 * sigma * sigma))
    k[r2 > radius * radius] = 0.0
    return k / k.sum()


def feather_alpha(mask: np.ndarray, radius: int) -> np.ndarray:
    m = (np.asarray(mask) > 0).astype(np.float64)
    if radius <= 0:
        return m
    alpha = ndimage.convolve(m, feather_kernel(radius), mode="nearest")
    # a window entirely inside or outside the mask sums to exactly 0 or 1
    alpha[alpha < 1e-12] = 0.0
    alpha[alpha > 1.0 - 1e-12] = 1.0
    return alpha


def gaussian_feather_composite(
    base: np.ndarray,
    donor: np.ndarray,
    mask: np.ndarray,
    radius: int,
    alpha: Optional[np.ndarray] = None,
) -> np.ndarray:
    base = np.asarray(base)
    donor = np.asarray(donor)
    if base.shape != donor.shape:
        raise ContractError(f"base {base.shape} and donor {donor.shape} differ", field="donor")
    if np.asarray(mask).shape != base.shape[:2]:
        raise ContractError(f"mask {np.asarray(mask).shape} does not match image {base.shape[:2]}", field="mask")
    if radius < 0:
        raise ContractError("radius must be non-negative", field="radius")

    a = feather_alpha(mask, radius) if alpha is None else alpha
    a3 = a[..., None]
    blended = a3 * donor + (1.0 - a3) * base
    out = np.where(a3 == 0.0, base, np.where(a3 == 1.0, donor, blended))
    return out.astype(base.dtype, copy=False)
