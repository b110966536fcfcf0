"""Corner features with oriented 256-bit binary descriptors.

Detector is a min-eigenvalue (Shi-Tomasi style) corner response with
non-maximum suppression; descriptors compare pairs of smoothed intensities on
a fixed pattern rotated by the patch orientation, so matching works under
in-plane rotation. Everything is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .manifold import CameraIntrinsics, Pose

PATCH_RADIUS = 12
BORDER_MARGIN = PATCH_RADIUS + 6

# fixed comparison pattern: 256 point pairs inside the patch
_rng = np.random.default_rng(90210)
_PATTERN = np.clip(_rng.normal(0.0, PATCH_RADIUS / 2.8, size=(256, 2, 2)), -PATCH_RADIUS + 1, PATCH_RADIUS - 1)
del _rng

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


@dataclass
class Features:
    keypoints: np.ndarray  # (N,2) pixel (u,v)
    descriptors: np.ndarray  # (N,32) uint8, 256 bits
    points: np.ndarray  # (N,3) camera-frame, metres

    def __len__(self) -> int:
        return len(self.keypoints)


@dataclass
class ObjectKeyframe:
    """Appearance snapshot of an object used for relocalisation."""

    T_CO: Pose
    keypoints: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray  # camera frame at capture time


def _corner_response(smoothed: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(smoothed, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(smoothed, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    tr = 0.5 * (sxx + syy)
    det = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    return tr - det  # smaller eigenvalue


def _orientations(smoothed: np.ndarray, us, vs, radius: int = 8):
    """Intensity-centroid patch orientation per keypoint."""
    ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = (xs * xs + ys * ys) <= radius * radius
    xs = xs[disk]
    ys = ys[disk]
    thetas = np.empty(len(us))
    for i in range(len(us)):
        patch = smoothed[vs[i] - radius: vs[i] + radius + 1, us[i] - radius: us[i] + radius + 1][disk]
        m10 = float(np.sum(xs * patch))
        m01 = float(np.sum(ys * patch))
        thetas[i] = np.arctan2(m01, m10)
    return thetas


def _describe(blurred: np.ndarray, us, vs, thetas) -> np.ndarray:
    n = len(us)
    desc = np.zeros((n, 32), dtype=np.uint8)
    for i in range(n):
        c, s = np.cos(thetas[i]), np.sin(thetas[i])
        R = np.array([[c, -s], [s, c]])
        pts = _PATTERN @ R.T  # (256,2,2) rotated offsets
        px = np.round(pts[..., 0] + us[i]).astype(np.int64)
        py = np.round(pts[..., 1] + vs[i]).astype(np.int64)
        a = blurred[py[:, 0], px[:, 0]]
        b = blurred[py[:, 1], px[:, 1]]
        desc[i] = np.packbits((a > b).astype(np.uint8))
    return desc


def detect_features(intensity: np.ndarray, depth: np.ndarray, mask: np.ndarray,
                    K: CameraIntrinsics, max_features: int = 400,
                    min_distance: int = 3, rel_threshold: float = 0.01) -> Features:
    """Corners inside the mask with valid depth, plus descriptors and 3D points.

    Uniform regions yield an empty (valid) feature set.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = intensity.shape
    empty = Features(np.zeros((0, 2)), np.zeros((0, 32), dtype=np.uint8), np.zeros((0, 3)))
    if not mask.any():
        return empty
    smoothed = ndimage.gaussian_filter(np.asarray(intensity, dtype=np.float64), 1.0, mode="nearest")
    resp = _corner_response(smoothed)

    interior = ndimage.binary_erosion(mask, iterations=2, border_value=0)
    allowed = np.zeros_like(mask)
    allowed[BORDER_MARGIN:h - BORDER_MARGIN, BORDER_MARGIN:w - BORDER_MARGIN] = True
    allowed &= interior & (depth > 0)
    if not allowed.any():
        return empty

    size = 2 * min_distance + 1
    local_max = resp == ndimage.maximum_filter(resp, size=size, mode="nearest")
    floor = max(rel_threshold * float(resp[allowed].max()), 1e-8)
    cand = local_max & allowed & (resp > floor)
    vs, us = np.nonzero(cand)
    if len(us) == 0:
        return empty
    order = np.argsort(resp[vs, us])[::-1][:max_features]
    us, vs = us[order], vs[order]

    blurred = ndimage.gaussian_filter(np.asarray(intensity, dtype=np.float64), 2.0, mode="nearest")
    thetas = _orientations(smoothed, us, vs)
    desc = _describe(blurred, us, vs, thetas)
    d = depth[vs, us]
    pts = np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=1)
    kps = np.stack([us, vs], axis=1).astype(np.float64)
    return Features(kps, desc, pts)


def hamming_distances(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """(N,M) Hamming distance matrix between packed 256-bit descriptors."""
    if len(d1) == 0 or len(d2) == 0:
        return np.zeros((len(d1), len(d2)), dtype=np.int32)
    x = np.bitwise_xor(d1[:, None, :], d2[None, :, :])
    return _POPCOUNT[x].sum(axis=2)


def match_descriptors(d1: np.ndarray, d2: np.ndarray, max_distance: int = 64,
                      ratio: float = 0.8):
    """Mutual nearest-neighbour matching with a Lowe-style ratio test.

    Returns (pairs (K,2) of indices into d1/d2, distances (K,)).
    """
    dist = hamming_distances(d1, d2)
    if dist.size == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int32)
    best2 = np.argmin(dist, axis=1)
    best1 = np.argmin(dist, axis=0)
    idx1 = np.arange(len(d1))
    mutual = best1[best2[idx1]] == idx1
    d_best = dist[idx1, best2]
    ok = mutual & (d_best <= max_distance)
    if dist.shape[1] >= 2:
        part = np.partition(dist, 1, axis=1)
        second = part[:, 1]
        ok &= d_best < ratio * np.maximum(second, 1)
    pairs = np.stack([idx1[ok], best2[ok]], axis=1)
    return pairs, d_best[ok]
