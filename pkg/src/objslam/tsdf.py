"""Sparse TSDF volumes (8^3 voxel blocks behind a dense block index), fusion,
multi-volume raycasting, semantic fusion, and PLY surface export.

All heavy paths are vectorized over pixels/voxels; a volume has one writer at
a time, raycasting treats every volume as read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import CameraIntrinsics, Pose

BLOCK = 8
BLOCK_VOXELS = BLOCK ** 3

# (512, 3) voxel offsets within a block, x-major to match flat indexing
_OFFSETS = np.stack(np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), np.arange(BLOCK),
                                indexing="ij"), axis=-1).reshape(-1, 3)


class NoClassError(ValueError):
    """Raised when a semantic class is requested from an empty histogram."""


class TsdfVolume:
    """Octree-style sparse TSDF: hash of 8^3 voxel blocks plus a dense block LUT.

    Voxel fields: tsdf (m, clamped to +-mu), fusion weight, grayscale
    intensity, foreground probability with its own observation count.
    """

    def __init__(self, voxel_size: float, truncation_voxels: float = 4.0, max_weight: float = 100.0):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.mu = truncation_voxels * self.voxel_size
        self.max_weight = float(max_weight)
        self.semantic: dict[int, float] = {}

        self._slots: dict[tuple, int] = {}
        self._block_coords = np.zeros((0, 3), dtype=np.int64)
        self._tsdf = np.zeros(0, dtype=np.float32)
        self._weight = np.zeros(0, dtype=np.float32)
        self._intensity = np.zeros(0, dtype=np.float32)
        self._fg = np.zeros(0, dtype=np.float32)
        self._fg_weight = np.zeros(0, dtype=np.float32)

        self._lut = np.full((1, 1, 1), -1, dtype=np.int64)
        self._lut_min = np.zeros(3, dtype=np.int64)

    # -- storage -----------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self._slots)

    def empty(self) -> bool:
        return not self._slots

    def _ensure_lut(self, bmin, bmax):
        lo = np.minimum(self._lut_min, bmin - 2)
        hi = np.maximum(self._lut_min + np.array(self._lut.shape) - 1, bmax + 2)
        if np.array_equal(lo, self._lut_min) and np.array_equal(hi - lo + 1, self._lut.shape):
            return
        new = np.full(tuple(hi - lo + 1), -1, dtype=np.int64)
        off = self._lut_min - lo
        s = self._lut.shape
        new[off[0]:off[0] + s[0], off[1]:off[1] + s[1], off[2]:off[2] + s[2]] = self._lut
        self._lut = new
        self._lut_min = lo

    def allocate(self, blocks: np.ndarray) -> None:
        """Allocate voxel blocks (M,3) block coords; existing blocks unchanged."""
        blocks = np.asarray(blocks, dtype=np.int64).reshape(-1, 3)
        if blocks.size == 0:
            return
        blocks = np.unique(blocks, axis=0)
        fresh = [b for b in blocks if tuple(b) not in self._slots]
        if not fresh:
            return
        fresh = np.array(fresh, dtype=np.int64)
        n_old = self.n_blocks
        n_new = len(fresh)
        self._block_coords = np.vstack([self._block_coords, fresh])
        grow = n_new * BLOCK_VOXELS
        self._tsdf = np.concatenate([self._tsdf, np.full(grow, self.mu, dtype=np.float32)])
        self._weight = np.concatenate([self._weight, np.zeros(grow, dtype=np.float32)])
        self._intensity = np.concatenate([self._intensity, np.zeros(grow, dtype=np.float32)])
        self._fg = np.concatenate([self._fg, np.full(grow, 0.5, dtype=np.float32)])
        self._fg_weight = np.concatenate([self._fg_weight, np.zeros(grow, dtype=np.float32)])
        self._ensure_lut(fresh.min(axis=0), fresh.max(axis=0))
        for i, b in enumerate(fresh):
            slot = n_old + i
            self._slots[tuple(b)] = slot
            r = b - self._lut_min
            self._lut[r[0], r[1], r[2]] = slot

    def _voxel_flat(self, vox: np.ndarray) -> np.ndarray:
        """Flat storage index per voxel coord (N,3); -1 where unallocated."""
        block = np.floor_divide(vox, BLOCK)
        rel = block - self._lut_min
        shape = np.array(self._lut.shape)
        inb = np.all((rel >= 0) & (rel < shape), axis=1)
        idx = np.full(len(vox), -1, dtype=np.int64)
        r = rel[inb]
        idx[inb] = self._lut[r[:, 0], r[:, 1], r[:, 2]]
        off = vox - block * BLOCK
        flat = idx * BLOCK_VOXELS + off[:, 0] * 64 + off[:, 1] * 8 + off[:, 2]
        flat[idx < 0] = -1
        return flat

    def block_aabb(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.empty():
            return None
        lo = self._block_coords.min(axis=0) * BLOCK * self.voxel_size
        hi = (self._block_coords.max(axis=0) + 1) * BLOCK * self.voxel_size
        return lo, hi

    # -- sampling ----------------------------------------------------------

    def sample_nearest(self, points: np.ndarray):
        """(values, observed, block_allocated) at points (N,3) in volume frame."""
        vox = np.floor(points / self.voxel_size).astype(np.int64)
        flat = self._voxel_flat(vox)
        safe = np.maximum(flat, 0)
        vals = self._tsdf[safe].astype(np.float64)
        w = self._weight[safe]
        ok = (flat >= 0) & (w > 0)
        return vals, ok, flat >= 0

    def sample_trilinear(self, points: np.ndarray):
        """Trilinear TSDF at points (N,3); valid only if all 8 corners observed."""
        g = points / self.voxel_size - 0.5
        base = np.floor(g).astype(np.int64)
        frac = g - base
        vals = np.zeros(len(points))
        ok = np.ones(len(points), dtype=bool)
        for corner in range(8):
            d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=np.int64)
            flat = self._voxel_flat(base + d)
            safe = np.maximum(flat, 0)
            w = np.prod(np.where(d[None, :] == 1, frac, 1.0 - frac), axis=1)
            cv = self._tsdf[safe].astype(np.float64)
            ok &= (flat >= 0) & (self._weight[safe] > 0)
            vals += w * cv
        return vals, ok

    def sample_gradient(self, points: np.ndarray):
        """Central-difference TSDF gradient (N,3); step of one voxel."""
        h = self.voxel_size
        grad = np.zeros((len(points), 3))
        ok = np.ones(len(points), dtype=bool)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            vp, okp = self.sample_trilinear(points + e)
            vm, okm = self.sample_trilinear(points - e)
            grad[:, axis] = (vp - vm) / (2 * h)
            ok &= okp & okm
        return grad, ok

    # -- fusion ------------------------------------------------------------

    def integrate(self, T_MC: Pose, K: CameraIntrinsics, depth: np.ndarray,
                  intensity: np.ndarray | None, mask: np.ndarray,
                  class_probs: dict[int, float] | None = None,
                  fuse_foreground: bool = True) -> None:
        """Fuse one masked RGB-D observation.

        T_MC is the camera pose in the volume (model) frame. Pixels of `mask`
        with valid depth drive allocation and tsdf/colour updates; all other
        valid-depth observations inside already-allocated space push the
        foreground probability toward 0 (when fuse_foreground).
        """
        depth = np.asarray(depth, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        band_v, band_u = np.nonzero(mask & (depth > 0))
        if band_v.size == 0:
            return

        R_MC = T_MC.R
        t_MC = T_MC.t
        d = depth[band_v, band_u]
        dirs = np.stack([(band_u - K.cx) / K.fx, (band_v - K.cy) / K.fy, np.ones_like(d)], axis=1)
        n_off = int(np.ceil(2 * self.mu / (0.5 * self.voxel_size))) + 1
        offs = np.linspace(-self.mu, self.mu, n_off)
        zs = d[:, None] + offs[None, :]
        pts_c = dirs[:, None, :] * zs[:, :, None]
        pts_m = pts_c.reshape(-1, 3) @ R_MC.T + t_MC
        vox = np.floor(pts_m / self.voxel_size).astype(np.int64)
        self.allocate(np.unique(np.floor_divide(vox, BLOCK), axis=0))

        # voxel update pass over every allocated block
        vox_all = (self._block_coords[:, None, :] * BLOCK + _OFFSETS[None, :, :]).reshape(-1, 3)
        centers = (vox_all + 0.5) * self.voxel_size
        T_CM = T_MC.inverse()
        p_c = centers @ T_CM.R.T + T_CM.t
        z = p_c[:, 2]
        vis = z > 1e-6
        u = np.full(len(z), -1, dtype=np.int64)
        v = np.full(len(z), -1, dtype=np.int64)
        zi = np.where(vis, z, 1.0)
        u[vis] = np.round(K.fx * p_c[vis, 0] / zi[vis] + K.cx).astype(np.int64)
        v[vis] = np.round(K.fy * p_c[vis, 1] / zi[vis] + K.cy).astype(np.int64)
        vis &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        us = np.clip(u, 0, K.width - 1)
        vs = np.clip(v, 0, K.height - 1)
        dpx = depth[vs, us]
        vis &= dpx > 0
        sdf = dpx - z
        in_band = vis & (np.abs(sdf) <= self.mu)
        in_mask = mask[vs, us]

        upd = in_band & in_mask
        if np.any(upd):
            w_old = self._weight[upd].astype(np.float64)
            obs = np.clip(sdf[upd], -self.mu, self.mu)
            self._tsdf[upd] = ((self._tsdf[upd] * w_old + obs) / (w_old + 1.0)).astype(np.float32)
            if intensity is not None:
                i_obs = np.asarray(intensity, dtype=np.float64)[vs[upd], us[upd]]
                self._intensity[upd] = ((self._intensity[upd] * w_old + i_obs) / (w_old + 1.0)).astype(np.float32)
            self._weight[upd] = np.minimum(w_old + 1.0, self.max_weight).astype(np.float32)

        if fuse_foreground:
            fg_upd = in_band
            if np.any(fg_upd):
                fw = self._fg_weight[fg_upd].astype(np.float64)
                obs = in_mask[fg_upd].astype(np.float64)
                self._fg[fg_upd] = ((self._fg[fg_upd] * fw + obs) / (fw + 1.0)).astype(np.float32)
                self._fg_weight[fg_upd] = np.minimum(fw + 1.0, self.max_weight).astype(np.float32)

        if class_probs:
            for cid, p in class_probs.items():
                self.semantic[int(cid)] = self.semantic.get(int(cid), 0.0) + float(p)

    # -- surface export ----------------------------------------------------

    def surface_voxels(self, foreground_gate: bool = False):
        """Zero-crossing voxels: (points, normals, intensities) in volume frame."""
        if self.empty():
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        sel = (self._weight > 0) & (np.abs(self._tsdf) < self.voxel_size)
        if foreground_gate:
            sel &= self._fg > 0.5
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        slot = idx // BLOCK_VOXELS
        off = idx % BLOCK_VOXELS
        vox = self._block_coords[slot] * BLOCK + np.stack(
            [off // 64, (off // 8) % 8, off % 8], axis=1)
        pts = (vox + 0.5) * self.voxel_size
        grad, ok = self.sample_gradient(pts)
        norm = np.linalg.norm(grad, axis=1)
        ok &= norm > 1e-9
        normals = np.zeros_like(grad)
        normals[ok] = grad[ok] / norm[ok, None]
        return pts[ok], normals[ok], self._intensity[idx[ok]].astype(np.float64)


def most_likely_class(volume: TsdfVolume) -> int:
    """Argmax of the fused semantic histogram; ties broken by lowest class id."""
    if not volume.semantic:
        raise NoClassError("semantic histogram is empty")
    best = max(sorted(volume.semantic.keys()), key=lambda c: (volume.semantic[c], -c))
    return int(best)


# ---------------------------------------------------------------------------
# Raycasting
# ---------------------------------------------------------------------------


@dataclass
class RenderedView:
    """Raycast reference maps: depth (camera z), world vertices/normals,
    per-pixel instance id (0 background, -1 invalid) and validity.

    valid marks every surface crossing; normal_ok the subset where the TSDF
    gradient was fully sampleable (normals are zero elsewhere)."""

    depth: np.ndarray
    vertex: np.ndarray
    normal: np.ndarray
    instance: np.ndarray
    valid: np.ndarray
    K: CameraIntrinsics
    T_WC: Pose
    normal_ok: np.ndarray = None

    def __post_init__(self):
        if self.normal_ok is None:
            self.normal_ok = self.valid.copy()

    def pixel_count(self, instance_id: int) -> int:
        return int(np.count_nonzero(self.valid & (self.instance == instance_id)))


def _ray_aabb(o, dirs, lo, hi, near, far):
    """Entry/exit of p = o + s*dirs against an AABB; returns (smin, smax)."""
    smin = np.full(dirs.shape[0], near)
    smax = np.full(dirs.shape[0], far)
    for a in range(3):
        d = dirs[:, a]
        safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
        t0 = (lo[a] - o[a]) / safe
        t1 = (hi[a] - o[a]) / safe
        tlo = np.minimum(t0, t1)
        thi = np.maximum(t0, t1)
        par = np.abs(d) < 1e-12
        inside = (o[a] >= lo[a]) & (o[a] <= hi[a])
        tlo = np.where(par, np.where(inside, near, far + 1.0), tlo)
        thi = np.where(par, np.where(inside, far, near - 1.0), thi)
        smin = np.maximum(smin, tlo)
        smax = np.minimum(smax, thi)
    return smin, smax


def _march(vol: TsdfVolume, o, dirs, smin, smax):
    """Two-speed sphere march; returns (hit, s_lo, s_hi) crossing brackets."""
    n = dirs.shape[0]
    fine = 0.5 * vol.voxel_size
    coarse = 2.0 * vol.voxel_size
    s = smin.copy()
    active = smax > smin + 1e-9
    prev_ok = np.zeros(n, dtype=bool)
    prev_val = np.zeros(n)
    prev_s = np.zeros(n)
    lo = np.zeros(n)
    hi = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    guard = int(np.ceil((float(np.max(smax, initial=0.0)) + fine) / fine)) + 8
    for _ in range(guard):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = o[None, :] + s[idx, None] * dirs[idx]
        val, ok, alloc = vol.sample_nearest(p)
        cross = ok & prev_ok[idx] & (prev_val[idx] > 0) & (val <= 0)
        ci = idx[cross]
        lo[ci] = prev_s[ci]
        hi[ci] = s[ci]
        hit[ci] = True
        active[ci] = False
        rem = idx[~cross]
        prev_ok[rem] = ok[~cross]
        prev_val[rem] = val[~cross]
        prev_s[rem] = s[rem]
        s[rem] += np.where(alloc[~cross], fine, coarse)
        over = rem[s[rem] > smax[rem]]
        active[over] = False
    return hit, lo, hi


def _refine(vol: TsdfVolume, o, dirs, lo, hi, iters: int = 6):
    """Bisection on the crossing bracket, then linear interpolation."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        p = o[None, :] + mid[:, None] * dirs
        val, ok, _ = vol.sample_nearest(p)
        neg = ok & (val <= 0)
        hi = np.where(neg, mid, hi)
        lo = np.where(neg, lo, mid)
    plo = o[None, :] + lo[:, None] * dirs
    phi = o[None, :] + hi[:, None] * dirs
    vlo, ok1 = vol.sample_trilinear(plo)
    vhi, ok2 = vol.sample_trilinear(phi)
    usable = ok1 & ok2 & (vlo > vhi) & (vlo >= 0)
    t = np.where(usable, vlo / np.maximum(vlo - vhi, 1e-12), 0.5)
    return lo + np.clip(t, 0.0, 1.0) * (hi - lo)


def raycast(volumes, background: TsdfVolume | None, T_WC: Pose, K: CameraIntrinsics,
            near: float = 0.1, far: float = 6.0) -> RenderedView:
    """Render depth/vertex/normal/instance maps from every volume.

    volumes: iterable of (instance_id, TsdfVolume, T_WO). The background
    volume (instance 0) lives in the world frame. Nearest crossing wins.
    """
    h, w = K.height, K.width
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_c = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    n = dirs_c.shape[0]

    entries = []
    if background is not None and not background.empty():
        entries.append((0, background, Pose.identity()))
    for inst, vol, T_WM in volumes:
        if not vol.empty():
            entries.append((int(inst), vol, T_WM))

    best_depth = np.full(n, np.inf)
    best_inst = np.full(n, -1, dtype=np.int32)
    vertex = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    normal_ok = np.zeros(n, dtype=bool)

    for inst, vol, T_WM in entries:
        T_MC = T_WM.inverse() * T_WC
        o = T_MC.t
        dirs_m = dirs_c @ T_MC.R.T
        lo_b, hi_b = vol.block_aabb()
        smin, smax = _ray_aabb(o, dirs_m, lo_b, hi_b, near, far)
        hit, lo, hi = _march(vol, o, dirs_m, smin, smax)
        if not np.any(hit):
            continue
        sh = _refine(vol, o, dirs_m[hit], lo[hit], hi[hit])
        p_m = o[None, :] + sh[:, None] * dirs_m[hit]
        grad, gok = vol.sample_gradient(p_m)
        gn = np.linalg.norm(grad, axis=1)
        gok &= gn > 1e-9
        win_idx = np.nonzero(hit)[0]
        closer = sh < best_depth[win_idx]
        if not np.any(closer):
            continue
        win_idx = win_idx[closer]
        best_depth[win_idx] = sh[closer]
        best_inst[win_idx] = inst
        R_WM = T_WM.R
        vertex[win_idx] = p_m[closer] @ R_WM.T + T_WM.t
        nm = np.zeros_like(grad)
        nm[gok] = grad[gok] / gn[gok][:, None]
        normal[win_idx] = (nm @ R_WM.T)[closer]
        normal_ok[win_idx] = gok[closer]

    valid = np.isfinite(best_depth) & (best_inst >= 0)
    depth = np.where(valid, best_depth, 0.0)
    return RenderedView(
        depth=depth.reshape(h, w),
        vertex=vertex.reshape(h, w, 3),
        normal=normal.reshape(h, w, 3),
        instance=best_inst.reshape(h, w),
        valid=valid.reshape(h, w),
        K=K,
        T_WC=T_WC,
        normal_ok=(valid & normal_ok).reshape(h, w),
    )


def save_ply(path, points: np.ndarray, normals: np.ndarray, intensities: np.ndarray) -> None:
    """ASCII PLY point cloud: x y z nx ny nz intensity."""
    n = len(points)
    header = [
        "ply", "format ascii 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property float intensity", "end_header",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(header) + "\n")
        for p, nm, i in zip(points, normals, intensities):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {nm[0]:.6f} {nm[1]:.6f} {nm[2]:.6f} {i:.6f}\n")


def export_volume_ply(path, volume: TsdfVolume, T_WM: Pose | None = None,
                      foreground_gate: bool = False) -> int:
    """Write the volume's zero-crossing cloud in world coordinates; returns count."""
    pts, normals, intens = volume.surface_voxels(foreground_gate=foreground_gate)
    if T_WM is not None:
        pts = pts @ T_WM.R.T + T_WM.t
        normals = normals @ T_WM.R.T
    save_ply(path, pts, normals, intens)
    return len(pts)
