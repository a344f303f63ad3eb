"""Point clouds, cameras and depth projection.

Conventions
-----------
* Clouds are ``(N, 3)`` float arrays; batched helpers take ``(B, N, 3)``.
* A camera looks from ``position`` at ``target``. Camera-frame axes are
  right / up / forward; image columns grow with "right", image rows grow
  *against* "up". Pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``
  in continuous image coordinates, so its center is ``(col + .5, row + .5)``.
* Depth maps hold ``(far - z) / (far - near)`` for the nearest point hitting
  a pixel and 0 for background; ``z`` is the camera-frame forward distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import Tensor, make_node, reshape

CAMERA_DISTANCE = 1.4
MAX_ELEVATION_DEG = 75.0
# The near face of the canonical cube seen from 1.4 units sits 0.4 units away,
# so its half-extent projects to tan = 1 / 0.4; fill 90% of the half-frame.
_NEAR_FACE_TAN = 1.0 / (CAMERA_DISTANCE - 1.0)
FRAME_FILL = 0.9


def default_focal(height: int, width: int) -> float:
    return FRAME_FILL * (min(height, width) / 2.0) / _NEAR_FACE_TAN


@dataclass(frozen=True)
class ViewSpec:
    position: tuple
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    focal: float = field(default=None)
    height: int = 64
    width: int = 64
    near: float = 0.1
    far: float = 3.2

    def __post_init__(self):
        if self.focal is None:
            object.__setattr__(self, "focal", default_focal(self.height, self.width))
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be below far ({self.far})")
        fwd = np.subtract(self.target, self.position)
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera position coincides with its target")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise ValueError("up vector is parallel to the viewing direction")

    @classmethod
    def looking_from(cls, direction, distance: float = CAMERA_DISTANCE, height: int = 64, width: int = 64,
                     **kw) -> "ViewSpec":
        """Camera at ``distance`` along ``direction`` looking at the origin.

        The up vector is +z unless the view is (nearly) vertical, then +y.
        """
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        up = (0.0, 1.0, 0.0) if abs(d[2]) > 0.999 else (0.0, 0.0, 1.0)
        pos = tuple(float(c) for c in d * distance)
        return cls(position=pos, up=kw.pop("up", up), height=height, width=width, **kw)

    def basis(self) -> np.ndarray:
        """Rows are the camera right, up and forward unit vectors (world frame)."""
        f = np.subtract(self.target, self.position).astype(float)
        f /= np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return np.stack([r, u, f])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.position, dtype=float)) @ self.basis().T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous image coordinates ``(u, v)`` and forward depth ``z``."""
        q = self.to_camera(points)
        z = q[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.width / 2.0 + self.focal * q[..., 0] / z
            v = self.height / 2.0 - self.focal * q[..., 1] / z
        return u, v, z

    def depth_value(self, z):
        return (self.far - z) / (self.far - self.near)

    def pixels(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer ``(row, col)`` per point and a mask of points inside the frustum."""
        u, v, z = self.project(points)
        inside = (z > self.near) & (z < self.far) & np.isfinite(u) & np.isfinite(v)
        inside &= (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        col = np.where(inside, np.floor(np.where(inside, u, 0)), -1).astype(np.int64)
        row = np.where(inside, np.floor(np.where(inside, v, 0)), -1).astype(np.int64)
        return row, col, inside


# ---------------------------------------------------------------- clouds


def normalize_to_cube(raw) -> np.ndarray:
    """Center on the centroid and scale uniformly so that max |coord| = 1."""
    pts = np.asarray(raw, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected an (N, 3) cloud with N >= 1, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud has non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    extent = np.abs(centered).max()
    if extent == 0:
        raise ValueError("degenerate cloud: all points coincide")
    return centered / extent


def lexicographic_min(points: np.ndarray) -> int:
    """Index of the lexicographically smallest (x, y, z) point; ties keep the lower index."""
    pts = np.asarray(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def farthest_point_sample(points, m: int, seed: int | None = None, start: int | None = None) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices.

    The first index is ``start`` if given, a seed-drawn index if ``seed`` is
    given, and otherwise the lexicographic minimum (which makes the sampling
    independent of input order). Distance ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= m <= N, got m={m}, N={n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n)) if seed is not None else lexicographic_min(pts)
    return farthest_point_sample_batch(pts[None], m, np.array([start]))[0]


def farthest_point_sample_batch(points: np.ndarray, m: int, starts: np.ndarray | None = None) -> np.ndarray:
    """Batched FPS over ``(B, N, 3)``; default starts are the lexicographic minima."""
    B, n, _ = points.shape
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= m <= N, got m={m}, N={n}")
    if starts is None:
        starts = np.array([lexicographic_min(p) for p in points])
    out = np.empty((B, m), dtype=np.int64)
    out[:, 0] = starts
    rows = np.arange(B)
    diff = points - points[rows, starts][:, None, :]
    mind = (diff * diff).sum(axis=-1)
    mind[rows, starts] = -1.0  # never re-pick, even among duplicate points
    for j in range(1, m):
        nxt = np.argmax(mind, axis=1)
        out[:, j] = nxt
        diff = points - points[rows, nxt][:, None, :]
        mind = np.minimum(mind, (diff * diff).sum(axis=-1))
        mind[rows, nxt] = -1.0
    return out


def knn(queries, reference, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest reference points per query, nearest first.

    Works on ``(M, 3)``/``(N, 3)`` or batched ``(B, M, 3)``/``(B, N, 3)``.
    Equal distances are ordered by index.
    """
    q = np.asarray(queries, dtype=float)
    r = np.asarray(reference, dtype=float)
    n = r.shape[-2]
    if k > n:
        raise ValueError(f"knn: k={k} exceeds the {n} reference points")
    diff = q[..., :, None, :] - r[..., None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple = (0.8, 1.25)
    rotate: bool = True
    translate: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale=(1.0, 1.0), rotate=False, translate=0.0, jitter_sigma=0.0, jitter_clip=0.0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud, seed, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Scale, rotate, translate, jitter (in that order), then clip to the cube."""
    pts = np.asarray(cloud, dtype=float)
    rng = np.random.default_rng(seed)
    lo, hi = config.scale
    out = pts * rng.uniform(lo, hi, size=3)
    if config.rotate:
        out = out @ random_rotation(rng).T
    if config.translate:
        out = out + rng.uniform(-config.translate, config.translate, size=3)
    if config.jitter_sigma:
        out = out + np.clip(rng.normal(0.0, config.jitter_sigma, size=out.shape), -config.jitter_clip,
                            config.jitter_clip)
    return np.clip(out, -1.0, 1.0)


def sample_view(seed, height: int = 64, width: int = 64, distance: float = CAMERA_DISTANCE) -> ViewSpec:
    """Camera uniform on the sphere band |elevation| <= 75 degrees, looking at the origin."""
    rng = np.random.default_rng(seed)
    az = rng.uniform(0.0, 2 * math.pi)
    s = math.sin(math.radians(MAX_ELEVATION_DEG))
    sin_el = rng.uniform(-s, s)
    cos_el = math.sqrt(1.0 - sin_el * sin_el)
    pos = (distance * cos_el * math.cos(az), distance * cos_el * math.sin(az), distance * sin_el)
    return ViewSpec(position=pos, height=height, width=width)


def view_from_angles(azimuth_deg: float, elevation_deg: float, height: int = 64, width: int = 64) -> ViewSpec:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return ViewSpec.looking_from((math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)),
                                 height=height, width=width)


# ---------------------------------------------------------------- hard projection


def project_depth(cloud, view: ViewSpec) -> np.ndarray:
    """Z-buffered pinhole depth map; frustum-external points are dropped."""
    pts = np.asarray(cloud, dtype=float)
    row, col, inside = view.pixels(pts)
    out = np.zeros((view.height, view.width))
    if not inside.any():
        return out
    idx = np.nonzero(inside)[0]
    _, _, z = view.project(pts[idx])
    depth = view.depth_value(z)
    pix = row[idx] * view.width + col[idx]
    # per pixel: largest depth value (nearest point) first, then lowest index
    order = np.lexsort((idx, -depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    out.reshape(-1)[pix_sorted[first]] = depth[order][first]
    return out


def pixel_hits(cloud, view: ViewSpec) -> np.ndarray:
    """Number of frustum-internal points landing in each pixel."""
    row, col, inside = view.pixels(np.asarray(cloud, dtype=float))
    counts = np.zeros(view.height * view.width, dtype=np.int64)
    np.add.at(counts, row[inside] * view.width + col[inside], 1)
    return counts.reshape(view.height, view.width)


# ---------------------------------------------------------------- soft projection

SOFT_SUPPORT = 4.0
WEIGHT_FLOOR = 1e-8
TAPER_POWER = 4


def soft_project(cloud, view: ViewSpec, sigma: float = 1.0, hardness: float = 50.0) -> Tensor:
    """Differentiable counterpart of :func:`project_depth` for one cloud."""
    pts = cloud if isinstance(cloud, Tensor) else Tensor(cloud)
    item = np.zeros(pts.shape[0], dtype=np.int64)
    out = soft_project_batch(pts, item, [view], sigma, hardness)
    return reshape(out, (view.height, view.width))


def soft_project_batch(points: Tensor, item: np.ndarray, views: Sequence[ViewSpec], sigma: float = 1.0,
                       hardness: float = 50.0, floor: float = WEIGHT_FLOOR) -> Tensor:
    """Splat a flat ``(P, 3)`` point tensor into ``(len(views), H, W)`` soft depth maps.

    Point ``i`` belongs to map ``item[i]`` and is seen through ``views[item[i]]``.
    For each pixel with center ``c`` and box ``[c - .5, c + .5]^2``, with
    ``t`` the distance from the projected point to the box and ``R = 4 sigma``:

    * coverage weight ``g = exp(-t^2 / 2 sigma^2) (1 - t^2/R^2)^4`` for t < R (a C3 taper),
    * coverage ``a = 1 - prod(1 - g)``,
    * color = softmax over points of ``log g + hardness * depth``
      applied to the depths,
    * value = color * (a - floor) / (1 - floor) where ``a > floor``, else 0.

    A point inside a pixel gives it coverage 1, so as sigma shrinks and
    hardness grows each pixel tends to the depth of its nearest point.
    """
    views = list(views)
    H, W = views[0].height, views[0].width
    if any(v.height != H or v.width != W for v in views):
        raise ValueError("soft_project_batch: all views must share the image size")
    P = points.shape[0]
    pd = points.data
    item = np.asarray(item, dtype=np.int64)

    basis = np.stack([v.basis() for v in views])            # (V, 3, 3)
    origin = np.array([v.position for v in views], dtype=float)
    focal = np.array([v.focal for v in views])
    near = np.array([v.near for v in views])
    far = np.array([v.far for v in views])

    Rm = basis[item]                                          # (P, 3, 3)
    q = np.einsum("pij,pj->pi", Rm, pd - origin[item])
    qz = q[:, 2]
    ok = (qz > near[item]) & (qz < far[item])
    qz_safe = np.where(ok, qz, 1.0)
    F = focal[item]
    u = W / 2.0 + F * q[:, 0] / qz_safe
    v = H / 2.0 - F * q[:, 1] / qz_safe
    span = far[item] - near[item]
    depth = (far[item] - qz) / span

    R = SOFT_SUPPORT * sigma
    K = int(math.ceil(R))
    offs = np.arange(-K, K + 1)
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    dr, dc = dr.ravel(), dc.ravel()

    pidx = np.nonzero(ok)[0]
    base_c = np.floor(u[pidx]).astype(np.int64)
    base_r = np.floor(v[pidx]).astype(np.int64)
    pair_p = np.repeat(pidx, len(dr))
    cols = (base_c[:, None] + dc[None, :]).ravel()
    rows = (base_r[:, None] + dr[None, :]).ravel()
    inframe = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    pair_p, cols, rows = pair_p[inframe], cols[inframe], rows[inframe]

    ex = u[pair_p] - (cols + 0.5)
    ey = v[pair_p] - (rows + 0.5)
    tx = np.maximum(np.abs(ex) - 0.5, 0.0)
    ty = np.maximum(np.abs(ey) - 0.5, 0.0)
    s = tx * tx + ty * ty
    keep = s < R * R
    pair_p, cols, rows, ex, ey, tx, ty, s = (a[keep] for a in (pair_p, cols, rows, ex, ey, tx, ty, s))

    npix = len(views) * H * W
    pix = item[pair_p] * (H * W) + rows * W + cols
    cut = 1.0 - s / (R * R)
    inv2s = 1.0 / (2.0 * sigma * sigma)
    g = np.exp(-s * inv2s) * cut**TAPER_POWER
    with np.errstate(divide="ignore"):
        log_q = np.bincount(pix, weights=np.log1p(-g), minlength=npix)
    Q = np.exp(log_q)
    alpha = 1.0 - Q

    logit = -s * inv2s + TAPER_POWER * np.log(cut) + hardness * depth[pair_p]
    mx = np.full(npix, -np.inf)
    np.maximum.at(mx, pix, logit)
    e = np.exp(logit - mx[pix])
    S = np.bincount(pix, weights=e, minlength=npix)
    wsum = np.bincount(pix, weights=e * depth[pair_p], minlength=npix)
    lit = alpha > floor
    color = np.where(S > 0, wsum / np.where(S > 0, S, 1.0), 0.0)
    cov = np.where(lit, (alpha - floor) / (1.0 - floor), 0.0)
    value = color * cov

    def bw(gout):
        G = gout.reshape(-1)
        Gc = G * cov                                   # d/d color
        Ga = np.where(lit, G * color / (1.0 - floor), 0.0)  # d/d alpha
        w = e / S[pix]
        dp = depth[pair_p]
        dlogit = Gc[pix] * w * (dp - color[pix])
        ddepth_pair = Gc[pix] * w + hardness * dlogit
        # d alpha / d g_i = prod_{j != i} (1 - g_j)
        one_minus = 1.0 - g
        with np.errstate(divide="ignore", invalid="ignore"):
            dalpha_dg = np.where(one_minus > 0, Q[pix] / one_minus, 0.0)
        dlogit_ds = -inv2s - TAPER_POWER / (R * R * cut)
        dg_ds = g * dlogit_ds
        dL_ds = Ga[pix] * dalpha_dg * dg_ds + dlogit * dlogit_ds
        # s = tx^2 + ty^2 ; tx = max(|ex| - .5, 0)
        du = dL_ds * 2.0 * tx * np.sign(ex)
        dv = dL_ds * 2.0 * ty * np.sign(ey)
        gu = np.bincount(pair_p, weights=du, minlength=P)
        gv = np.bincount(pair_p, weights=dv, minlength=P)
        gd = np.bincount(pair_p, weights=ddepth_pair, minlength=P)
        gq = np.zeros((P, 3))
        gq[:, 0] = gu * F / qz_safe
        gq[:, 1] = -gv * F / qz_safe
        gq[:, 2] = (-gu * F * q[:, 0] + gv * F * q[:, 1]) / (qz_safe * qz_safe) - gd / span
        gq[~ok] = 0.0
        return (np.einsum("pij,pi->pj", Rm, gq),)

    return make_node(value.reshape(len(views), H, W), (points,), bw, "soft_project")


# ---------------------------------------------------------------- file formats


def read_xyz(path) -> np.ndarray:
    pts = np.loadtxt(path, ndmin=2, usecols=(0, 1, 2))
    if pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"{path}: expected lines of 'x y z'")
    return pts


def write_xyz(path, points) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(points, dtype=float), fmt="%.9g")


def read_off(path) -> np.ndarray:
    """Vertices of an ASCII OFF file (faces are ignored)."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise ValueError(f"{path}: missing OFF header")
    head = tokens[0][3:].split()
    counts = head if head else tokens.pop(1).split()
    nv = int(counts[0])
    body = tokens[1 : 1 + nv]
    pts = np.array([[float(c) for c in line.split()[:3]] for line in body])
    if pts.shape != (nv, 3):
        raise ValueError(f"{path}: expected {nv} vertices")
    return pts


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".off":
        return read_off(path)
    return read_xyz(path)


def write_pgm(path, depth: np.ndarray) -> None:
    """Plain (P2) PGM with values in [0, 1] scaled to 0..65535."""
    d = np.clip(np.asarray(depth, dtype=float), 0.0, 1.0)
    vals = np.rint(d * 65535).astype(np.int64)
    H, W = vals.shape
    lines = ["P2", f"{W} {H}", "65535"] + [" ".join(map(str, row)) for row in vals]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4 : 4 + W * H], dtype=float).reshape(H, W)
    return vals / maxval


def with_size(view: ViewSpec, height: int, width: int) -> ViewSpec:
    return replace(view, height=height, width=width, focal=default_focal(height, width))
