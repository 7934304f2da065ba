"""Sparse texture mapping: interval-downsampled triangles rasterized with source texture.

Pixel (row r, column c) has its centre at image-plane point ``(x=c, y=r)``;
the same convention addresses the source image when sampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from facedyn.mmodel import CoeffVector, MorphableModel, evaluate_shape, project


@dataclass(frozen=True)
class RasterConfig:
    width: int = 128
    height: int = 128
    background: tuple[int, int, int] = (0, 0, 0)
    cull_backfaces: bool = True
    bilinear: bool = True

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("raster width and height must be positive")


@dataclass
class RenderStats:
    n_triangles_total: int = 0
    n_triangles_kept: int = 0  # after interval downsampling
    n_triangles_drawn: int = 0  # after back-face culling
    n_vertices_touched: int = 0  # distinct vertices referenced by kept triangles
    n_vertices_total: int = 0
    elapsed_s: float = 0.0


@dataclass
class SparsePrior:
    pixels: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    interval: int
    stats: RenderStats = field(default_factory=RenderStats)

    @classmethod
    def blank(cls, cfg: RasterConfig, interval: int = 1) -> "SparsePrior":
        pixels = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
        pixels[...] = np.asarray(cfg.background, dtype=np.uint8)
        return cls(pixels, np.zeros((cfg.height, cfg.width), dtype=bool), interval)


def downsample_triangles(model_or_tris, n: int) -> np.ndarray:
    """Keep triangle columns 0, n, 2n, ..., kn with k = (K - 1) // n."""
    tris = model_or_tris.triangles if isinstance(model_or_tris, MorphableModel) else np.asarray(model_or_tris)
    if int(n) != n or n < 1:
        raise ValueError(f"interval must be a positive integer, got {n!r}")
    if tris.shape[1] < 1:
        raise ValueError("mesh has no triangles")
    return tris[:, :: int(n)]


def signed_area(xy: np.ndarray) -> float:
    """Signed area of a 2x3 triangle; positive for front faces in this camera convention."""
    (x0, x1, x2), (y0, y1, y2) = xy
    return 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))


def sample_image(image: np.ndarray, x: np.ndarray, y: np.ndarray, bilinear: bool = True) -> np.ndarray:
    """Sample an HxWx3 uint8 image at float positions, clamping to the border."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    if not bilinear:
        return image[np.floor(y + 0.5).astype(np.intp), np.floor(x + 0.5).astype(np.intp)]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    val = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(val), 0, 255).astype(np.uint8)


def rasterize_triangle(target_xy, target_depth, source_xy, source_image: np.ndarray,
                       zbuffer: np.ndarray, out: SparsePrior, cfg: RasterConfig) -> int:
    """Fill one triangle into ``out`` and ``zbuffer`` in place; return pixels written.

    A pixel is covered when all three barycentric coordinates of its centre
    are >= 0.  It is written only if the interpolated depth is strictly
    greater (nearer) than the z-buffer, so equal-depth ties keep the first write.
    """
    txy = np.asarray(target_xy, dtype=np.float64)
    tz = np.asarray(target_depth, dtype=np.float64)
    sxy = np.asarray(source_xy, dtype=np.float64)
    area2 = 2.0 * signed_area(txy)
    if area2 == 0.0 or not np.isfinite(area2):
        return 0
    h, w = zbuffer.shape
    xmin = max(int(np.ceil(txy[0].min())), 0)
    xmax = min(int(np.floor(txy[0].max())), w - 1)
    ymin = max(int(np.ceil(txy[1].min())), 0)
    ymax = min(int(np.floor(txy[1].max())), h - 1)
    if xmin > xmax or ymin > ymax:
        return 0

    py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1]
    px = px.ravel().astype(np.float64)
    py = py.ravel().astype(np.float64)
    (x0, x1, x2), (y0, y1, y2) = txy
    w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area2
    w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area2
    w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) / area2
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return 0
    w0, w1, w2 = w0[inside], w1[inside], w2[inside]
    cols = px[inside].astype(np.intp)
    rows = py[inside].astype(np.intp)

    depth = w0 * tz[0] + w1 * tz[1] + w2 * tz[2]
    nearer = depth > zbuffer[rows, cols]
    if not nearer.any():
        return 0
    rows, cols, depth = rows[nearer], cols[nearer], depth[nearer]
    w0, w1, w2 = w0[nearer], w1[nearer], w2[nearer]

    sx = w0 * sxy[0, 0] + w1 * sxy[0, 1] + w2 * sxy[0, 2]
    sy = w0 * sxy[1, 0] + w1 * sxy[1, 1] + w2 * sxy[1, 2]
    out.pixels[rows, cols] = sample_image(source_image, sx, sy, cfg.bilinear)
    out.mask[rows, cols] = True
    zbuffer[rows, cols] = depth
    return int(rows.size)


def as_rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[2] not in (3, 4) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an HxW or HxWx3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return np.ascontiguousarray(img[..., :3])


def render_sparse_prior(model: MorphableModel, source_image, source_c: CoeffVector,
                        target_c: CoeffVector, n: int = 1, cfg: RasterConfig | None = None) -> SparsePrior:
    """Warp source texture onto the target-pose geometry through every n-th triangle."""
    cfg = cfg or RasterConfig()
    image = as_rgb(source_image)
    start = time.perf_counter()

    src_xy = project(evaluate_shape(model, source_c), source_c).xy
    tgt = project(evaluate_shape(model, target_c), target_c)
    tris = downsample_triangles(model, n)

    prior = SparsePrior.blank(cfg, interval=int(n))
    zbuffer = np.full((cfg.height, cfg.width), -np.inf)
    drawn = 0
    for a, b, c in tris.T:
        txy = tgt.xy[:, [a, b, c]]
        if cfg.cull_backfaces and signed_area(txy) <= 0:
            continue
        drawn += 1
        rasterize_triangle(txy, tgt.depth[[a, b, c]], src_xy[:, [a, b, c]], image, zbuffer, prior, cfg)

    prior.stats = RenderStats(
        n_triangles_total=model.n_triangles,
        n_triangles_kept=tris.shape[1],
        n_triangles_drawn=drawn,
        n_vertices_touched=int(np.unique(tris).size),
        n_vertices_total=int(np.unique(model.triangles).size),
        elapsed_s=time.perf_counter() - start,
    )
    return prior


def save_prior(prior: SparsePrior, pixels_path, mask_path) -> None:
    Image.fromarray(prior.pixels).save(pixels_path)
    Image.fromarray(prior.mask.astype(np.uint8) * 255).save(mask_path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(as_rgb(image)).save(path)
