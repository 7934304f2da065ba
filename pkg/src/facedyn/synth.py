"""Synthetic morphable models, coefficient trajectories and textures.

Nothing here depends on third-party face assets; every generator is a pure
function of its seed.
"""

from __future__ import annotations

import numpy as np

from facedyn.mmodel import (
    N_EXPR,
    N_LANDMARKS,
    N_SHAPE,
    CoeffVector,
    MorphableModel,
    make_pose,
    rotation_matrix,
)


def grid_triangles(gx: int, gy: int) -> np.ndarray:
    """Two triangles per grid cell, wound so that +z faces have positive image-plane area."""
    col, row = np.meshgrid(np.arange(gx - 1), np.arange(gy - 1))
    i00 = (row * gx + col).ravel()
    i10, i01, i11 = i00 + 1, i00 + gx, i00 + gx + 1
    tris = np.empty((3, 2 * i00.size), dtype=np.int64)
    tris[:, 0::2] = np.stack([i00, i10, i11])
    tris[:, 1::2] = np.stack([i00, i11, i01])
    return tris


def face_model(seed: int = 0, grid: tuple[int, int] = (24, 24), half_width: float = 40.0,
               half_height: float = 48.0) -> MorphableModel:
    """A dome-shaped grid mesh with smooth shape modes and localized expression modes."""
    rng = np.random.default_rng(seed)
    gx, gy = grid
    u, v = np.meshgrid(np.linspace(-1, 1, gx), np.linspace(-1, 1, gy))
    u, v = u.ravel(), v.ravel()
    z = 30.0 * (1.0 - 0.35 * (u ** 2 + v ** 2)) + 8.0 * np.exp(-(u ** 2 + (v + 0.1) ** 2) / 0.05)
    mean = np.stack([half_width * u, half_height * v, z], axis=1)

    shape_basis = np.empty((mean.size, N_SHAPE))
    freqs = [(p, q) for p in range(4) for q in range(4) if (p, q) != (0, 0)]
    for j in range(N_SHAPE):
        p, q = freqs[rng.integers(len(freqs))]
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
        field = np.cos(p * np.pi * (u + 1) / 2 + ph1) * np.cos(q * np.pi * (v + 1) / 2 + ph2)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = 3.0 / np.sqrt(1.0 + j / 4.0)
        shape_basis[:, j] = (amp * field[:, None] * direction[None, :]).ravel()

    expr_basis = np.empty((mean.size, N_EXPR))
    for j in range(N_EXPR):
        cu, cv = rng.uniform(-0.6, 0.6, 2)
        width = rng.uniform(0.15, 0.35)
        blob = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * width ** 2))
        direction = np.array([rng.normal(0, 0.3), rng.normal(0, 1.0), rng.normal(0, 1.0)])
        direction /= np.linalg.norm(direction)
        expr_basis[:, j] = (2.5 * blob[:, None] * direction[None, :]).ravel()

    interior = np.flatnonzero((np.abs(u) < 0.95) & (np.abs(v) < 0.95))
    landmarks = np.sort(rng.choice(interior, size=N_LANDMARKS, replace=False))
    return MorphableModel(mean.ravel(), shape_basis, expr_basis, grid_triangles(gx, gy), landmarks)


def random_model(rng: np.random.Generator, n_vertices: int, n_triangles: int) -> MorphableModel:
    """Unstructured Gaussian model; landmark ids repeat only when n_vertices < 68."""
    n3 = 3 * n_vertices
    tris = np.stack([rng.choice(n_vertices, size=3, replace=False) for _ in range(n_triangles)], axis=1)
    if n_vertices >= N_LANDMARKS:
        lms = rng.choice(n_vertices, size=N_LANDMARKS, replace=False)
    else:
        lms = rng.integers(0, n_vertices, size=N_LANDMARKS)
    return MorphableModel(
        rng.normal(size=n3) * 10.0,
        rng.normal(size=(n3, N_SHAPE)),
        rng.normal(size=(n3, N_EXPR)),
        tris,
        lms,
    )


def random_coeffs(rng: np.random.Generator, center=(64.0, 64.0), max_yaw: float = 0.5,
                  alpha_scale: float = 1.0) -> CoeffVector:
    rot = rotation_matrix(rng.uniform(-max_yaw, max_yaw), rng.uniform(-0.35, 0.35), rng.uniform(-0.25, 0.25))
    t = [center[0] + rng.uniform(-5, 5), center[1] + rng.uniform(-5, 5), 0.0]
    pose = make_pose(rng.uniform(0.8, 1.2), rot, t)
    return CoeffVector(pose, alpha_scale * rng.normal(size=N_SHAPE), alpha_scale * rng.normal(size=N_EXPR))


def sinusoid_trajectories(n_seq: int, length: int, seed: int = 0, family_seed: int = 1234,
                          center=(64.0, 64.0)) -> list[list[CoeffVector]]:
    """Sinusoidal coefficient trajectories sharing one per-entry style.

    ``family_seed`` fixes per-entry centres, amplitudes and phase offsets;
    ``seed`` draws each trajectory's phase, frequency and gain.  Pose stays a
    scaled rotation driven by sinusoidal yaw/pitch/roll.
    """
    style = np.random.default_rng(family_seed)
    n_alpha = N_SHAPE + N_EXPR
    a_center = style.normal(0.0, 0.5, n_alpha)
    a_amp = style.uniform(0.3, 1.0, n_alpha)
    a_theta = style.uniform(0, 2 * np.pi, n_alpha)
    p_theta = style.uniform(0, 2 * np.pi, 6)
    p_amp = np.array([0.35, 0.2, 0.1, 0.05, 4.0, 3.0])  # yaw, pitch, roll, scale, tx, ty

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seq):
        phi = rng.uniform(0, 2 * np.pi)
        omega = rng.uniform(0.15, 0.35)
        gain = rng.uniform(0.7, 1.0)
        seq = []
        for t in range(length):
            ang = omega * t + phi
            p = gain * p_amp * np.sin(ang + p_theta)
            pose = make_pose(1.0 + p[3], rotation_matrix(p[0], p[1], p[2]),
                             [center[0] + p[4], center[1] + p[5], 0.0])
            alpha = a_center + gain * a_amp * np.sin(ang + a_theta)
            seq.append(CoeffVector(pose, alpha[:N_SHAPE], alpha[N_SHAPE:]))
        out.append(seq)
    return out


def texture_image(seed: int = 0, size: tuple[int, int] = (128, 128)) -> np.ndarray:
    """HxWx3 uint8 texture with gradients, stripes and per-pixel noise."""
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    for ch in range(3):
        fx, fy = rng.uniform(0.05, 0.4, 2)
        img[..., ch] = (
            110 + 60 * np.sin(fx * xx + rng.uniform(0, 6.3)) * np.cos(fy * yy)
            + 40 * (xx / w - yy / h) * (1 if ch % 2 else -1)
        )
    img += rng.normal(0, 12, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def tagged_image(size: tuple[int, int] = (128, 128)) -> np.ndarray:
    """Each pixel stores its own column in R and row in G (needs size <= 256)."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([xx, yy, np.zeros_like(xx)], axis=-1).astype(np.uint8)
