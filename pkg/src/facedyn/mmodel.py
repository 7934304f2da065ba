"""3D Morphable Model: container I/O, shape evaluation, projection, landmark fitting.

Vertex layout: a flat length-3N vector is interleaved per vertex
``[x0, y0, z0, x1, y1, z1, ...]`` and reshapes to ``(N, 3)`` then
transposes to the 3xN vertex matrix.  All indices are 0-based.

Camera convention: the pose block maps homogeneous model points to camera
space; rows 1-2 are image-plane pixels (x right, y down) and row 3 is depth,
with larger depth nearer the viewer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_POSE = 12
N_SHAPE = 40
N_EXPR = 10
N_PARAMS = N_POSE + N_SHAPE + N_EXPR
N_LANDMARKS = 68

FMM_MAGIC = b"FMM"
FMM_VERSION = b"1"


class ModelFormatError(ValueError):
    """Model container has the wrong magic bytes or is truncated."""


class ModelVersionError(ModelFormatError):
    """Model container magic matches but the version does not."""


class ModelDimensionError(ValueError):
    """Model arrays are inconsistent with each other."""


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations of a fitting step are (numerically) singular."""


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray  # (3N,)
    shape_basis: np.ndarray  # (3N, 40)
    expr_basis: np.ndarray  # (3N, 10)
    triangles: np.ndarray  # (3, K) int
    landmark_indices: np.ndarray  # (68,) int

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        tris = np.asarray(self.triangles, dtype=np.int64)
        lms = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        for name, arr in (("mean_shape", mean), ("shape_basis", shape_basis),
                          ("expr_basis", expr_basis), ("triangles", tris),
                          ("landmark_indices", lms)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _validate_model(self)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[1]


def _validate_model(m: MorphableModel) -> None:
    n3 = m.mean_shape.shape[0]
    if n3 == 0 or n3 % 3:
        raise ModelDimensionError(f"mean_shape length {n3} is not a positive multiple of 3")
    n = n3 // 3
    if m.shape_basis.shape != (n3, N_SHAPE):
        raise ModelDimensionError(f"shape_basis must be {(n3, N_SHAPE)}, got {m.shape_basis.shape}")
    if m.expr_basis.shape != (n3, N_EXPR):
        raise ModelDimensionError(f"expr_basis must be {(n3, N_EXPR)}, got {m.expr_basis.shape}")
    if m.triangles.ndim != 2 or m.triangles.shape[0] != 3:
        raise ModelDimensionError(f"triangles must be 3xK, got {m.triangles.shape}")
    if m.triangles.size and (m.triangles.min() < 0 or m.triangles.max() >= n):
        raise ModelDimensionError(f"triangle index outside [0, {n})")
    if m.landmark_indices.shape != (N_LANDMARKS,):
        raise ModelDimensionError(f"expected {N_LANDMARKS} landmark indices, got {m.landmark_indices.shape}")
    if m.landmark_indices.min() < 0 or m.landmark_indices.max() >= n:
        raise ModelDimensionError(f"landmark index outside [0, {n})")
    # toy models with fewer vertices than landmarks cannot have distinct ids
    if n >= N_LANDMARKS and np.unique(m.landmark_indices).size != N_LANDMARKS:
        raise ModelDimensionError("landmark indices are not distinct")
    for name in ("mean_shape", "shape_basis", "expr_basis"):
        if not np.all(np.isfinite(getattr(m, name))):
            raise ModelDimensionError(f"{name} has non-finite entries")


@dataclass(frozen=True)
class CoeffVector:
    """62 coefficients: scaled rotation + translation (3x4), shape (40), expression (10)."""

    pose: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    alpha_s: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))
    alpha_exp: np.ndarray = field(default_factory=lambda: np.zeros(N_EXPR))

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64).reshape(3, 4)
        a_s = np.array(self.alpha_s, dtype=np.float64).reshape(N_SHAPE)
        a_e = np.array(self.alpha_exp, dtype=np.float64).reshape(N_EXPR)
        for name, arr in (("pose", pose), ("alpha_s", a_s), ("alpha_exp", a_e)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pose.reshape(-1), self.alpha_s, self.alpha_exp])

    @classmethod
    def from_array(cls, arr) -> "CoeffVector":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        if arr.shape[0] != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} coefficients, got {arr.shape[0]}")
        return cls(arr[:N_POSE].reshape(3, 4), arr[N_POSE:N_POSE + N_SHAPE], arr[N_POSE + N_SHAPE:])

    def to_json(self) -> dict:
        return {
            "pose": self.pose.reshape(-1).tolist(),
            "alpha_s": self.alpha_s.tolist(),
            "alpha_exp": self.alpha_exp.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoeffVector":
        for key, n in (("pose", N_POSE), ("alpha_s", N_SHAPE), ("alpha_exp", N_EXPR)):
            if key not in obj:
                raise ValueError(f"missing key {key!r}")
            if len(obj[key]) != n:
                raise ValueError(f"{key!r} must have {n} numbers, got {len(obj[key])}")
        return cls(np.reshape(obj["pose"], (3, 4)), obj["alpha_s"], obj["alpha_exp"])

    def __eq__(self, other):
        if not isinstance(other, CoeffVector):
            return NotImplemented
        return bool(np.array_equal(self.to_array(), other.to_array()))

    __hash__ = None


@dataclass(frozen=True)
class Shape3D:
    vertices: np.ndarray  # (3, N)


@dataclass(frozen=True)
class ProjectedVerts:
    xy: np.ndarray  # (2, N)
    depth: np.ndarray  # (N,)


# ---------------------------------------------------------------- container I/O

def save_model(model: MorphableModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_to_bytes(model: MorphableModel) -> bytes:
    n, k = model.n_vertices, model.n_triangles
    parts = [
        FMM_MAGIC + FMM_VERSION,
        struct.pack("<II", n, k),
        model.mean_shape.astype("<f4").tobytes(),
        model.shape_basis.astype("<f4").tobytes(order="C"),
        model.expr_basis.astype("<f4").tobytes(order="C"),
        model.triangles.T.astype("<u4").tobytes(order="C"),
        model.landmark_indices.astype("<u4").tobytes(),
    ]
    return b"".join(parts)


def load_model(path) -> MorphableModel:
    """Read a ``.fmm`` container.

    Raises FileNotFoundError, ModelFormatError / ModelVersionError for a bad
    header or truncated payload, and ModelDimensionError when the arrays
    violate the model invariants.
    """
    data = Path(path).read_bytes()
    return model_from_bytes(data)


def model_from_bytes(data: bytes) -> MorphableModel:
    if len(data) < 12:
        raise ModelFormatError("file too short for header")
    if data[:3] != FMM_MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}")
    if data[3:4] != FMM_VERSION:
        raise ModelVersionError(f"unsupported version {data[3:4]!r}")
    n, k = struct.unpack_from("<II", data, 4)
    n3 = 3 * n
    sizes = [4 * n3, 4 * n3 * N_SHAPE, 4 * n3 * N_EXPR, 4 * 3 * k, 4 * N_LANDMARKS]
    expected = 12 + sum(sizes)
    if len(data) != expected:
        raise ModelFormatError(f"payload is {len(data)} bytes, header implies {expected}")
    off = 12
    arrays = []
    for size, dt in zip(sizes, ["<f4", "<f4", "<f4", "<u4", "<u4"]):
        arrays.append(np.frombuffer(data, dtype=dt, count=size // 4, offset=off))
        off += size
    mean, sb, eb, tris, lms = arrays
    return MorphableModel(
        mean_shape=mean.astype(np.float64),
        shape_basis=sb.reshape(n3, N_SHAPE).astype(np.float64),
        expr_basis=eb.reshape(n3, N_EXPR).astype(np.float64),
        triangles=tris.reshape(k, 3).T.astype(np.int64),
        landmark_indices=lms.astype(np.int64),
    )


def read_coeff_sequence(path) -> list[CoeffVector]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(CoeffVector.from_json(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_coeff_sequence(path, coeffs: Iterable[CoeffVector]) -> None:
    # json uses repr for floats, which round-trips doubles exactly
    with open(path, "w") as fh:
        for c in coeffs:
            fh.write(json.dumps(c.to_json()) + "\n")


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    """Write a 3xN vertex matrix and 3xK triangles as Wavefront OBJ (1-based faces)."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).T.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles).T.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- evaluation

def evaluate_shape(model: MorphableModel, c: CoeffVector) -> Shape3D:
    flat = model.mean_shape + model.shape_basis @ c.alpha_s + model.expr_basis @ c.alpha_exp
    return Shape3D(flat.reshape(-1, 3).T)


def camera_points(shape: Shape3D, c: CoeffVector) -> np.ndarray:
    """3xN camera-space points ``pose @ [S; 1]``."""
    return c.pose[:, :3] @ shape.vertices + c.pose[:, 3:4]


def project(shape: Shape3D, c: CoeffVector) -> ProjectedVerts:
    cam = camera_points(shape, c)
    return ProjectedVerts(xy=cam[:2], depth=cam[2])


def landmarks_from_coeffs(model: MorphableModel, c: CoeffVector) -> np.ndarray:
    flat = _landmark_flat(model, c.alpha_s, c.alpha_exp)
    pts = flat.reshape(-1, 3).T
    return c.pose[:2, :3] @ pts + c.pose[:2, 3:4]


def _landmark_rows(model: MorphableModel) -> np.ndarray:
    idx = model.landmark_indices
    return (3 * idx[:, None] + np.arange(3)[None, :]).reshape(-1)


def _landmark_flat(model, alpha_s, alpha_exp):
    rows = _landmark_rows(model)
    return model.mean_shape[rows] + model.shape_basis[rows] @ alpha_s + model.expr_basis[rows] @ alpha_exp


def recombine(base: CoeffVector, donor: CoeffVector, take_pose: bool = False,
              take_shape: bool = False, take_expr: bool = False) -> CoeffVector:
    """Replace the flagged blocks of ``base`` with the donor's."""
    return CoeffVector(
        pose=donor.pose if take_pose else base.pose,
        alpha_s=donor.alpha_s if take_shape else base.alpha_s,
        alpha_exp=donor.alpha_exp if take_expr else base.alpha_exp,
    )


# ---------------------------------------------------------------- fitting

@dataclass
class FitResult:
    coeffs: CoeffVector
    objective: list[float]  # after init, then after every accepted iteration
    converged: bool
    n_iter: int


def similarity_align(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares 2D similarity ``dst ~ s R src + t`` for 2xM point sets (Umeyama)."""
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    a, b = src - mu_s, dst - mu_d
    cov = b @ a.T / src.shape[1]
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1
    rot = u @ np.diag(d) @ vt
    var_s = (a ** 2).sum() / src.shape[1]
    if var_s == 0:
        raise SingularSystemError("source landmarks are all coincident")
    scale = float((sig * d).sum() / var_s)
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t.reshape(2)


def _fit_objective(lm, observed, alpha, reg):
    return float(((lm - observed) ** 2).sum() + reg * (alpha ** 2).sum())


def _complete_pose(rows12: np.ndarray) -> np.ndarray:
    """Fill the depth row of a pose from its two image rows (scaled normal, zero depth offset)."""
    a, b = rows12[0, :3], rows12[1, :3]
    normal = np.cross(a, b)
    scale = np.sqrt(np.linalg.norm(a) * np.linalg.norm(b))
    row3 = np.zeros(4)
    if scale > 0:
        row3[:3] = normal / scale
    return np.vstack([rows12, row3])


def fit_landmarks(model: MorphableModel, observed, reg: float = 1e-3, max_iter: int = 200,
                  rtol: float = 1e-12, extrapolate: bool = True) -> FitResult:
    """Fit pose, shape and expression to 2x68 observed landmarks.

    Alternates an exact linear least-squares solve for the two image rows of
    the pose (8 unknowns, shape fixed) with a ridge solve for the 50 shape and
    expression coefficients (pose fixed).  Each half-step minimizes the
    objective over its block, so the objective never increases; a step that
    would increase it through rounding is rejected and ends the loop.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (2, N_LANDMARKS):
        raise ValueError(f"observed landmarks must be 2x{N_LANDMARKS}, got {observed.shape}")
    if not np.all(np.isfinite(observed)):
        raise ValueError("observed landmarks contain non-finite values")
    if reg < 0:
        raise ValueError("reg must be >= 0")
    if np.all(observed == observed[:, :1]):
        raise SingularSystemError("observed landmarks are all coincident")

    rows = _landmark_rows(model)
    mean_l = model.mean_shape[rows]  # (3*68,)
    basis_l = np.hstack([model.shape_basis[rows], model.expr_basis[rows]])  # (3*68, 50)
    basis_l3 = basis_l.reshape(N_LANDMARKS, 3, -1)
    n_alpha = basis_l.shape[1]

    def landmarks(pose, alpha):
        pts = (mean_l + basis_l @ alpha).reshape(-1, 3).T
        return pose[:2, :3] @ pts + pose[:2, 3:4]

    alpha = np.zeros(n_alpha)
    mean_xy = mean_l.reshape(-1, 3).T[:2]
    s, rot, t = similarity_align(mean_xy, observed)
    pose = np.zeros((3, 4))
    pose[:2, :2] = s * rot
    pose[2, 2] = s
    pose[:2, 3] = t

    history = [_fit_objective(landmarks(pose, alpha), observed, alpha, reg)]
    step, max_step = 1.0, 64.0
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # pose step: observed_k = [S_l^T 1] p_k for k in {x, y}
        pts = (mean_l + basis_l @ alpha).reshape(-1, 3)
        design = np.hstack([pts, np.ones((N_LANDMARKS, 1))])
        sol, _, rank, _ = np.linalg.lstsq(design, observed.T, rcond=None)
        if rank < 4:
            raise SingularSystemError("pose normal equations are singular (degenerate landmark geometry)")
        new_pose = _complete_pose(sol.T)

        # shape step: ridge regression for alpha given the pose
        jac = np.einsum("km,lmj->klj", new_pose[:2, :3], basis_l3).reshape(2 * N_LANDMARKS, n_alpha)
        base = landmarks(new_pose, np.zeros(n_alpha))
        resid = (observed - base).reshape(-1)
        normal = jac.T @ jac + reg * np.eye(n_alpha)
        sv = np.linalg.svd(normal, compute_uv=False)
        if sv[-1] <= sv[0] * 1e-13:
            raise SingularSystemError("shape normal equations are singular; increase reg")
        new_alpha = np.linalg.solve(normal, jac.T @ resid)

        obj = _fit_objective(landmarks(new_pose, new_alpha), observed, new_alpha, reg)
        if obj > history[-1]:
            converged = True
            n_iter -= 1
            break

        if extrapolate:
            # line search along the sweep direction; kept only if it lowers the objective
            ext_rows = new_pose[:2] + step * (new_pose[:2] - pose[:2])
            ext_alpha = new_alpha + step * (new_alpha - alpha)
            ext_pose = _complete_pose(ext_rows)
            ext_obj = _fit_objective(landmarks(ext_pose, ext_alpha), observed, ext_alpha, reg)
            if ext_obj < obj:
                new_pose, new_alpha, obj = ext_pose, ext_alpha, ext_obj
                step = min(step * 1.5, max_step)
            else:
                step = max(step / 2, 1.0)

        pose, alpha = new_pose, new_alpha
        prev = history[-1]
        history.append(obj)
        if prev - obj <= rtol * prev or obj == 0.0:
            converged = True
            break

    coeffs = CoeffVector(pose, alpha[:N_SHAPE], alpha[N_SHAPE:])
    return FitResult(coeffs=coeffs, objective=history, converged=converged, n_iter=n_iter)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in radians."""
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def make_pose(scale: float, rot: np.ndarray, t: Sequence[float]) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    pose = np.zeros((3, 4))
    pose[:, :3] = scale * np.asarray(rot)
    pose[: t.shape[0], 3] = t
    return pose
