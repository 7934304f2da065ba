"""3D dynamic prediction: encoder + LSTM + tanh readout over 62-dim coefficients.

Coefficients are affine-normalized per entry into the readout's (-1, 1)
range; the encoder consumes normalized vectors and the readout produces
them.  Losses are evaluated on decoded (raw) coefficients.

Unrolling, for t = 1..T::

    h_0 = Enc(d_0),  c_0 = 0
    x_t = Enc(input_{t-1})             # ground truth or the previous prediction
    c_in = c_{t-1}                     # free-running
    c_in = (t/T) Enc(d_T)              # target-driven, "replace" (default)
    c_in = c_{t-1} + (t/T) Enc(d_T)    # target-driven, "add"
    h_t, c_t = LSTM(x_t, h_{t-1}, c_in)
    y_t = tanh(R h_t),  d_hat_t = decode(y_t)

The "interp" mode is the ablation with the recurrent cell replaced by
linear interpolation of encodings, ``h_t = (1 - t/T) Enc(d_0) + (t/T) Enc(d_T)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import math

import numpy as np

from facedyn.mmodel import N_PARAMS, N_POSE, CoeffVector, MorphableModel, read_coeff_sequence

log = logging.getLogger(__name__)

D = N_PARAMS
PARAM_NAMES = ("enc_weight", "enc_bias", "w_x", "w_h", "bias", "readout_w")
MODES = ("free", "target", "interp")
CELL_MODES = ("replace", "add")
FDP_MAGIC = b"FDP1"


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Normalizer:
    lo: np.ndarray  # (62,)
    hi: np.ndarray  # (62,)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(D)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(D)
        if np.any(hi < lo) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("normalization bounds must be finite with lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @classmethod
    def from_data(cls, frames: np.ndarray, margin: float = 0.25) -> "Normalizer":
        """Per-entry min/max of ``frames`` (..., 62), widened by ``margin`` of the half-range."""
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, D)
        lo, hi = frames.min(axis=0), frames.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + margin)
        return cls(mid - half, mid + half)

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(-np.ones(D), np.ones(D))

    def encode(self, d: np.ndarray) -> np.ndarray:
        half = self.half
        safe = np.where(half > 0, half, 1.0)
        return np.where(half > 0, (np.asarray(d) - self.mid) / safe, 0.0)

    def decode(self, y: np.ndarray) -> np.ndarray:
        return self.mid + self.half * np.asarray(y)

    def distance(self, a, b) -> float:
        """RMS over entries of the difference in normalized units."""
        da = self.encode(_as_array(a)) - self.encode(_as_array(b))
        return float(np.sqrt(np.mean(da ** 2)))


def _as_array(c) -> np.ndarray:
    return c.to_array() if isinstance(c, CoeffVector) else np.asarray(c, dtype=np.float64)


# ---------------------------------------------------------------- parameters

@dataclass
class DynPredictor:
    enc_weight: np.ndarray  # (h, 62)
    enc_bias: np.ndarray  # (h,)
    w_x: np.ndarray  # (4h, h) gates i, f, o, g stacked
    w_h: np.ndarray  # (4h, h)
    bias: np.ndarray  # (4h,)
    readout_w: np.ndarray  # (62, h)
    norm: Normalizer = field(default_factory=Normalizer.identity)

    def __post_init__(self):
        h = self.enc_weight.shape[0]
        expected = {
            "enc_weight": (h, D), "enc_bias": (h,), "w_x": (4 * h, h),
            "w_h": (4 * h, h), "bias": (4 * h,), "readout_w": (D, h),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def hidden_size(self) -> int:
        return self.enc_weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> "DynPredictor":
        return replace(self, **{k: np.array(v, dtype=np.float64) for k, v in params.items()})

    @classmethod
    def zeros(cls, hidden_size: int, norm: Normalizer | None = None) -> "DynPredictor":
        h = hidden_size
        return cls(np.zeros((h, D)), np.zeros(h), np.zeros((4 * h, h)), np.zeros((4 * h, h)),
                   np.zeros(4 * h), np.zeros((D, h)), norm or Normalizer.identity())

    @classmethod
    def init(cls, hidden_size: int, norm: Normalizer | None = None, seed: int = 0,
             scale: float = 0.08) -> "DynPredictor":
        rng = np.random.default_rng(seed)
        p = cls.zeros(hidden_size, norm)
        return p.with_params({k: rng.uniform(-scale, scale, v.shape) for k, v in p.params().items()})

    def encode(self, n: np.ndarray) -> np.ndarray:
        """Enc applied to normalized coefficients (..., 62)."""
        return n @ self.enc_weight.T + self.enc_bias


@dataclass(frozen=True)
class LstmState:
    h: np.ndarray
    c: np.ndarray


def lstm_step(p: DynPredictor, x_enc: np.ndarray, s: LstmState) -> LstmState:
    z = p.w_x @ x_enc + p.w_h @ s.h + p.bias
    i, f, o, g = np.split(z, 4)
    i, f, o, g = _sigmoid(i), _sigmoid(f), _sigmoid(o), np.tanh(g)
    c = f * s.c + i * g
    return LstmState(h=o * np.tanh(c), c=c)


def counter_weight(t: int, T: int) -> float:
    """Weight of the encoded target at step t of a length-T target-driven unroll."""
    return t / T


# ---------------------------------------------------------------- unrolled forward / backward

@dataclass
class Unroll:
    mode: str
    cell_mode: str
    T: int
    n0: np.ndarray  # (B, D)
    nT: np.ndarray | None
    inputs: np.ndarray  # (B, T, D) vectors fed to Enc at each step
    fed_back: np.ndarray  # (T,) bool: input came from the previous prediction
    counters: np.ndarray  # (T,) weight applied to Enc(d_T)
    x: np.ndarray  # (B, T, H)
    h_prev: np.ndarray  # (B, T, H)
    c_in: np.ndarray
    gates: np.ndarray  # (B, T, 4H) post-activation
    c: np.ndarray
    tc: np.ndarray
    h: np.ndarray
    y: np.ndarray  # (B, T, D)
    hT: np.ndarray | None


def unroll(p: DynPredictor, n0: np.ndarray, T: int, mode: str = "free", nT: np.ndarray | None = None,
           observed: np.ndarray | None = None, n_observed: int = 1, cell_mode: str = "replace") -> Unroll:
    """Run the predictor for T steps on a batch of normalized start vectors.

    ``observed`` (B, >=n_observed, D) holds normalized ground truth
    d_0, d_1, ...; the first ``n_observed`` inputs are taken from it and the
    rest are the model's own previous outputs.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if cell_mode not in CELL_MODES:
        raise ValueError(f"cell_mode must be one of {CELL_MODES}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode != "free" and nT is None:
        raise ValueError(f"mode {mode!r} needs a target")
    n0 = np.atleast_2d(n0)
    B, H = n0.shape[0], p.hidden_size
    if observed is None:
        observed = n0[:, None, :]
    n_observed = max(1, min(n_observed, observed.shape[1]))

    shp = (B, T, H)
    u = Unroll(mode, cell_mode, T, n0, None if nT is None else np.atleast_2d(nT),
               np.zeros((B, T, D)), np.zeros(T, dtype=bool), np.zeros(T),
               np.zeros(shp), np.zeros(shp), np.zeros(shp), np.zeros((B, T, 4 * H)),
               np.zeros(shp), np.zeros(shp), np.zeros(shp), np.zeros((B, T, D)), None)

    h0 = p.encode(n0)
    if mode != "free":
        u.hT = p.encode(u.nT)
    if mode == "interp":
        for t in range(1, T + 1):
            w = counter_weight(t, T)
            u.counters[t - 1] = w
            u.h[:, t - 1] = (1.0 - w) * h0 + w * u.hT
        u.y = np.tanh(u.h @ p.readout_w.T)
        return u

    h_prev, c_prev = h0, np.zeros((B, H))
    y_prev = n0
    for t in range(1, T + 1):
        k = t - 1
        if k < n_observed:
            inp = observed[:, k]
        else:
            inp = y_prev
            u.fed_back[k] = True
        x = p.encode(inp)
        if mode == "target":
            w = counter_weight(t, T)
            u.counters[k] = w
            c_in = w * u.hT if cell_mode == "replace" else c_prev + w * u.hT
        else:
            c_in = c_prev
        z = x @ p.w_x.T + h_prev @ p.w_h.T + p.bias
        gates = np.concatenate([_sigmoid(z[:, :3 * H]), np.tanh(z[:, 3 * H:])], axis=1)
        i, f, o, g = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
        c = f * c_in + i * g
        tc = np.tanh(c)
        h = o * tc
        y = np.tanh(h @ p.readout_w.T)
        u.inputs[:, k], u.x[:, k], u.h_prev[:, k], u.c_in[:, k] = inp, x, h_prev, c_in
        u.gates[:, k], u.c[:, k], u.tc[:, k], u.h[:, k], u.y[:, k] = gates, c, tc, h, y
        h_prev, c_prev, y_prev = h, c, y
    return u


def backward(p: DynPredictor, u: Unroll, dy: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss w.r.t. every parameter given dL/dy of shape (B, T, D)."""
    H, T = p.hidden_size, u.T
    grads = {k: np.zeros_like(v) for k, v in p.params().items()}

    if u.mode == "interp":
        dpre = dy * (1.0 - u.y ** 2)
        grads["readout_w"] = np.einsum("btd,bth->dh", dpre, u.h)
        dh = dpre @ p.readout_w
        w = u.counters[None, :, None]
        dh0 = ((1.0 - w) * dh).sum(axis=1)
        dhT = (w * dh).sum(axis=1)
        grads["enc_weight"] = dh0.T @ u.n0 + dhT.T @ u.nT
        grads["enc_bias"] = dh0.sum(axis=0) + dhT.sum(axis=0)
        return grads

    dy = dy.copy()
    dh_next = np.zeros((u.n0.shape[0], H))
    dc_next = np.zeros_like(dh_next)
    dhT = np.zeros_like(dh_next)
    dx_all = np.zeros_like(u.x)
    for k in range(T - 1, -1, -1):
        y, h, tc = u.y[:, k], u.h[:, k], u.tc[:, k]
        i, f, o, g = (u.gates[:, k, j * H:(j + 1) * H] for j in range(4))
        dpre = dy[:, k] * (1.0 - y * y)
        grads["readout_w"] += dpre.T @ h
        dh = dpre @ p.readout_w + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * u.c_in[:, k] * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=1)
        grads["w_x"] += dz.T @ u.x[:, k]
        grads["w_h"] += dz.T @ u.h_prev[:, k]
        grads["bias"] += dz.sum(axis=0)
        dx = dz @ p.w_x
        dx_all[:, k] = dx
        if u.fed_back[k]:
            dy[:, k - 1] += dx @ p.enc_weight
        dc_in = dc * f
        if u.mode == "target":
            dhT += u.counters[k] * dc_in
            dc_next = dc_in if u.cell_mode == "add" else np.zeros_like(dc_in)
        else:
            dc_next = dc_in
        dh_next = dz @ p.w_h

    grads["enc_weight"] = np.einsum("bth,btd->hd", dx_all, u.inputs) + dh_next.T @ u.n0
    grads["enc_bias"] = dx_all.sum(axis=(0, 1)) + dh_next.sum(axis=0)
    if u.mode == "target":
        grads["enc_weight"] += dhT.T @ u.nT
        grads["enc_bias"] += dhT.sum(axis=0)
    return grads


# ---------------------------------------------------------------- losses

class VertexLoss:
    """Squared vertex distance between coefficient vectors, vectorized over leading axes.

    Without pose the vertices are model-space shapes, so the loss reduces to a
    quadratic form in the alpha difference with the basis Gram matrix.
    """

    def __init__(self, model: MorphableModel, with_pose: bool = False):
        self.with_pose = with_pose
        self.basis = np.hstack([model.shape_basis, model.expr_basis])  # (3N, 50)
        self.mean = model.mean_shape
        self.gram = self.basis.T @ self.basis
        self.n_vertices = model.n_vertices

    def _vertices(self, d):
        shape = (self.mean + d[..., N_POSE:] @ self.basis.T).reshape(*d.shape[:-1], self.n_vertices, 3)
        pose = d[..., :N_POSE].reshape(*d.shape[:-1], 3, 4)
        cam = np.einsum("...ij,...nj->...ni", pose[..., :3], shape) + pose[..., None, :, 3]
        return shape, pose, cam

    def value_and_grad(self, d_hat: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-vector loss (...,) and its gradient w.r.t. ``d_hat`` (..., 62)."""
        grad = np.zeros_like(d_hat)
        if not self.with_pose:
            da = d_hat[..., N_POSE:] - d[..., N_POSE:]
            gda = da @ self.gram
            grad[..., N_POSE:] = 2.0 * gda
            return np.einsum("...i,...i->...", da, gda), grad
        s_hat, p_hat, v_hat = self._vertices(d_hat)
        _, _, v = self._vertices(d)
        dv = v_hat - v
        val = np.einsum("...ni,...ni->...", dv, dv)
        gv = 2.0 * dv
        g_rot = np.einsum("...ni,...nj->...ij", gv, s_hat)
        g_t = gv.sum(axis=-2)
        grad[..., :N_POSE] = np.concatenate([g_rot, g_t[..., None]], axis=-1).reshape(*d.shape[:-1], N_POSE)
        g_shape = np.einsum("...ij,...ni->...nj", p_hat[..., :3], gv).reshape(*d.shape[:-1], -1)
        grad[..., N_POSE:] = g_shape @ self.basis
        return val, grad


def _stack(seq) -> np.ndarray:
    return np.stack([_as_array(c) for c in seq])


def _check_lengths(pred, truth):
    if len(pred) != len(truth):
        raise ValueError(f"sequence length mismatch: {len(pred)} vs {len(truth)}")
    if len(pred) < 1:
        raise ValueError("sequences must be non-empty")


def loss_3dc(pred: Sequence[CoeffVector], truth: Sequence[CoeffVector]) -> float:
    _check_lengths(pred, truth)
    diff = _stack(pred) - _stack(truth)
    return float(np.sum(diff ** 2) / len(pred))


def loss_3dv(model: MorphableModel, pred, truth, with_pose: bool = False) -> float:
    _check_lengths(pred, truth)
    val, _ = VertexLoss(model, with_pose).value_and_grad(_stack(pred), _stack(truth))
    return float(val.sum() / len(pred))


def loss_pred(model: MorphableModel, pred, truth, lambda1: float = 1e3, with_pose: bool = False) -> float:
    return loss_3dv(model, pred, truth, with_pose) + lambda1 * loss_3dc(pred, truth)


def sequence_loss(y: np.ndarray, truth: np.ndarray, norm: Normalizer, vloss: VertexLoss,
                  lambda1: float, fp_index: np.ndarray | None = None,
                  fp_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Batch-mean prediction loss of normalized outputs y (B, T, D) and dL/dy.

    The optional fixed-point term adds ``fp_weight`` times the per-step loss
    at step ``fp_index[b]`` of each sequence.
    """
    B, T, _ = y.shape
    d_hat = norm.decode(y)
    diff = d_hat - truth
    v_val, v_grad = vloss.value_and_grad(d_hat, truth)
    step_loss = v_val + lambda1 * np.sum(diff ** 2, axis=-1)  # (B, T)
    step_grad = v_grad + 2.0 * lambda1 * diff
    weight = np.full((B, T), 1.0 / T)
    if fp_index is not None:
        weight[np.arange(B), fp_index] += fp_weight
    loss = float(np.sum(weight * step_loss) / B)
    dd = step_grad * (weight / B)[..., None]
    return loss, dd * norm.half


# ---------------------------------------------------------------- inference

def _norm_coeff(p: DynPredictor, c) -> np.ndarray:
    return p.norm.encode(_as_array(c))[None, :]


def predict_sequence(p: DynPredictor, d0: CoeffVector, T: int,
                     prefix: Sequence[CoeffVector] | None = None) -> list[CoeffVector]:
    """Free-running prediction of d_1..d_T from d_0 (and optional observed d_1.. prefix)."""
    obs = [d0] + list(prefix or [])
    observed = np.stack([p.norm.encode(_as_array(c)) for c in obs])[None]
    u = unroll(p, observed[:, 0], T, "free", observed=observed, n_observed=len(obs))
    return [CoeffVector.from_array(v) for v in p.norm.decode(u.y[0])]


def predict_target_driven(p: DynPredictor, d0: CoeffVector, dT: CoeffVector, T: int,
                          cell_mode: str = "replace") -> list[CoeffVector]:
    u = unroll(p, _norm_coeff(p, d0), T, "target", nT=_norm_coeff(p, dT), cell_mode=cell_mode)
    return [CoeffVector.from_array(v) for v in p.norm.decode(u.y[0])]


def predict_interp_model(p: DynPredictor, d0: CoeffVector, dT: CoeffVector, T: int) -> list[CoeffVector]:
    u = unroll(p, _norm_coeff(p, d0), T, "interp", nT=_norm_coeff(p, dT))
    return [CoeffVector.from_array(v) for v in p.norm.decode(u.y[0])]


def interpolate_sequence(d0: CoeffVector, dT: CoeffVector, T: int) -> list[CoeffVector]:
    """Linear baseline d_t = d0 + (t/T)(dT - d0) for t = 1..T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    a, b = _as_array(d0), _as_array(dT)
    return [CoeffVector.from_array((1.0 - t / T) * a + (t / T) * b) for t in range(1, T + 1)]


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lambda1: float = 1e3
    seq_len: int = 24
    learn_rate: float = 1e-4
    epochs: int = 100
    grad_clip: float = 5.0
    seed: int = 0
    fixed_point: bool = True  # only used in target mode
    fixed_point_weight: float = 1.0
    batch_size: int = 8
    hidden_size: int = 128
    teacher_forcing: bool = True
    prefix: int = 1  # ground-truth inputs when not teacher forcing
    vertex_loss_with_pose: bool = False
    cell_mode: str = "replace"
    norm_margin: float = 0.25
    init_scale: float = 0.08
    lr_final: float = 1.0  # cosine decay to this fraction of learn_rate; 1.0 keeps it constant

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.learn_rate <= 0:
            raise ValueError("learn_rate must be > 0")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden_size < 1 or self.prefix < 1:
            raise ValueError("epochs, batch_size, hidden_size and prefix must be positive")
        if self.cell_mode not in CELL_MODES:
            raise ValueError(f"cell_mode must be one of {CELL_MODES}")
        if not 0 < self.lr_final <= 1:
            raise ValueError("lr_final must be in (0, 1]")


class TrajectoryDataset:
    """Coefficient sequences, each an (L, 62) array."""

    def __init__(self, sequences: Sequence):
        self.sequences = []
        for seq in sequences:
            arr = _stack(seq) if not isinstance(seq, np.ndarray) else np.asarray(seq, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != D:
                raise ValueError(f"each sequence must be (L, {D}), got {arr.shape}")
            self.sequences.append(arr)
        if not self.sequences:
            raise ValueError("dataset is empty")

    @classmethod
    def from_jsonl(cls, paths) -> "TrajectoryDataset":
        return cls([read_coeff_sequence(p) for p in paths])

    def __len__(self):
        return len(self.sequences)

    def frames(self) -> np.ndarray:
        return np.concatenate(self.sequences)

    def min_length(self) -> int:
        return min(s.shape[0] for s in self.sequences)

    def windows(self, T: int, offsets: Sequence[int] | None = None) -> np.ndarray:
        """(M, T+1, D) windows starting at ``offsets`` (default 0)."""
        offsets = offsets if offsets is not None else [0] * len(self)
        return np.stack([s[o:o + T + 1] for s, o in zip(self.sequences, offsets)])


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def batch_loss(p: DynPredictor, windows: np.ndarray, vloss: VertexLoss, cfg: TrainConfig, mode: str,
               fp_index: np.ndarray | None = None, with_grad: bool = True):
    """Loss (and gradients) of a batch of raw (B, T+1, D) windows."""
    T = windows.shape[1] - 1
    nwin = p.norm.encode(windows)
    n_observed = T if cfg.teacher_forcing else cfg.prefix
    u = unroll(p, nwin[:, 0], T, mode, nT=nwin[:, T] if mode != "free" else None,
               observed=nwin, n_observed=n_observed, cell_mode=cfg.cell_mode)
    fp_weight = cfg.fixed_point_weight if fp_index is not None else 0.0
    loss, dy = sequence_loss(u.y, windows[:, 1:], p.norm, vloss, cfg.lambda1, fp_index, fp_weight)
    if not with_grad:
        return loss, None
    return loss, backward(p, u, dy)


def evaluate_loss(p: DynPredictor, model: MorphableModel, dataset: TrajectoryDataset, cfg: TrainConfig,
                  mode: str = "free") -> float:
    """Prediction loss over offset-0 windows of every sequence (no fixed-point term)."""
    vloss = VertexLoss(model, cfg.vertex_loss_with_pose)
    loss, _ = batch_loss(p, dataset.windows(cfg.seq_len), vloss, cfg, mode, with_grad=False)
    return loss


def train_predictor(model: MorphableModel, dataset: TrajectoryDataset, cfg: TrainConfig, mode: str = "free",
                    callback: Callable[[int, DynPredictor, float], None] | None = None,
                    norm: Normalizer | None = None,
                    init: DynPredictor | None = None) -> tuple[DynPredictor, list[float]]:
    """Train by BPTT with Adam; returns the predictor and the per-epoch mean loss.

    An epoch visits every sequence once in a seeded random order, each
    through a random window of length seq_len + 1.  ``callback(step, p, loss)``
    runs after every optimizer step.  ``init`` replaces the seeded random
    initialization (its normalizer is kept unless ``norm`` is given).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    T = cfg.seq_len
    if dataset.min_length() < T + 1:
        raise ValueError(f"every sequence needs at least {T + 1} frames")
    rng = np.random.default_rng(cfg.seed)
    init_seed = int(rng.integers(2 ** 31))
    if init is not None:
        p = init.with_params(init.params())
        if norm is not None:
            p = replace(p, norm=norm)
    else:
        norm = norm or Normalizer.from_data(dataset.frames(), cfg.norm_margin)
        p = DynPredictor.init(cfg.hidden_size, norm, seed=init_seed, scale=cfg.init_scale)
    params = p.params()
    opt = Adam(params, cfg.learn_rate)
    vloss = VertexLoss(model, cfg.vertex_loss_with_pose)
    use_fp = cfg.fixed_point and mode == "target"

    history: list[float] = []
    step = 0
    total_steps = cfg.epochs * -(-len(dataset) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            offsets = [int(rng.integers(0, dataset.sequences[i].shape[0] - T)) for i in idx]
            windows = np.stack([dataset.sequences[i][o:o + T + 1] for i, o in zip(idx, offsets)])
            fp_index = rng.integers(0, T, size=len(idx)) if use_fp else None
            with np.errstate(over="ignore", invalid="ignore"):  # checked just below
                loss, grads = batch_loss(p, windows, vloss, cfg, mode, fp_index)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                pnorm = float(np.sqrt(sum(np.sum(v * v) for v in params.values())))
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}; parameter norm {pnorm:.6g}")
            clip_gradients(grads, cfg.grad_clip)
            frac = 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
            opt.lr = cfg.learn_rate * (cfg.lr_final + (1.0 - cfg.lr_final) * frac)
            opt.step(params, grads)
            step += 1
            epoch_losses.append(loss)
            if callback is not None:
                callback(step, p, loss)
        history.append(float(np.mean(epoch_losses)))
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return p, history


# ---------------------------------------------------------------- checkpoint

def save_predictor(p: DynPredictor, path) -> None:
    h = p.hidden_size
    parts = [FDP_MAGIC, struct.pack("<II", h, D),
             p.norm.lo.astype("<f8").tobytes(), p.norm.hi.astype("<f8").tobytes()]
    parts += [getattr(p, name).astype("<f8").tobytes(order="C") for name in PARAM_NAMES]
    Path(path).write_bytes(b"".join(parts))


def load_predictor(path) -> DynPredictor:
    data = Path(path).read_bytes()
    if data[:4] != FDP_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointError("checkpoint truncated")
    h, d = struct.unpack_from("<II", data, 4)
    if d != D:
        raise CheckpointError(f"checkpoint coefficient size {d} != {D}")
    shapes = [(h, D), (h,), (4 * h, h), (4 * h, h), (4 * h,), (D, h)]
    expected = 12 + 8 * 2 * D + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint is {len(data)} bytes, expected {expected}")
    off = 12
    lo = np.frombuffer(data, "<f8", D, off)
    hi = np.frombuffer(data, "<f8", D, off + 8 * D)
    off += 16 * D
    arrays = {}
    for name, shape in zip(PARAM_NAMES, shapes):
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    return DynPredictor(norm=Normalizer(lo.copy(), hi.copy()), **arrays)
