"""Shared test utilities: finite-difference gradient checks and a small training setup."""

import numpy as np

from facedyn.dynpred import DynPredictor, Normalizer, TrainConfig, VertexLoss, batch_loss
from facedyn.synth import sinusoid_trajectories


def small_windows(T, batch=2, seed=0):
    seqs = sinusoid_trajectories(batch, T + 1, seed=seed)
    return np.stack([np.stack([c.to_array() for c in s]) for s in seqs])


def fd_relative_errors(p, windows, vloss, cfg, mode, fp_index=None, n_entries=24, eps=1e-5, seed=0):
    """Per-tensor relative error between BPTT and central differences on sampled entries."""
    rng = np.random.default_rng(seed)
    _, grads = batch_loss(p, windows, vloss, cfg, mode, fp_index)
    out = {}
    for name, arr in p.params().items():
        flat = arr.ravel()
        k = min(n_entries, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        analytic = grads[name].ravel()[idx]
        numeric = np.empty(k)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            lp, _ = batch_loss(p, windows, vloss, cfg, mode, fp_index, with_grad=False)
            flat[i] = old - eps
            lm, _ = batch_loss(p, windows, vloss, cfg, mode, fp_index, with_grad=False)
            flat[i] = old
            numeric[j] = (lp - lm) / (2 * eps)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-30)
        out[name] = float(np.linalg.norm(analytic - numeric) / scale)
    return out


def gradcheck_setup(model, T, h, mode, teacher_forcing=True, cell_mode="replace", with_pose=False, seed=0):
    windows = small_windows(T, seed=seed)
    norm = Normalizer.from_data(windows)
    p = DynPredictor.init(h, norm, seed=seed, scale=0.3)
    cfg = TrainConfig(seq_len=T, hidden_size=h, teacher_forcing=teacher_forcing, cell_mode=cell_mode,
                      lambda1=1.0, vertex_loss_with_pose=with_pose)
    fp_index = np.array([T - 1, 0]) if mode == "target" else None
    return p, windows, VertexLoss(model, with_pose), cfg, fp_index
