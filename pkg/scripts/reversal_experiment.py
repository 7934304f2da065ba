"""Symmetry check: retrain on time-reversed trajectories and swap the endpoints.

A predictor trained on reversed data, driven from d_T back to d_0, should
land near d_0 about as well as the forward model lands near d_T.
"""

import argparse

import numpy as np

from facedyn.dynpred import TrainConfig, TrajectoryDataset, predict_target_driven, train_predictor
from facedyn.synth import face_model, sinusoid_trajectories


def endpoint_errors(p, pairs, T):
    return np.array([p.norm.distance(predict_target_driven(p, a, b, T)[-1], b) for a, b in pairs])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=4000)
    ap.add_argument("--lr", type=float, default=1e-2)
    args = ap.parse_args()

    model = face_model(seed=0, grid=(12, 12))
    T = 24
    seqs = [np.stack([c.to_array() for c in s]) for s in sinusoid_trajectories(20, 48, seed=1)]
    held = sinusoid_trajectories(30, T + 1, seed=99)
    cfg = TrainConfig(learn_rate=args.lr, epochs=args.epochs, lr_final=0.01, batch_size=20, hidden_size=64,
                      vertex_loss_with_pose=True, teacher_forcing=False)

    fwd, _ = train_predictor(model, TrajectoryDataset(seqs), cfg, "target")
    rev, _ = train_predictor(model, TrajectoryDataset([s[::-1].copy() for s in seqs]), cfg, "target")
    e_fwd = endpoint_errors(fwd, [(s[0], s[T]) for s in held], T)
    e_rev = endpoint_errors(rev, [(s[T], s[0]) for s in held], T)
    print(f"forward  d0 -> dT: median endpoint distance {np.median(e_fwd):.4f}")
    print(f"reversed dT -> d0: median endpoint distance {np.median(e_rev):.4f}")


if __name__ == "__main__":
    main()
