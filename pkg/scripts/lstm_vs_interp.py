"""Smoothness curves for the target-driven LSTM and the interpolation ablation.

Both models are trained on the same synthetic trajectories; every ``--every``
steps the mean frame-to-frame landmark RMS of a few probe predictions is
recorded.  Writes a JSON file with both curves and prints when each curve
settles (relative change below ``--tol`` over the last 10% of steps).
"""

import argparse
import json

import numpy as np

from facedyn.dynpred import TrainConfig, TrajectoryDataset, predict_interp_model, predict_target_driven, train_predictor
from facedyn.evalmetrics import smoothness
from facedyn.mmodel import landmarks_from_coeffs
from facedyn.synth import face_model, sinusoid_trajectories


def settle_step(curve, tol):
    """First step after which the curve stays within tol (relative) of its final value."""
    steps, vals = np.array(curve).T
    off = np.abs(vals - vals[-1]) > tol * abs(vals[-1])
    return int(steps[np.nonzero(off)[0][-1] + 1]) if off.any() else int(steps[0])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=4000)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--every", type=int, default=40)
    ap.add_argument("--tol", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="smoothness_curves.json")
    args = ap.parse_args()

    model = face_model(seed=0, grid=(12, 12))
    T = 24
    data = TrajectoryDataset([np.stack([c.to_array() for c in s])
                              for s in sinusoid_trajectories(20, 48, seed=1)])
    probes = [(s[0], s[T]) for s in sinusoid_trajectories(6, T + 1, seed=7)]
    cfg = TrainConfig(learn_rate=args.lr, epochs=args.epochs, lr_final=0.01, batch_size=20, hidden_size=64, seed=args.seed,
                      vertex_loss_with_pose=True, teacher_forcing=False)

    curves = {}
    for mode, predict in (("target", predict_target_driven), ("interp", predict_interp_model)):
        curve = []

        def cb(step, p, loss):
            if step % args.every == 0:
                s = np.mean([smoothness([landmarks_from_coeffs(model, c) for c in predict(p, a, b, T)])
                             for a, b in probes])
                curve.append((step, float(s)))

        train_predictor(model, data, cfg, mode, callback=cb)
        curves[mode] = curve
        print(f"{mode:7s} final smoothness {curve[-1][1]:.4f}  settles at step {settle_step(curve, args.tol)}")
    with open(args.out, "w") as fh:
        json.dump(curves, fh)


if __name__ == "__main__":
    main()
