"""Central finite-difference check of the joint metric + pose objective.

Coordinates whose +-h perturbation changes any discrete choice (relu masks,
mined indices, active hinges, L1 signs) straddle a kink and are excluded.
"""
from dataclasses import dataclass

import numpy as np

from mcss import neural as nn
from mcss.data import GenConfig, generate
from mcss.training import build_metric_batch, joint_objective, normalize_targets, canonical_targets

H = 1e-5
# below this magnitude relative error is measured against the floor
GRAD_FLOOR = 1e-3


@dataclass
class GradCheck:
    max_rel_err: float
    checked: int
    excluded: int
    hinge_rows: int


def frozen_problem(seed, m=4, reg=2, hidden=(16, 16), dim_phi=8):
    rng = np.random.default_rng(seed)
    ds = generate(GenConfig(n_subjects=1, n_views=4, n_frames=60, noise_sigma=0.01), seed)
    mb = build_metric_batch(ds, 1, m, 5, rng)
    rows = rng.choice(len(ds), size=reg, replace=False)
    targets = canonical_targets(ds)
    norm = normalize_targets(targets[::4])
    enc_spec = nn.encoder_spec(32, hidden, dim_phi)
    head_spec = nn.head_spec(dim_phi, 48)
    enc = [(W, rng.normal(size=b.shape) * 0.05) for W, b in nn.init_params(enc_spec, rng)]
    head = [(W, rng.normal(size=b.shape) * 0.05) for W, b in nn.init_params(head_spec, rng)]
    return (enc_spec, enc, head_spec, head, mb.anchors, mb.positives, ds.obs[rows],
            norm.forward(targets[rows]))


def check(seed, alpha=0.6, beta=0.3, lambda_pose=1.0, **kw):
    enc_spec, enc, head_spec, head, a, p, ro, rt = frozen_problem(seed, **kw)

    def run():
        return joint_objective(enc_spec, enc, head_spec, head, a, p, ro, rt, alpha, beta, lambda_pose)

    base = run()
    mining = base["mining"]
    hinge_rows = int(np.sum(~mining.negative_free & (alpha - mining.d_min > 0)))
    worst, checked, excluded = 0.0, 0, 0
    for params, grads in ((enc, base["enc_grads"]), (head, base["head_grads"])):
        for (W, b), (dW, db) in zip(params, grads):
            for arr, ana in ((W, dW), (b, db)):
                flat, gflat = arr.reshape(-1), ana.reshape(-1)
                for k in range(flat.size):
                    old = flat[k]
                    flat[k] = old + H
                    up = run()
                    flat[k] = old - H
                    down = run()
                    flat[k] = old
                    if up["signature"] != base["signature"] or down["signature"] != base["signature"]:
                        excluded += 1
                        continue
                    num = (up["loss"] - down["loss"]) / (2 * H)
                    err = abs(num - gflat[k]) / max(abs(num), abs(gflat[k]), GRAD_FLOOR)
                    worst = max(worst, err)
                    checked += 1
    return GradCheck(worst, checked, excluded, hinge_rows)
