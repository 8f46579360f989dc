#!/usr/bin/env python3
"""Train the graph-match front-end briefly and inspect what it learned.

Run:  python3 demos/02_match_frontend.py        (~2 minutes on CPU)
"""

import numpy as np

from swarmloc import matchnet as mn
from swarmloc import sim, train

# A small occluded scene with fakes; priors come from ground truth one
# frame back plus 0.1 m noise per axis, which is the pretraining protocol.
cfg = sim.SceneConfig(n_robots=4, n_frames=400, n_trees=50, seed=9)
_, frames = sim.generate_dataset(cfg)

net_cfg = mn.MatchNetConfig(dim=64, layers=4, max_det=8)
tcfg = train.TrainConfig(lr=1e-3, pretrain_epochs=12, epochs=0,
                         samples_per_epoch=300, seed=1)
out = train.train(frames, net_cfg, tcfg)
last = out.metrics[-1]
print("after pretraining:")
print(f"  match loss {last['loss_match']:.3f}, "
      f"val precision {last['val_precision']:.3f}, recall {last['val_recall']:.3f}")

# Pull one validation sample and look inside the pipeline.
rng = np.random.default_rng(0)
sample = None
for f in range(350, 399):
    sample = train.build_sample(frames, f, 0, rng, 0.1)
    if sample is not None and len(sample.det) >= 3:
        break
inp = mn.MatchInput(prior_pos=sample.prior_pos, det=sample.det, ranges=sample.ranges)
result, art = mn.forward(inp, out.params, net_cfg)

probs = np.exp(art.p_log.data)
print(f"\nframe {sample.frame_idx}, observer 0: "
      f"{len(sample.det)} detections, {len(sample.others)} priors")
print("post-Sinkhorn probabilities (rows: priors + dustbin, cols: detections + dustbin):")
print(np.array2string(probs, precision=2, suppress_small=True))
print(f"assignment: {result.assignment} (ground truth pairs: {sample.gt_pairs})")
for k, j in enumerate(result.assignment):
    if j >= 0:
        err = np.linalg.norm(result.t_hat[k] - sample.gt_rel[k].t)
        print(f"  robot {sample.others[k]}: |t_hat - gt| = {err:.3f} m, "
              f"sigma = {np.sqrt(result.var[k]).round(2)}")

# The dustbin absorbs fake detections: every fake's column mass should sit
# in the dustbin row rather than on any prior.
fakes = [j for j, s in enumerate(frames[sample.frame_idx].det_src[0]) if s < 0]
for j in fakes:
    print(f"fake detection {j}: dustbin probability {probs[-1, j]:.2f}")
