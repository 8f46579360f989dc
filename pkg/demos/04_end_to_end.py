#!/usr/bin/env python3
"""Train briefly, then compare every method on an unseen occluded scene.

Run:  python3 demos/04_end_to_end.py        (~6 minutes on CPU)
"""


from swarmloc import eval as ev
from swarmloc import matchnet as mn
from swarmloc import sim, train

# Train on two noisy occluded scenes (4 and 8 robots); the network handles
# both robot counts with the same weights.
train_sets = [
    sim.generate_dataset(sim.SceneConfig(n_robots=4, n_frames=400, n_trees=60, seed=1))[1],
    sim.generate_dataset(sim.SceneConfig(n_robots=8, n_frames=300, n_trees=60, seed=2))[1],
]
net_cfg = mn.MatchNetConfig()
out = train.train(
    train_sets, net_cfg,
    train.TrainConfig(lr=1e-3, pretrain_epochs=15, epochs=0, samples_per_epoch=400, seed=3),
)
print(f"pretrained: val precision {out.metrics[-1]['val_precision']:.3f}, "
      f"val recall {out.metrics[-1]['val_recall']:.3f}")
net = (out.params, net_cfg)

# Unseen scene, default (heavy) odometry noise, fakes, occlusion.
_, frames = sim.generate_dataset(
    sim.SceneConfig(n_robots=8, n_frames=300, n_trees=60, seed=77)
)

rows = []
for method, kwargs in [
    ("pvo", {}),
    ("simple", {"eval_cfg": ev.EvalConfig(simple=ev.SimpleMatchConfig(cos_threshold=0.99))}),
    ("simple+pgo", {"eval_cfg": ev.EvalConfig(simple=ev.SimpleMatchConfig(cos_threshold=0.99))}),
    ("learned", {"net": net}),
    ("learned+pgo", {"net": net}),
]:
    rep = ev.run_pipeline(frames, method, **kwargs)
    rows.append((method, rep))
    print(f"  evaluated {method}: RPE {rep.rpe_rmse:.3f} m")

print(f"\n{'method':<14} {'RPE (m)':>8} {'P':>7} {'R':>7} {'F1':>7}")
for method, rep in rows:
    pr = f"{rep.precision:7.3f} {rep.recall:7.3f} {rep.f1:7.3f}" if rep.f1 else " " * 23
    print(f"{method:<14} {rep.rpe_rmse:8.3f} {pr}")

ours = dict(rows)["learned+pgo"].rpe_rmse
print(f"\ndead-reckoning diverges ({dict(rows)['pvo'].rpe_rmse:.1f} m) while the full "
      f"system stays bounded ({ours:.2f} m); dropping the back-end costs "
      f"{dict(rows)['learned'].rpe_rmse / ours:.1f}x accuracy.")
