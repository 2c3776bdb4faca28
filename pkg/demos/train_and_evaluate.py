"""Meta-train once, then evaluate the same checkpoint at several shots.

Run from the repository root:  python3 demos/train_and_evaluate.py
Takes about a minute on a laptop.
"""

import numpy as np

from shotfree import Scenario, TrainConfig, evaluate, gen_synthetic, meta_train

# 40 Gaussian classes in R^8, shuffled into base / validation / novel splits
ds = gen_synthetic(num_classes=40, dim=8, samples_per_class=40, intra_spread=0.3, seed=1)
print("features", ds.features.shape)

cfg = TrainConfig(max_iterations=300, validation_interval=50, embed_dim=16, seed=0)
ck, log = meta_train(ds, cfg)
print("best validation accuracy %.3f at iteration %d" % (ck.validation_score, ck.iteration))
print("learned scale s = %.2f" % ck.scale)

# the loss curve, every 50 iterations
losses = log.series("loss")
print("loss", np.round(losses[::50], 3))

# no retraining between rows: the prototypes of novel classes are placed at test time
for shots in (1, 5, 10):
    for method in ("mean", "implicit"):
        rep = evaluate(ck, ds, Scenario(ways=5, shots=shots, episodes=200), method=method, seed=0)
        print("%2d-shot %-8s %.3f +- %.3f" % (shots, method, rep.accuracy, rep.ci95))
