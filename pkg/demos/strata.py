"""Four ways to add novel classes to a trained model, on one task.

From cheapest to most expensive: mean prototypes, implicit prototypes,
metric backfill and lifelong updates of the whole network.
"""

import numpy as np

from shotfree import (FewShotTask, Split, TrainConfig, backfill_metric, classify, gen_synthetic,
                      lifelong_update, meta_train, prototypes_implicit, prototypes_mean,
                      sample_episode_support_query)

ds = gen_synthetic(num_classes=40, dim=8, samples_per_class=40, intra_spread=0.3, seed=2)
ck, _ = meta_train(ds, TrainConfig(max_iterations=200, validation_interval=50, embed_dim=16, seed=0))

rng = np.random.default_rng(0)
ep = sample_episode_support_query(ds, Split.NOVEL, ways=5, shots=3, queries=20, rng=rng)
task = FewShotTask.from_episode(ds, ep)


def acc(pred):
    return float(np.mean(pred == task.query_labels))


print("mean      %.3f" % acc(classify(ck, prototypes_mean(ck, task), task.query_features)))
print("implicit  %.3f" % acc(classify(ck, prototypes_implicit(ck, task), task.query_features)))

metric, table = backfill_metric(ck, [task])
# the table also holds the base classes; score among the task classes only
print("backfill  %.3f" % acc(classify(ck, table.subset(task.class_ids), task.query_features, metric=metric)))

grown = lifelong_update(ck, task, steps=100)
print("lifelong  %.3f" % acc(classify(grown, grown.prototypes.subset(task.class_ids), task.query_features)))
