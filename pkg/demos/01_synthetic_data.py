"""
Synthetic CTR data with planted structure
=========================================

A walk through the generator: latent clusters on the user and item side,
a label that fires when they match, and test-time corruption of the
item-side fields.
"""

import numpy as np

from refinectr.data import SynthConfig, corrupt_dataset, synth_generate
from refinectr.metrics import auc

cfg = SynthConfig(n_train=5000, n_test=2000, seed=0)
train, test, oracle = synth_generate(cfg)
schema = cfg.schema()

print(schema.to_text())
print("train", train.tokens.shape, "test", test.tokens.shape)
print("click rate", train.labels.mean())

# The oracle text lists every parameter of the process.
print(oracle.describe()[:900])

# Item field 0 copies a function of user field 0.
u0, i0 = train.tokens[:, 0], train.tokens[:, cfg.n_user]
print("item0 == dep_map[user0]:", np.mean(i0 == oracle.dep_map[u0]))

# The latent match is the whole label signal, so the oracle posterior is
# a ceiling for any model.
zu, zi = oracle.test_clusters.T
p_true = np.where(zu == zi, oracle.match_prob, oracle.base_prob)
print("AUC of the true click probability:", round(auc(p_true, test.labels), 4))

# Corrupt 30% of item/cross positions, user fields untouched.
noisy = corrupt_dataset(test, schema, 0.3, seed=1)
per_field = noisy.corrupted.mean(axis=0)
for f, rate in zip(schema.features, per_field):
    print(f"{f.name:>3} {f.role.value:<5} corrupted {rate:.3f}")
