"""
Hashing queries into buckets
============================

Shared query/key vectors are hashed with random rotations. Vectors that point
the same way land in the same bucket, so attention only has to look inside a
bucket and its neighbouring chunk.
"""

import numpy as np

from hireformer.reformer import AttentionConfig, full_attention, init_layer, lsh_attention
from hireformer.numerics import Tensor

cfg = AttentionConfig(model_dim=16, n_heads=2, n_hash_rounds=2, bucket_chunk_size=4)
g = np.random.default_rng(1)
params = init_layer(g, 16, 32, std=0.3)
x = Tensor(g.normal(size=(1, 32, 16)).astype(np.float32))

out, buckets = lsh_attention(x, params, cfg, gen=np.random.default_rng(7), return_buckets=True)
print("buckets per round, head 0:")
print(buckets.buckets[0, 0])

# %%
# With random inputs the approximation is loose. It gets exact once every
# query's useful keys share its chunk.

full = full_attention(x, params, cfg).output
print("max |lsh - full|", float(np.abs(out.data - full.data).max()))
