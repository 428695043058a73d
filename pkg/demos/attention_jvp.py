"""Attention output and its tangent in one blockwise pass, never forming the L x L softmax."""
import time

import numpy as np

from trigflow.attention import attention_jvp, dense_attention_jvp_oracle
from trigflow.harness.cli import bench_attention

rng = np.random.default_rng(0)
L, dv = 96, 8
x, tx = rng.normal(size=(2, L, L)) * 3       # scores and their tangent
v, tv = rng.normal(size=(2, L, dv))

y_ref, ty_ref = dense_attention_jvp_oracle(x, tx, v, tv)
for block in (1, 7, 32, L):
    y, ty = attention_jvp(x, tx, v, tv, block_size=block)
    print(f"block {block:3d}: |dy| {np.abs(y - y_ref).max():.1e}  |dty| {np.abs(ty - ty_ref).max():.1e}")

# huge logits stay finite because every block is shifted by its running max
y, ty = attention_jvp(x + 1e4, tx, v, tv, block_size=16)
print("shifted by 1e4, finite:", bool(np.isfinite(y).all() and np.isfinite(ty).all()))

t0 = time.time()
for row in bench_attention([64, 256, 512], block=64):
    print(row)
print(f"{time.time() - t0:.1f}s")
