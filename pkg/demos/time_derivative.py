"""Why the time input is t itself: the legacy log-tan conditioning blows up near pure noise."""
import numpy as np

from trigflow import autodiff as ad
from trigflow.core import HALF_PI
from trigflow.net import Net, NetConfig

rng = np.random.default_rng(0)
u = rng.normal(size=(16, 2))
ts = HALF_PI - np.logspace(-1, -6, 6)

print("pi/2 - t   trig        legacy")
rows = {}
for mode in ("trig", "legacy"):
    net = Net(NetConfig(dim=2, hidden=32, depth=2, cond_dim=32, c_noise=mode))
    p = net.init(np.random.default_rng(1))
    p["out.W"] = rng.normal(size=p["out.W"].shape)
    norms = []
    for t in ts:
        _, dF = ad.jvp_eval(lambda tt: net.apply(p, u, ad.broadcast_to(tt, (16,))), np.array(t), np.array(1.0))
        norms.append(np.linalg.norm(dF) / 4)
    rows[mode] = norms
for i, t in enumerate(ts):
    print(f"{HALF_PI - t:8.0e}  {rows['trig'][i]:10.3g}  {rows['legacy'][i]:10.3g}")
# the legacy column grows like 1 / cos t; the trig column stays put
