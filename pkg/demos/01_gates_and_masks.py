"""Gates, masks and what they cost.

Pretrains one model of each kind on the synthetic task, then prints how many
hidden units (or experts) take part per input and the compute proxy that
follows from it. Takes a few seconds.

    python demos/01_gates_and_masks.py
"""

import numpy as np

from dgmlp.driftlab import DriftSpec, ProtocolConfig, gen_synthetic, prepare_data, pretrain_model
from dgmlp.gatenet import KINDS, count_params, forward_batch
from dgmlp.metrics import activation_ratio, flops_proxy

cfg = ProtocolConfig(seed=0)
data = prepare_data(gen_synthetic(seed=0), DriftSpec(seed=1), cfg)
X = data["clean_eval"].inputs

print(f"{'kind':10} {'theta':>7} {'W':>8} {'clean%':>7} {'AR':>6} {'FLOPs~':>7}")
models = {}
for kind in KINDS:
    pm = models[kind] = pretrain_model(kind, data, cfg)
    theta, w = count_params(pm.params, "theta"), count_params(pm.params, "w")
    if kind == "dense":
        print(f"{kind:10} {theta:7d} {w:8d} {pm.clean_acc:7.1f} {'-':>6} {1.0:7.2f}")
        continue
    mask = forward_batch(X, pm.params, pm.spec).mask
    # hard masks are exactly 0/1; soft ones count as active above spec.tau
    ar = activation_ratio(mask, 0.0 if pm.spec.is_hard else pm.spec.tau)
    print(f"{kind:10} {theta:7d} {w:8d} {pm.clean_acc:7.1f} {ar:6.2f} {flops_proxy(ar):7.2f}")

# a hard gate is piecewise constant: moving an inactive unit's weights
# leaves the output bit-identical
pm = models["dg_hard"]
x = X[:1]
tr = forward_batch(x, pm.params, pm.spec)
off = int(np.flatnonzero(tr.mask[0] == 0)[0])
w_out = np.array(pm.params["w_out"])
w_out[:, off] += 123.0
after = forward_batch(x, pm.params.evolve({"w_out": w_out}), pm.spec).logits
print(f"\ndg_hard: unit {off} is off for this input; after perturbing it, "
      f"logits unchanged: {np.array_equal(tr.logits, after)}")
