# Model poisoning: why exchanging outputs instead of parameters caps the
# attacker's reach.
#
# The attacker pre-trains a model w_x on the training corpus plus a
# backdoor set, then every attack round replaces its FL upload with
#     w_M = K * w_x - (K - 1) * w_g
# so the server's average lands exactly on w_x when the benign uploads
# sit near the current global w_g. One client rewrites the whole model.
#
# Against DS-FL the same attacker can only upload logits on the shared
# open subset. Its columns enter a K-way mean like everyone else's, so
# its influence is 1/K per round no matter what it sends.

import numpy as np

from dsfl import attacks
from dsfl.config import build_config
from dsfl.nn import ModelSpec, init_params
from dsfl.runner import run

# the replacement algebra, in isolation
spec = ModelSpec((8, 6, 4))
w_x = init_params(spec, 1)
w_g = init_params(spec, 2)
k = 10
w_m = attacks.poison_model_update(w_x, w_g, k)
mean = np.stack([w_m.values] + [w_g.values] * (k - 1)).mean(axis=0)
err = np.abs(mean - w_x.values).max()
print(f"single-shot replacement: max |mean - w_x| = {err:.2e}")
print()

base = {
    "seed": 5,
    "rounds": 20,
    "model": {"hidden_layers": [32]},
    "dataset": {"type": "synthetic", "n_classes": 5, "n_features": 64,
                "n_per_class": 300, "spread": 0.15, "test_per_class": 100},
    "split": {"open": 750, "private": 750},
    "partition": {"mode": "iid", "clients": 5},
    "update": {"learning_rate": 0.4, "epochs": 3, "batch_size": 50},
    "distill": {"learning_rate": 0.3, "epochs": 3, "batch_size": 50},
    "attack": {"type": "poisoning", "period": 5, "pretrain_epochs": 25,
               "backdoor": {"n_per_class": 60, "spread": 0.15, "offset": 2.0,
                            "test_per_class": 50}},
}


def poisoned(protocol):
    raw = dict(base, protocol=protocol)
    if protocol.startswith("dsfl"):
        raw["open"] = {"per_round": 150}
    if protocol == "dsfl_era":
        raw["era"] = {"temperature": 0.1}
    return run(build_config(raw))


print("protocol   main top  backdoor last  (attack rounds: 5, 10, 15, 20)")
for protocol in ("fl", "dsfl_sa", "dsfl_era"):
    res = poisoned(protocol)
    print(f"{protocol:9s}  {res.top_accuracy:8.3f}  {res.backdoor_accuracy[-1]:13.3f}")
