# Protocol race: what does a percentage point of accuracy cost on the wire?
#
# Four protocols on the same data and the same model:
#   fl        parameter averaging (every round ships full models)
#   fd        per-label mean logits (tiny payloads, weak signal)
#   dsfl_sa   model-output exchange on a shared open subset, plain mean
#   dsfl_era  the same, with the entropy-reducing sharpening step
#
# The interesting number is not accuracy alone but the cumulative bytes
# spent to reach it, including DS-FL's one-time open-set broadcast.

from dsfl import comms
from dsfl.config import build_config
from dsfl.runner import compare

base = {
    "seed": 3,
    "rounds": 25,
    "model": {"hidden_layers": [32]},
    "dataset": {"type": "synthetic", "n_classes": 5, "n_features": 64,
                "n_per_class": 300, "spread": 0.15, "test_per_class": 100},
    "split": {"open": 750, "private": 750},
    "partition": {"mode": "noniid_shards", "clients": 5, "shards_per_client": 2},
    "update": {"learning_rate": 0.4, "epochs": 3, "batch_size": 50},
    "distill": {"learning_rate": 0.3, "epochs": 3, "batch_size": 50},
}


def variant(protocol):
    raw = dict(base, protocol=protocol)
    if protocol.startswith("dsfl"):
        raw["open"] = {"per_round": 150}
    if protocol == "dsfl_era":
        raw["era"] = {"temperature": 0.1}
    return build_config(raw)


entries = [(p, variant(p)) for p in ("fl", "fd", "dsfl_sa", "dsfl_era")]
rows, table = compare(entries, thresholds=(0.7, 0.8))
print(table)

# At this toy scale FL wins the race: the whole model is 2,245 floats,
# cheaper per round than shipping 150 logit columns per client. The race
# flips when the model dwarfs the open subset, which is the realistic
# regime; per-round totals at 100 clients, 10 classes, 1000 open samples
# per round, and two published model sizes:
from dsfl.nn import ModelSpec

toy = ModelSpec((64, *base["model"]["hidden_layers"], 5))
print(f"(toy model above: {toy.param_count()} parameters)")
print()
print("per-round totals at the 100-client reference scale:")
for name, proto, params, per_round in (
        ("fd", "fd", 0, 0),
        ("dsfl", "dsfl_era", 0, 1000),
        ("fl small", "fl", 583_242, 0),
        ("fl large", "fl", 2_760_228, 0)):
    up, down = comms.round_cost(proto, params, 10, per_round, 100)
    print(f"  {name:9s} {(up + down) / 1e6:10.3f} MB")
