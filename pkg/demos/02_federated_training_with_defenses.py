"""Federated averaging with a defense applied to every client update.

Builds the synthetic scenario of the bundled ``minimal.toml`` config, then
trains the global model without a defense, with DP-Gaussian noise and with
RecUP, printing the test loss after every round.
"""

from dataclasses import replace

import numpy as np

from recupfl.defenses import AttributeSpec, DpConfig, DpDefense, RecupConfig, RecupDefense
from recupfl.fl import run_rounds
from recupfl.harness import build_scenario, bundled_config, load_config

cfg = load_config(bundled_config("minimal.toml"))
cfg = replace(cfg, fl=replace(cfg.fl, rounds=5))
scn = build_scenario(cfg, seed=0)
print(f"{len(scn.clients)} clients, model {scn.spec.input_dim} -> {scn.spec.layer_widths}")

defenses = {
    "none": None,
    "dp sigma=0.05": DpDefense(DpConfig(clip_bound=5.0, sigma=0.05), "gaussian", seed=1),
    "recup eps=0.01": RecupDefense([AttributeSpec("a0")], scn.zoos(["a0"]), RecupConfig(0.01, iterations=2, sampled=2), seed=1),
}
for name, defense in defenses.items():
    _, records = run_rounds(scn.fl, scn.spec, scn.clients, scn.test, defense)
    print(f"{name:15s}", " ".join(f"{r.test_loss:.4f}" for r in records))

# What the defense does to one client's update.
(update,), (ctx,) = scn.updates_at(1, scn.weights_at(1), [0])
for name, defense in list(defenses.items())[1:]:
    out = defense(update, ctx).flat()
    delta = out - update.flat()
    print(f"{name:15s} |delta|_2 = {np.linalg.norm(delta):.4f}, |delta|_inf = {np.abs(delta).max():.4f}")
