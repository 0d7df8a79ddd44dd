"""An eavesdropper infers a private attribute from client updates.

Adversaries are trained on updates computed from an auxiliary dataset, then
applied to the real clients' updates, with and without a defense. Uses one
seed of the bundled ``tradeoff.toml`` scenario (takes a minute or two).
"""

import numpy as np

from recupfl.attacks import asr
from recupfl.defenses import AttributeSpec, DpConfig, DpDefense, RecupConfig, RecupDefense
from recupfl.fl import apply_defense
from recupfl.harness import RoundArtifacts, build_scenario, bundled_config, load_config

cfg = load_config(bundled_config("tradeoff.toml")).with_seeds([0])
scn = build_scenario(cfg, seed=0)
art = RoundArtifacts(scn, 1)
labels = art.labels("a0")
print(f"{len(labels)} clients, attribute a0 majority rate {np.bincount(labels).max() / len(labels):.2f}")

defenses = {
    "none": None,
    "dp sigma=0.05": DpDefense(DpConfig(5.0, 0.05), "gaussian", seed=1),
    "recup eps=0.01": RecupDefense([AttributeSpec("a0")], scn.zoos(["a0"]), RecupConfig(0.01), seed=1),
}
kinds = ("stru-nn", "svm-rbf", "random-forest")
print(f"{'':15s}" + "".join(f"{k:>15s}" for k in kinds))
for name, defense in defenses.items():
    shared = apply_defense(defense, art.updates, art.contexts) if defense else art.updates
    u = np.stack([x.flat() for x in shared])
    print(f"{name:15s}" + "".join(f"{asr(art.adversary(k, 'a0'), u, labels):15.2f}" for k in kinds))
