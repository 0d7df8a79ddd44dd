"""Update transformations applied by clients before sharing."""

from recupfl.defenses.adapters import (
    ClipDefense,
    DpDefense,
    IdentityDefense,
    RecupDefense,
    SoteriaDefense,
    SparsifyDefense,
    VariantDefense,
)
from recupfl.defenses.baselines import (
    DpConfig,
    SoteriaConfig,
    SparsifyConfig,
    clip,
    dp_gaussian,
    dp_laplace,
    soteria,
    sparsify,
)
from recupfl.defenses.recup import (
    VARIANTS,
    DEFAULT_EPSILON,
    AttributeSpec,
    RecupConfig,
    RecupTrace,
    alignment_diagnostic,
    fgsm_variant,
    recup_batch,
    recup_multi,
    recup_single,
)

__all__ = [
    "VARIANTS",
    "DEFAULT_EPSILON",
    "AttributeSpec",
    "ClipDefense",
    "DpConfig",
    "DpDefense",
    "IdentityDefense",
    "RecupConfig",
    "RecupDefense",
    "RecupTrace",
    "SoteriaConfig",
    "SoteriaDefense",
    "SparsifyConfig",
    "SparsifyDefense",
    "VariantDefense",
    "alignment_diagnostic",
    "clip",
    "dp_gaussian",
    "dp_laplace",
    "fgsm_variant",
    "recup_batch",
    "recup_multi",
    "recup_single",
    "soteria",
    "sparsify",
]
