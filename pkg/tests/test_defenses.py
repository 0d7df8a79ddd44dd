import numpy as np
import pytest

from oracles import central_difference
from recupfl.attacks.features import pool_matrix
from recupfl.data import SynthSpec, synth_generate
from recupfl.defenses import (
    AttributeSpec,
    DpConfig,
    RecupConfig,
    RecupDefense,
    RecupTrace,
    SoteriaConfig,
    alignment_diagnostic,
    clip,
    dp_gaussian,
    dp_laplace,
    fgsm_variant,
    recup_multi,
    recup_single,
    soteria,
    sparsify,
)
from recupfl.defenses.recup import attribute_seed, recup_batch
from recupfl.errors import ConfigError, DataError
from recupfl.fl import ClientContext, ModelUpdate
from recupfl.models import MlpSpec, ModelZoo, ZooMember, init_model


# ---------------------------------------------------------------------------
# clipping and noise


def test_clip_scales_to_bound_preserving_direction():
    g = np.array([6.0, 8.0])
    out = clip(g, 5.0)
    assert np.linalg.norm(out) == pytest.approx(5.0, rel=1e-15)
    assert np.allclose(out / np.linalg.norm(out), g / 10.0)
    assert np.array_equal(clip(np.array([1.0, 2.0, 2.0]), 5.0), [1.0, 2.0, 2.0])


def test_clip_uses_global_norm_across_layers():
    u = ModelUpdate(0, 1, (np.full((2, 2), 3.0), np.full(2, 4.0)))
    out = clip(u, 1.0)
    assert np.linalg.norm(out.flat()) == pytest.approx(1.0)
    assert out.shapes == u.shapes


def test_clip_rejects_non_positive_bound():
    with pytest.raises(ConfigError):
        clip(np.ones(3), 0.0)


def test_dp_configs_validate():
    with pytest.raises(ConfigError):
        DpConfig(clip_bound=1.0, sigma=0.0)
    with pytest.raises(ConfigError):
        DpConfig(clip_bound=-1.0, sigma=1.0)


def test_gaussian_noise_moments_within_four_standard_errors():
    n, sigma, mu = 100_000, 0.3, 0.0
    noise = dp_gaussian(np.zeros(n), DpConfig(1.0, sigma, mu), np.random.default_rng(0))
    assert abs(noise.mean() - mu) < 4 * sigma / np.sqrt(n)
    assert abs(noise.std() - sigma) < 4 * sigma / np.sqrt(2 * n)


def test_laplace_noise_variance_is_two_b_squared():
    n, b = 100_000, 0.2
    noise = dp_laplace(np.zeros(n), DpConfig(1.0, b), np.random.default_rng(1))
    assert abs(noise.mean()) < 4 * np.sqrt(2) * b / np.sqrt(n)
    assert abs(noise.var() - 2 * b * b) < 4 * np.sqrt(20) * b * b / np.sqrt(n)


def test_tiny_noise_limit_equals_clip():
    g = np.random.default_rng(2).normal(size=50) * 10
    for fn in (dp_gaussian, dp_laplace):
        assert np.allclose(fn(g, DpConfig(3.0, 1e-15), 0), clip(g, 3.0), atol=1e-12)


def test_noise_is_seeded():
    g = np.ones(10)
    a = dp_gaussian(g, DpConfig(1.0, 0.1), 7)
    assert np.array_equal(a, dp_gaussian(g, DpConfig(1.0, 0.1), 7))


# ---------------------------------------------------------------------------
# masking defenses


def test_sparsify_example():
    assert np.array_equal(sparsify(np.array([3.0, -1.0, 0.5, 2.0]), 0.5), [3.0, 0.0, 0.0, 2.0])


def test_sparsify_ties_prune_lower_index_first():
    assert np.array_equal(sparsify(np.array([1.0, -1.0, 1.0, 5.0]), 0.5), [0.0, 0.0, 1.0, 5.0])


def test_sparsify_counts_and_survivors():
    rng = np.random.default_rng(3)
    u = ModelUpdate(0, 1, (rng.normal(size=(5, 4)), rng.normal(size=7)))
    for p in (0.0, 0.1, 0.37, 0.9):
        out = sparsify(u, p).flat()
        zeroed = np.flatnonzero(out != u.flat())
        assert zeroed.size == int(np.floor(p * 27))
        keep = out != 0
        assert np.array_equal(out[keep], u.flat()[keep])
        if zeroed.size:
            assert np.abs(u.flat()[zeroed]).max() <= np.abs(u.flat()[keep]).min()


def test_sparsify_rate_bounds():
    with pytest.raises(ConfigError):
        sparsify(np.ones(3), 1.0)


def soteria_setup():
    spec = MlpSpec(5, (6, 4, 2), activation="tanh", seed=1)
    w = init_model(spec)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    u = ModelUpdate(0, 1, tuple(rng.normal(size=a.shape) for a in w))
    return spec, w, x, u


@pytest.mark.parametrize("ratio", [0.1, 0.5, 0.75])
def test_soteria_zeroes_exactly_ceil_rows_of_the_defended_layer(ratio):
    spec, w, x, u = soteria_setup()
    out = soteria(u, w, spec, x, SoteriaConfig(ratio))
    layer = 2  # default: the last layer, fed by the width-4 representation
    rows = np.flatnonzero(np.all(out.layers[2 * layer] == 0, axis=1))
    assert rows.size == int(np.ceil(ratio * 4))
    for i, (a, b) in enumerate(zip(out.layers, u.layers)):
        if i != 2 * layer:
            assert np.array_equal(a, b)
    kept = np.setdiff1d(np.arange(4), rows)
    assert np.array_equal(out.layers[2 * layer][kept], u.layers[2 * layer][kept])


def test_soteria_zero_ratio_is_identity():
    spec, w, x, u = soteria_setup()
    out = soteria(u, w, spec, x, SoteriaConfig(0.0))
    assert np.array_equal(out.flat(), u.flat())


def test_soteria_rejects_bad_layer():
    spec, w, x, u = soteria_setup()
    for layer in (0, 3):
        with pytest.raises(ConfigError):
            soteria(u, w, spec, x, SoteriaConfig(0.5, defend_layer=layer))


def test_soteria_prunes_highest_impact_units():
    from recupfl.defenses.baselines import representation_scores

    spec, w, x, u = soteria_setup()
    scores = representation_scores(w, spec, x, 2)

    def rep(xx, i):
        h = np.tanh(xx @ w[0] + w[1])
        return np.tanh(h @ w[2] + w[3])[i]

    expect = np.zeros(4)
    for s in range(len(x)):
        for i in range(4):
            grad = central_difference(lambda v: rep(v, i), x[s])
            expect[i] += abs(rep(x[s], i)) / max(np.linalg.norm(grad), 1e-12)
    assert np.allclose(scores, expect / len(x), rtol=1e-6)
    out = soteria(u, w, spec, x, SoteriaConfig(0.25))
    assert np.all(out.layers[4][np.argmax(expect)] == 0)


# ---------------------------------------------------------------------------
# RecUP


def linear_zoo(num_params, members, seed=0, window=1):
    rng = np.random.default_rng(seed)
    feature_dim = -(-num_params // window)
    out = []
    for _ in range(members):
        spec = MlpSpec(feature_dim, (2,), seed=0)
        out.append(ZooMember(spec, [rng.normal(size=(feature_dim, 2)), rng.normal(size=2)]))
    return ModelZoo(out, feature_dim, "a", 2, layer_sizes=(num_params,), pool_window=window)


def closed_form_grad(member, u, label):
    """CE input-gradient of a linear softmax model on |u| (window 1, no scaling)."""
    w, b = member.weights
    z = np.abs(u) @ w + b
    p = np.exp(z - z.max())
    p /= p.sum()
    return np.sign(u) * (w @ (p - np.eye(2)[label]))


def test_recup_single_matches_closed_form_linear_oracle():
    rng = np.random.default_rng(5)
    u = rng.normal(size=12)
    one = linear_zoo(12, 1, seed=1)
    zoo = ModelZoo([one.members[0]] * 2, 12, "a", 2, layer_sizes=(12,), pool_window=1)
    eps = 0.05
    delta = recup_single(u, 1, zoo, RecupConfig(eps, iterations=1, sampled=2), rng=0)
    m = zoo.members[0]
    x = u + eps / 2 * np.sign(closed_form_grad(m, u, 1))
    assert np.array_equal(delta, eps * np.sign(closed_form_grad(m, x, 1)))


def test_zero_epsilon_gives_zero_delta():
    zoo = linear_zoo(10, 5)
    delta = recup_single(np.random.default_rng(0).normal(size=10), 0, zoo, RecupConfig(0.0), rng=1)
    assert np.array_equal(delta, np.zeros(10))


def test_delta_sup_norm_bounded_on_random_updates():
    zoo = linear_zoo(20, 6, window=3)
    rng = np.random.default_rng(6)
    cfg = RecupConfig(0.01, iterations=4, sampled=3)
    for i in range(100):
        delta = recup_single(rng.normal(size=20) * rng.uniform(0.01, 10), int(rng.integers(2)), zoo, cfg, rng=i)
        assert np.abs(delta).max() <= cfg.iterations * cfg.epsilon + 1e-15


def test_recup_is_deterministic_and_shape_preserving():
    zoo = linear_zoo(14, 5)
    u = ModelUpdate(3, 2, (np.random.default_rng(1).normal(size=(3, 4)), np.ones(2)))
    a = recup_single(u, 1, zoo, RecupConfig(0.1), rng=4)
    b = recup_single(u, 1, zoo, RecupConfig(0.1), rng=4)
    assert a.shapes == u.shapes
    assert np.array_equal(a.flat(), b.flat())


def test_recup_errors():
    zoo = linear_zoo(10, 3)
    u = np.ones(10)
    with pytest.raises(ConfigError):
        recup_single(u, 0, zoo, RecupConfig(0.1, sampled=5), rng=0)
    with pytest.raises(ConfigError):
        RecupConfig(0.1, sampled=1)
    with pytest.raises(DataError):
        recup_single(u, 2, zoo, RecupConfig(0.1, sampled=2), rng=0)
    with pytest.raises(ConfigError):
        recup_single(np.ones(11), 0, zoo, RecupConfig(0.1, sampled=2), rng=0)


def test_batch_rows_are_independent_of_each_other():
    zoo = linear_zoo(10, 6)
    rng = np.random.default_rng(7)
    u = rng.normal(size=(4, 10))
    labels = np.array([0, 1, 1, 0])
    cfg = RecupConfig(0.05, iterations=3, sampled=3)
    gens = lambda: [np.random.default_rng(s) for s in range(4)]
    full = recup_batch(u, labels, zoo, cfg, gens())
    for i in range(4):
        alone = recup_batch(u[i : i + 1], labels[i : i + 1], zoo, cfg, [gens()[i]])
        assert np.array_equal(alone[0], full[i])


def test_multi_with_single_attribute_equals_single():
    zoo = linear_zoo(10, 5)
    u = np.random.default_rng(8).normal(size=10)
    cfg = RecupConfig(0.02, iterations=2, sampled=3)
    multi = recup_multi(u, {"a": 1}, [AttributeSpec("a", 1.0)], {"a": zoo}, cfg, seed=9)
    single = recup_single(u, 1, zoo, cfg, rng=np.random.default_rng(attribute_seed(9, "a")))
    assert np.array_equal(multi, u + single)


def test_multi_weights_are_normalized_and_zero_weight_is_inert():
    za, zb = linear_zoo(10, 5, seed=1), linear_zoo(10, 5, seed=2)
    zb.attribute = "b"
    u = np.random.default_rng(9).normal(size=10)
    cfg = RecupConfig(0.02, iterations=2, sampled=3)
    only_a = recup_multi(u, {"a": 0, "b": 1}, [AttributeSpec("a", 1.0), AttributeSpec("b", 0.0)], {"a": za, "b": zb}, cfg, 3)
    alone = recup_multi(u, {"a": 0}, [AttributeSpec("a", 1.0)], {"a": za}, cfg, 3)
    assert np.array_equal(only_a, alone)
    scaled = recup_multi(u, {"a": 0, "b": 1}, [AttributeSpec("a", 2.0), AttributeSpec("b", 2.0)], {"a": za, "b": zb}, cfg, 3)
    half = recup_multi(u, {"a": 0, "b": 1}, [AttributeSpec("a", 0.5), AttributeSpec("b", 0.5)], {"a": za, "b": zb}, cfg, 3)
    assert np.array_equal(scaled, half)
    da = recup_single(u, 0, za, cfg, rng=np.random.default_rng(attribute_seed(3, "a")))
    db = recup_single(u, 1, zb, cfg, rng=np.random.default_rng(attribute_seed(3, "b")))
    assert np.allclose(half, u + 0.5 * da + 0.5 * db, atol=0)


def test_linear_member_meta_test_step_never_decreases_its_loss():
    zoo = linear_zoo(16, 6, seed=3)
    rng = np.random.default_rng(10)
    for trial in range(50):
        u = rng.normal(size=16)
        trace = RecupTrace()
        recup_single(u, int(rng.integers(2)), zoo, RecupConfig(1e-3, iterations=3, sampled=3), rng=trial, trace=trace)
        for steps in trace.steps:
            for members, before, after in steps:
                assert after[0] >= before[0] - 1e-12


def test_alignment_is_reported_per_iteration():
    zoo = linear_zoo(10, 5)
    trace = RecupTrace()
    recup_single(np.random.default_rng(2).normal(size=10), 0, zoo, RecupConfig(0.01, iterations=4, sampled=3), rng=0, trace=trace)
    assert len(trace.alignment) == 4
    assert all(-1.0 <= a[0] <= 1.0 or np.isnan(a[0]) for a in trace.alignment)


def test_alignment_diagnostic_cases():
    a = np.array([1.0, 2.0, -1.0])
    assert alignment_diagnostic(a, a) == pytest.approx(1.0)
    assert alignment_diagnostic(a, -a) == pytest.approx(-1.0)
    assert alignment_diagnostic(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert alignment_diagnostic(np.zeros(3), a) is None


# ---------------------------------------------------------------------------
# FGSM variants


@pytest.mark.parametrize("variant", ["one-step", "average", "iterative", "momentum"])
def test_variants_with_zero_budget_are_identity(variant):
    zoo = linear_zoo(10, 5)
    u = np.random.default_rng(0).normal(size=10)
    assert np.array_equal(fgsm_variant(u, 1, zoo, 0.0, 3, variant, rng=0), u)


def test_average_over_identical_members_equals_one_step():
    one = linear_zoo(10, 1)
    zoo = ModelZoo([one.members[0]] * 4, 10, "a", 2, layer_sizes=(10,), pool_window=1)
    u = np.random.default_rng(1).normal(size=10)
    assert np.array_equal(fgsm_variant(u, 0, zoo, 0.1, 4, "average", 0), fgsm_variant(u, 0, zoo, 0.1, 4, "one-step", 0))


def test_momentum_uses_l1_normalized_accumulation():
    one = linear_zoo(6, 1, seed=4)
    zoo = ModelZoo([one.members[0]] * 2, 6, "a", 2, layer_sizes=(6,), pool_window=1)
    u = np.random.default_rng(2).normal(size=6)
    eps = 0.2
    m = zoo.members[0]
    g1 = closed_form_grad(m, u, 1)
    v = g1 / np.abs(g1).sum()
    x = u + eps / 2 * np.sign(v)
    g2 = closed_form_grad(m, x, 1)
    v = 0.9 * v + g2 / np.abs(g2).sum()
    assert np.allclose(fgsm_variant(u, 1, zoo, eps, 2, "momentum", 0), x + eps / 2 * np.sign(v))


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        fgsm_variant(np.ones(10), 0, linear_zoo(10, 3), 0.1, 2, "pgd", 0)


# ---------------------------------------------------------------------------
# FL adapter


def test_recup_adapter_batch_equals_per_client_calls():
    spec = MlpSpec(16, (2,))
    w = init_model(spec)
    zoo = linear_zoo(spec.num_params, 5)
    zoo.attribute = "a0"
    data = synth_generate(SynthSpec(), 6, seed=0)
    d = RecupDefense([AttributeSpec("a0")], {"a0": zoo}, RecupConfig(0.01, iterations=2, sampled=3), seed=1)
    rng = np.random.default_rng(3)
    ups = [ModelUpdate(c, 1, tuple(rng.normal(size=a.shape) for a in w)) for c in range(3)]
    ctxs = [ClientContext(c, 1, data.take([2 * c, 2 * c + 1]), tuple(w), spec, 0) for c in range(3)]
    batch = d.apply_batch(ups, ctxs)
    for u, c, b in zip(ups, ctxs, batch):
        assert np.array_equal(d(u, c).flat(), b.flat())


def test_pool_sees_the_perturbation():
    zoo = linear_zoo(12, 5, window=4)
    u = np.random.default_rng(4).normal(size=12)
    delta = recup_single(u, 0, zoo, RecupConfig(0.5, iterations=1, sampled=2), rng=0)
    assert not np.array_equal(pool_matrix(u + delta, (12,), 4), pool_matrix(u, (12,), 4))
