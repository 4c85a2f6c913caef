"""Model construction, forward semantics, and serialization tests."""

import json

import numpy as np
import pytest

from mdrank.autodiff import ShapeError
from mdrank.data import Item, QuerySession
from mdrank.models import (
    ConfigError,
    ModelConfig,
    ModelLoadError,
    Variant,
    build,
    count_parameters,
    forward,
    load,
    save,
)
from tests.conftest import make_session, tiny_config


# ---------------------------------------------------------------------------
# closed-form parameter arithmetic (the oracle for count_parameters)


def _dense_params(dims):
    """Scalar count of a dense stack: weights plus biases per layer."""
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def _expected_counts(cfg: ModelConfig):
    """(total, deployed) from layer-size arithmetic alone."""
    f, h, d = cfg.feature_dim, cfg.trunk_hidden[-1], cfg.token_dim
    shared = _dense_params((f, *cfg.trunk_hidden))
    shared += _dense_params((h, 1))            # pointwise score layer
    shared += _dense_params((h + 1, d))        # token projection
    per_layer = 2 * d + 3 * d * d + _dense_params((d, d)) + 2 * d + _dense_params((d, d, d))
    shared += cfg.transformer_layers * per_layer
    head = _dense_params((1 + d, *cfg.final_hidden, 1))
    classifier = _dense_params((h, *cfg.classifier_hidden, cfg.n_domains))

    if cfg.variant is Variant.MULTI_HEAD:
        total = shared + cfg.n_domains * head
        return total, total
    if cfg.variant is Variant.BASELINE:
        total = shared + head
        return total, total
    total = shared + head + classifier
    return total, total - classifier


@pytest.mark.parametrize("variant", ["baseline", "multihead", "domain_adversarial", "domain_specialist"])
@pytest.mark.parametrize("n_domains", [2, 3, 5])
def test_parameter_counts_match_closed_form(variant, n_domains):
    cfg = tiny_config(variant, n_domains=n_domains)
    model = build(cfg, seed=0)
    total, deployed = _expected_counts(cfg)
    assert count_parameters(model) == total
    assert count_parameters(model, deployed=True) == deployed
    assert count_parameters(model, deployed=True) <= count_parameters(model)
    # the count really is the number of stored scalars
    assert total == sum(t.values.size for t in model.parameters.values())


@pytest.mark.parametrize("n_domains", [2, 3, 5])
def test_specialist_deployed_count_equals_baseline(n_domains):
    base = build(tiny_config("baseline", n_domains=n_domains), seed=0)
    dds = build(tiny_config("domain_specialist", n_domains=n_domains), seed=0)
    assert count_parameters(dds, deployed=True) == count_parameters(base)


def test_specialist_deployed_count_independent_of_domains():
    counts = {
        n: count_parameters(build(tiny_config("domain_specialist", n_domains=n), seed=0), deployed=True)
        for n in (2, 3, 5)
    }
    assert len(set(counts.values())) == 1


def test_multihead_count_grows_linearly_in_domains():
    head = _dense_params((1 + 4, 5, 1))  # token_dim=4, final_hidden=(5,) in tiny_config
    counts = {
        n: count_parameters(build(tiny_config("multihead", n_domains=n), seed=0))
        for n in (2, 3, 5)
    }
    assert counts[3] - counts[2] == head
    assert counts[5] - counts[2] == 3 * head


def test_adversarial_and_specialist_have_equal_counts():
    # the reversal node holds no parameters
    a = build(tiny_config("domain_adversarial"), seed=3)
    s = build(tiny_config("domain_specialist"), seed=3)
    assert count_parameters(a) == count_parameters(s)
    assert set(a.parameters) == set(s.parameters)


# ---------------------------------------------------------------------------
# deterministic construction


def test_build_is_deterministic():
    cfg = tiny_config("domain_adversarial")
    m1 = build(cfg, seed=42)
    m2 = build(cfg, seed=42)
    assert set(m1.parameters) == set(m2.parameters)
    for name in m1.parameters:
        assert np.array_equal(m1.parameters[name].values, m2.parameters[name].values)


def test_build_differs_across_seeds():
    cfg = tiny_config()
    m1 = build(cfg, seed=1)
    m2 = build(cfg, seed=2)
    assert not np.array_equal(m1.parameters["trunk.0.w"].values, m2.parameters["trunk.0.w"].values)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(trunk_hidden=())
    with pytest.raises(ConfigError):
        tiny_config(trunk_hidden=(0,))
    with pytest.raises(ConfigError):
        tiny_config(token_dim=5, heads=2)  # not divisible
    with pytest.raises(ConfigError):
        tiny_config("multihead", n_domains=1)
    with pytest.raises(ConfigError):
        tiny_config("no_such_variant")


# ---------------------------------------------------------------------------
# forward semantics


def test_forward_shapes_and_finiteness(rng):
    for variant in ("baseline", "multihead", "domain_adversarial", "domain_specialist"):
        model = build(tiny_config(variant), seed=1)
        session = make_session(rng, 7, feature_dim=5, domain=1)
        scored = forward(model, session)
        assert scored.final_scores.shape == (7,)
        assert scored.pointwise_scores.shape == (7,)
        assert np.all(np.isfinite(scored.final_scores))
        if variant in ("domain_adversarial", "domain_specialist"):
            assert scored.domain_logits.shape == (7, 2)
        else:
            assert scored.domain_logits is None


def test_forward_single_item_session(rng):
    model = build(tiny_config(), seed=1)
    session = make_session(rng, 1, feature_dim=5)
    scored = forward(model, session)
    assert scored.final_scores.shape == (1,)
    assert np.isfinite(scored.final_scores[0])


def test_forward_rejects_bad_sessions(rng):
    model = build(tiny_config(), seed=1)
    with pytest.raises(ValueError):
        forward(model, QuerySession("q", 0, 0, []))
    with pytest.raises(ShapeError):
        forward(model, make_session(rng, 3, feature_dim=4))  # wrong width
    with pytest.raises(ValueError):
        forward(model, make_session(rng, 3, feature_dim=5, domain=9))


def test_multihead_ignores_other_heads_exactly(rng):
    """Scores for a domain-0 session must not move when head 1 is mangled."""
    model = build(tiny_config("multihead"), seed=5)
    session = make_session(rng, 6, feature_dim=5, domain=0)
    before = forward(model, session).final_scores.copy()

    for name, tensor in model.parameters.items():
        if name.startswith("head.1."):
            tensor.values[:] = rng.normal(scale=100.0, size=tensor.shape)
    after = forward(model, session).final_scores
    assert np.array_equal(before, after)

    # and the selected head does matter
    for name, tensor in model.parameters.items():
        if name.startswith("head.0."):
            tensor.values[:] += 1.0
    assert not np.array_equal(before, forward(model, session).final_scores)


def test_adversarial_and_specialist_forward_identically(rng):
    """The reversal node is a forward no-op, so same weights => same outputs."""
    adv = build(tiny_config("domain_adversarial"), seed=9)
    dds = build(tiny_config("domain_specialist"), seed=9)
    session = make_session(rng, 5, feature_dim=5, domain=1)
    out_a = forward(adv, session)
    out_s = forward(dds, session)
    assert np.array_equal(out_a.final_scores, out_s.final_scores)
    assert np.array_equal(out_a.domain_logits, out_s.domain_logits)


def test_forward_is_permutation_equivariant(rng):
    """No positional signal: permuting the items permutes the scores."""
    model = build(tiny_config(), seed=2)
    session = make_session(rng, 8, feature_dim=5)
    perm = rng.permutation(8)
    shuffled = QuerySession(session.query_id, session.domain, session.timestamp,
                            [session.items[i] for i in perm])
    base = forward(model, session).final_scores
    moved = forward(model, shuffled).final_scores
    assert np.allclose(moved, base[perm], atol=1e-9)


def test_forward_scores_unchanged_by_padding(rng):
    model = build(tiny_config(), seed=2)
    session = make_session(rng, 5, feature_dim=5)
    alone = forward(model, session).final_scores
    padded = forward(model, session, pad_to=12).final_scores
    assert padded.shape == (5,)
    assert np.allclose(alone, padded, atol=1e-9)


def test_forward_is_deterministic(rng):
    model = build(tiny_config("domain_specialist"), seed=4)
    session = make_session(rng, 6, feature_dim=5)
    a = forward(model, session).final_scores
    b = forward(model, session).final_scores
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip_is_lossless(rng):
    model = build(tiny_config("domain_adversarial"), seed=11)
    raw = save(model)
    clone = load(raw)
    assert clone.config == model.config
    for name in model.parameters:
        assert np.array_equal(clone.parameters[name].values, model.parameters[name].values)
    # identical bytes when saved again
    assert save(clone) == raw

    session = make_session(rng, 6, feature_dim=5)
    assert np.array_equal(forward(model, session).final_scores,
                          forward(clone, session).final_scores)


def test_save_is_deterministic():
    model = build(tiny_config(), seed=11)
    assert save(model) == save(model)


def test_load_rejects_truncated_payload():
    raw = save(build(tiny_config(), seed=1))
    with pytest.raises(ModelLoadError):
        load(raw[: len(raw) // 2])


def test_load_rejects_wrong_format_and_version():
    raw = save(build(tiny_config(), seed=1))
    obj = json.loads(raw)
    obj["format"] = "something-else"
    with pytest.raises(ModelLoadError):
        load(json.dumps(obj).encode())

    obj = json.loads(raw)
    obj["version"] = 99
    with pytest.raises(ModelLoadError):
        load(json.dumps(obj).encode())


def test_load_rejects_tampered_parameters():
    raw = save(build(tiny_config(), seed=1))
    obj = json.loads(raw)
    name = next(iter(obj["parameters"]))
    obj["parameters"][name]["values"] = obj["parameters"][name]["values"][:-1]
    with pytest.raises(ModelLoadError):
        load(json.dumps(obj).encode())

    obj = json.loads(raw)
    obj["parameters"]["not.a.real.param"] = {"shape": [1], "values": [0.0]}
    with pytest.raises(ModelLoadError):
        load(json.dumps(obj).encode())
