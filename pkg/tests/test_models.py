"""Architecture grammar, geometry validation, forward semantics and the
family enumeration grids."""

import numpy as np
import pytest

from ircount.models import (
    ArchError,
    ModelSpec,
    build_model,
    enumerate_family,
    enumerate_sf,
    majority_vote,
    parse_arch,
    plan_layers,
)

TABLE_STRINGS = [
    "lstm:w3:C8-P-C8-L16-FC",
    "cat:w3:C8-P-C8-Cat-FC",
    "mc:w3:C8-P-C16-FC",
    "mv:w5:C8-P-FC",
    "sf:w1:C8-P-FC",
    "mv:w5:C8-P-C8-FC-FC",
    "mc:w3:C8-P-C8-FC",
]


# -- parsing -----------------------------------------------------------


def test_parse_mc_example():
    spec = parse_arch("mc:w3:C8-P-C16-FC")
    assert spec.family == "mc" and spec.window == 3
    plan = plan_layers(spec)
    assert [p.op for p in plan] == ["conv", "pool", "conv", "fc"]
    assert plan[0].c_in == 3  # frames stacked as input channels
    assert plan[2].c_out == 16
    assert plan[-1].c_out == 4


def test_parse_lstm_example():
    spec = parse_arch("lstm:w3:C8-P-C8-L16-FC")
    plan = plan_layers(spec)
    lstm = [p for p in plan if p.op == "lstm"]
    assert len(lstm) == 1 and lstm[0].c_out == 16


@pytest.mark.parametrize("text", TABLE_STRINGS)
def test_reference_architecture_strings_parse(text):
    parse_arch(text)


def test_parse_round_trip():
    for text in TABLE_STRINGS:
        spec = parse_arch(text)
        assert parse_arch(str(spec)) == spec


def test_bare_hidden_fc_means_64():
    spec = parse_arch("mc:w3:C8-P-C8-FC-FC")
    assert "FC64" in spec.tokens


@pytest.mark.parametrize(
    "text",
    [
        "sf:w3:C8-FC",  # sf requires W=1
        "sf:w1:C8-Q-FC",  # unknown token
        "sf:w1:C8-C8-C8-FC",  # third conv
        "mc:w4:C8-FC",  # even window
        "mc:w3:C8-Cat-FC",  # Cat outside cat family
        "cat:w3:C8-P-FC",  # missing Cat token
        "lstm:w3:C8-P-FC",  # missing L token
        "sf:w1:C8-P-C8-P-FC",  # second pool
        "sf:w1:C8-C8-P-FC",  # pool not after first conv
        "sf:w1:FC",  # no conv
        "sf:w1:C8-FC64",  # missing terminal FC
        "sf:w1:C8-FC16-FC64-FC",  # two hidden FCs
        "tcn:w2:C8-T8-FC",  # even window
        "nope:w1:C8-FC",  # unknown family
    ],
)
def test_invalid_architectures(text):
    with pytest.raises(ArchError):
        parse_arch(text)


def test_geometry_second_conv_after_pool_is_1x1():
    plan = plan_layers(parse_arch("sf:w1:C8-P-C16-FC"))
    assert plan[2].out_hw == (1, 1)
    assert plan[-1].c_in == 16


# -- enumeration -------------------------------------------------------


def test_sf_grid_counts():
    assert len(enumerate_sf("full")) == 80
    assert len(enumerate_sf("sf-paper")) == 48


def test_enumerated_specs_all_validate():
    for spec in enumerate_sf("full"):
        plan_layers(spec)  # must not raise


def test_mc_grid_crosses_windows():
    specs = enumerate_family("mc", windows=(3, 5, 7, 9), preset="sf-paper")
    assert len(specs) == 4 * 48


def test_lstm_grid_4x4xN():
    specs = enumerate_family("lstm", extractors=["C8-P", "C8-P-C8", "C16"])
    assert len(specs) == 4 * 4 * 3


def test_mv_grid_is_variants_times_windows():
    specs = enumerate_family("mv", extractors=["C8-P-FC", "C8-P-C8-FC64-FC"])
    assert len(specs) == 2 * 4


def test_dependent_family_needs_extractors():
    with pytest.raises(ValueError):
        enumerate_family("cat", extractors=[])


# -- forward semantics -------------------------------------------------


def test_build_determinism():
    a = build_model(parse_arch("lstm:w3:C8-P-C8-L16-FC"), seed=5)
    b = build_model(parse_arch("lstm:w3:C8-P-C8-L16-FC"), seed=5)
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb and np.array_equal(pa, pb)


def test_parameter_count_examples():
    m = build_model(parse_arch("sf:w1:C8-P-FC"), seed=0)
    assert sum(p.size for _, p in m.parameters()) == 388
    m = build_model(parse_arch("lstm:w3:C8-P-C8-L16-FC"), seed=0)
    assert sum(p.size for _, p in m.parameters()) == 2364


def test_mc_w1_equals_sf(rng):
    tokens = "C8-P-C16-FC"
    sf = build_model(parse_arch(f"sf:w1:{tokens}"), seed=9)
    mc = build_model(parse_arch(f"mc:w1:{tokens}"), seed=9)
    x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    assert np.allclose(sf.logits(x), mc.logits(x), atol=1e-6)


def test_infer_forward_is_pure(rng):
    m = build_model(parse_arch("cat:w3:C8-P-Cat-FC16-FC"), seed=3)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(m.logits(x), m.logits(x))


def test_prediction_probabilities_sum_to_one(rng):
    m = build_model(parse_arch("tcn:w3:C8-P-T8-FC"), seed=2)
    x = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
    for p in m.predict(x):
        assert np.isclose(p.probabilities.sum(), 1.0, atol=1e-6)
        assert 0 <= p.count < 4


def test_window_shape_validated(rng):
    m = build_model(parse_arch("mc:w3:C8-P-FC"), seed=0)
    with pytest.raises(ValueError):
        m.logits(rng.normal(size=(2, 5, 8, 8)))


# -- majority voting ---------------------------------------------------


def _logits_for_votes(votes, k=4):
    out = np.full((len(votes), k), -5.0)
    for i, v in enumerate(votes):
        out[i, v] = 5.0
    return out


def test_mv_unanimous():
    assert majority_vote(_logits_for_votes([2, 2, 2])).count == 2


def test_mv_strict_majority():
    pred = majority_vote(_logits_for_votes([1, 1, 2]))
    assert pred.count == 1
    assert pred.votes == [1, 1, 2]


def test_mv_tie_goes_to_larger_softmax_mass():
    # classes 1 and 2 tie 2-2; class 2's votes are more confident
    logits = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 9.0, 0.0],
            [0.0, 0.0, 9.0, 0.0],
            [9.0, 0.0, 0.0, 0.0],
        ]
    )
    assert majority_vote(logits).count == 2


def test_mv_exact_tie_falls_back_to_smaller_count():
    logits = np.array(
        [
            [0.0, 3.0, 0.0, 0.0],
            [0.0, 0.0, 3.0, 0.0],
        ]
    )
    # identical confidences, 1-1 tie -> smaller class id wins
    assert majority_vote(logits).count == 1


def test_mv_permutation_invariance(rng):
    m = build_model(parse_arch("mv:w5:C8-P-FC"), seed=1)
    x = rng.normal(size=(1, 5, 8, 8)).astype(np.float32)
    base = m.predict(x)[0].count
    for _ in range(5):
        perm = rng.permutation(5)
        assert m.predict(x[:, perm])[0].count == base


def test_mv_even_window_rejected():
    with pytest.raises(ArchError):
        ModelSpec("mv", 4, ("C8", "P", "FC")) and parse_arch("mv:w4:C8-P-FC")
