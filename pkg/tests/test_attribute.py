import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_toy_universe
from ddnlab import attribute, demands
from ddnlab.attribute import (AttributeEncoder, build_do_feature, classify_pair,
                              clustering_report, construct_pairs, encode,
                              info_nce_loss, train_attribute)
from ddnlab.config import AttributeHyper, smoke_config
from ddnlab.errors import (DimMismatch, InsufficientNegatives,
                           InvalidTemperature)
from ddnlab.nets import load_checkpoint, max_grad_rel_err, save_checkpoint


def fig2_universe():
    """Three demands; objects a..i (ids 0..8), three per demand, disjoint."""
    return make_toy_universe({c: (c // 3,) for c in range(9)}, n_demands=3)


def full_lg(universe):
    return {d.demand_id: tuple(demands.satisfying_categories(universe,
                                                             d.demand_id))
            for d in universe.demands}


# ---------------------------------------------------------------------------
# Demand-object features

def test_build_do_feature_zero_and_basis():
    z = build_do_feature(np.zeros(32), np.zeros(16))
    assert z.shape == (48,) and not z.any()
    e = build_do_feature(np.eye(32)[0], np.eye(16)[0])
    assert set(np.nonzero(e)[0].tolist()) == {0, 32}
    d = np.arange(32.0)
    o = np.arange(16.0) + 100
    f = build_do_feature(d, o)
    assert np.array_equal(f[:32], d) and np.array_equal(f[32:], o)


def test_build_do_feature_dim_mismatch():
    with pytest.raises(DimMismatch):
        build_do_feature(np.zeros(31), np.zeros(16))
    with pytest.raises(DimMismatch):
        build_do_feature(np.zeros(32), np.zeros(17))


# ---------------------------------------------------------------------------
# Pair rules

def test_fig2_positive_pairs():
    u = fig2_universe()
    # objects 0, 1, 2 satisfy demand 0
    positives = {(0, o2) for o2 in range(9)
                 if classify_pair(u, (0, 0), (0, o2)) == "positive"}
    assert positives == {(0, 1), (0, 2)}


def test_fig2_negative_types_verbatim():
    u = fig2_universe()
    anchor = (0, 0)                                   # DO1-a
    assert classify_pair(u, anchor, (0, 3)) == "neg1"  # DO1-d
    assert classify_pair(u, anchor, (1, 0)) == "neg2"  # DO2-a
    assert classify_pair(u, anchor, (1, 2)) == "neg3"  # DO2-c
    assert classify_pair(u, anchor, (0, 0)) is None


def test_same_object_both_satisfied_is_unlabeled():
    u = make_toy_universe({0: (0, 1), 1: (0,)}, n_demands=2)
    # object 0 satisfies both demands: the pair fits no rule
    assert classify_pair(u, (0, 0), (1, 0)) is None


def test_classify_pair_matches_rule_oracle_on_random_toys():
    rng = np.random.default_rng(0)
    for trial in range(5):
        n_dem = int(rng.integers(2, 6))
        n_obj = int(rng.integers(2, 7))
        sat_sets = {}
        for c in range(n_obj):
            size = int(rng.integers(1, min(4, n_dem) + 1))
            sat_sets[c] = tuple(rng.choice(n_dem, size=size, replace=False))
        u = make_toy_universe(sat_sets, n_demands=n_dem)
        for d in range(n_dem):
            for o in range(n_obj):
                if not demands.satisfies(u, d, o):
                    continue
                for d2 in range(n_dem):
                    for o2 in range(n_obj):
                        got = classify_pair(u, (d, o), (d2, o2))
                        want = oracles.pair_label_oracle(u, (d, o), (d2, o2))
                        assert got == want


def test_construct_pairs_labels_and_types():
    u = fig2_universe()
    lg = full_lg(u)
    batch = construct_pairs(u, lg, m_negatives=6, batch_size=16,
                            rng=np.random.default_rng(1))
    assert batch.anchors.shape == (16, 48)
    assert batch.negatives.shape == (16, 6, 48)
    for b in range(16):
        anchor = batch.anchor_keys[b]
        assert classify_pair(u, anchor, batch.positive_keys[b]) == "positive"
        for j, key in enumerate(batch.negative_keys[b]):
            want = f"neg{batch.negative_types[b, j]}"
            assert classify_pair(u, anchor, key) == want
    assert set(np.unique(batch.negative_types)) == {1, 2, 3}


def test_construct_pairs_insufficient_negatives():
    # both categories satisfy both demands: no type-1 negatives exist
    u = make_toy_universe({0: (0, 1), 1: (0, 1)}, n_demands=2)
    lg = full_lg(u)
    with pytest.raises(InsufficientNegatives):
        construct_pairs(u, lg, m_negatives=2, batch_size=4,
                        rng=np.random.default_rng(0), neg_types=(1,))
    # type 3 still works
    batch = construct_pairs(u, lg, m_negatives=2, batch_size=4,
                            rng=np.random.default_rng(0), neg_types=(3,))
    assert np.all(batch.negative_types == 3)


def test_construct_pairs_requires_two_objects_per_demand():
    u = fig2_universe()
    lg = full_lg(u)
    lg[0] = (0,)
    with pytest.raises(ValueError):
        construct_pairs(u, lg, m_negatives=2, batch_size=2,
                        rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Encoder

def test_encode_unit_norm_and_deterministic():
    torch.manual_seed(0)
    enc = AttributeEncoder()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(48)
    a = encode(enc, x)
    b = encode(enc, x)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_encode_always_unit_norm(seed):
    torch.manual_seed(0)
    enc = AttributeEncoder()
    x = np.random.default_rng(seed).standard_normal(48) * 3.0
    assert np.linalg.norm(encode(enc, x)) == pytest.approx(1.0, abs=1e-6)


def test_batched_encode_equals_single_calls():
    torch.manual_seed(1)
    enc = AttributeEncoder()
    xs = np.random.default_rng(2).standard_normal((32, 48))
    batched = encode(enc, xs)
    singles = np.stack([encode(enc, x) for x in xs])
    assert np.max(np.abs(batched - singles)) < 1e-7


def test_output_scale_invariance():
    """Scaling the pre-normalization output layer leaves features unchanged."""
    torch.manual_seed(2)
    enc = AttributeEncoder()
    x = np.random.default_rng(3).standard_normal((8, 48))
    before = encode(enc, x)
    with torch.no_grad():
        enc.output_proj.weight.mul_(3.7)
        enc.output_proj.bias.mul_(3.7)
    after = encode(enc, x)
    assert np.allclose(before, after, atol=1e-6)


def test_encoder_dim_mismatch():
    enc = AttributeEncoder()
    with pytest.raises(DimMismatch):
        enc(torch.zeros(4, 47))


# ---------------------------------------------------------------------------
# Loss

def _unit(v):
    t = torch.tensor(v, dtype=torch.float64)
    return t / t.norm(dim=-1, keepdim=True)


def test_info_nce_symmetric_case_is_ln2():
    a = _unit([[1.0, 0.0, 0.0]])
    p = _unit([[0.0, 1.0, 0.0]])
    n = _unit([[[0.0, 0.0, 1.0]]])
    loss = info_nce_loss(a, p, n, temperature=1.0)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_info_nce_separated_case():
    a = _unit([[1.0, 0.0]])
    p = _unit([[1.0, 0.0]])
    n = _unit([[[-1.0, 0.0]]])
    loss = info_nce_loss(a, p, n, temperature=1.0)
    assert loss.item() == pytest.approx(0.126928, abs=1e-6)


def test_info_nce_low_temperature_limit():
    a = _unit([[1.0, 0.0]])
    p = _unit([[1.0, 0.0]])
    n = _unit([[[-1.0, 0.0]]])
    assert info_nce_loss(a, p, n, temperature=1e-3).item() < 1e-6


def test_info_nce_equal_similarities_lower_bound():
    a = _unit([[1.0, 0.0]])
    p = _unit([[0.0, 1.0]])
    m = 7
    n = _unit([[[0.0, 1.0]] * m])
    loss = info_nce_loss(a, p, n, temperature=0.37)
    assert loss.item() == pytest.approx(math.log(1 + m), abs=1e-9)


def test_info_nce_invalid_temperature():
    a = _unit([[1.0, 0.0]])
    with pytest.raises(InvalidTemperature):
        info_nce_loss(a, a, _unit([[[0.0, 1.0]]]), temperature=0.0)


def test_info_nce_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for draw in range(5):
        torch.manual_seed(draw)
        enc = AttributeEncoder(input_dim=10, hidden_dim=12, depth=1,
                               output_dim=6).double()
        a = torch.tensor(rng.standard_normal((4, 10)))
        p = torch.tensor(rng.standard_normal((4, 10)))
        n = torch.tensor(rng.standard_normal((4, 3, 10)))
        err = max_grad_rel_err(
            enc, lambda: info_nce_loss(enc(a), enc(p), enc(n), 0.1),
            rng, n_coords=30)
        worst = max(worst, err)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# Training and diagnostics

@pytest.fixture(scope="module")
def trained_smoke(smoke_universe):
    lg = demands.build_lg_mappings(smoke_universe, 10, seed=3)
    torch.manual_seed(7)
    enc = AttributeEncoder()
    hyper = smoke_config().attribute
    history = train_attribute(enc, smoke_universe, lg, hyper, seed=8)
    return enc, history, lg


def test_training_loss_decreases(trained_smoke):
    _enc, history, _lg = trained_smoke
    assert np.mean(history[-30:]) < np.mean(history[:30])


def test_training_zero_lr_keeps_parameters(smoke_universe):
    lg = demands.build_lg_mappings(smoke_universe, 10, seed=3)
    torch.manual_seed(9)
    enc = AttributeEncoder()
    before = [p.detach().clone() for p in enc.parameters()]
    hyper = dataclasses.replace(smoke_config().attribute, steps=20, lr=0.0)
    train_attribute(enc, smoke_universe, lg, hyper, seed=1)
    after = list(enc.parameters())
    assert all(torch.equal(b, a) for b, a in zip(before, after))


def test_training_deterministic(smoke_universe):
    lg = demands.build_lg_mappings(smoke_universe, 10, seed=3)
    hyper = dataclasses.replace(smoke_config().attribute, steps=40)

    def run():
        torch.manual_seed(11)
        enc = AttributeEncoder()
        history = train_attribute(enc, smoke_universe, lg, hyper, seed=5)
        return [p.detach().clone() for p in enc.parameters()], history

    pa, ha = run()
    pb, hb = run()
    assert ha == hb
    assert all(torch.equal(a, b) for a, b in zip(pa, pb))


def test_constant_encoder_has_zero_gap(smoke_universe):
    lg = {d: o for d, o in
          demands.build_lg_mappings(smoke_universe, 10, seed=3).items()
          if len(o) >= 2}
    enc = AttributeEncoder()
    with torch.no_grad():
        enc.output_proj.weight.zero_()
        enc.output_proj.bias.copy_(torch.arange(32, dtype=torch.float32))
    report = clustering_report(enc, smoke_universe, lg)
    assert report.gap == pytest.approx(0.0, abs=1e-6)


def test_untrained_gap_is_small():
    from ddnlab.config import desk_config
    gaps = []
    for seed in range(5):
        u = demands.generate_universe(desk_config().universe, seed=seed)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lg = demands.build_lg_mappings(u, 10, seed=seed)
        lg = {d: o for d, o in lg.items() if len(o) >= 2}
        torch.manual_seed(100 + seed)
        enc = AttributeEncoder()
        gaps.append(clustering_report(enc, u, lg).gap)
    assert abs(float(np.mean(gaps))) < 0.05


def test_trained_gap_beats_untrained(trained_smoke, smoke_universe):
    enc, _history, lg = trained_smoke
    usable = {d: o for d, o in lg.items() if len(o) >= 2}
    report = clustering_report(enc, smoke_universe, usable)
    assert report.gap >= 0.2
    assert report.pca_coords.shape == (len(report.feature_keys), 2)
    assert set(report.per_demand) == set(usable)


def test_checkpoint_round_trip(tmp_path, trained_smoke):
    enc, _history, _lg = trained_smoke
    path = tmp_path / "attr.json"
    save_checkpoint(str(path), enc, {"kind": "attribute_encoder"})
    torch.manual_seed(0)
    fresh = AttributeEncoder()
    meta = load_checkpoint(str(path), fresh)
    assert meta["kind"] == "attribute_encoder"
    x = np.random.default_rng(0).standard_normal((4, 48))
    assert np.allclose(encode(enc, x), encode(fresh, x), atol=1e-7)
    path2 = tmp_path / "attr2.json"
    save_checkpoint(str(path2), fresh, {"kind": "attribute_encoder"})
    assert path.read_text() == path2.read_text()
