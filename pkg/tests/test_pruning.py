from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colt.models import ModelSpec, ParameterSet, build_model
from colt.optim import OptimizerState, optimizer_step
from colt.pruning import (
    AlignmentError,
    Mask,
    MaskEntry,
    SnapshotError,
    apply_mask,
    eligible_names,
    full_mask,
    global_prune,
    intersect,
    mask_gradients,
    pack_bits,
    prune_count,
    prune_rate,
    random_mask,
    rewind,
    shuffle_mask,
    sparsity,
    unpack_bits,
)
from colt.tensor import Tensor, softmax_cross_entropy

from oracles import lth_kept, magnitude_prune_sorted

THETA0 = np.array([[0.1, -0.2, 0.9], [-0.4, 0.6, 0.8], [0.3, 0.5, -0.7]], dtype=np.float32)
TRAINED_1 = np.array([[0.8, -0.3, 0.4], [-0.1, 0.2, 0.7], [0.9, 0.5, -0.5]], dtype=np.float32)
TRAINED_2 = np.array([[0.9, -0.7, 0.2], [-0.1, 0.4, 0.5], [0.8, 0.3, -0.6]], dtype=np.float32)


def _single(values, name="w"):
    return ParameterSet({name: Tensor(values, requires_grad=True, name=name)}, {name: "conv"}, head=(),
                        initial={name: values})


def _mask(keep, eligible=True):
    keep = np.asarray(keep, dtype=bool)
    return Mask({"w": MaskEntry(keep.shape, pack_bits(keep), eligible)})


# -- toy example -------------------------------------------------------------
def test_toy_example_round():
    m0 = Mask.ones({"w": (3, 3)}, ["w"])
    assert prune_count(0.25, 9) == 2
    m1, k1 = global_prune({"w": TRAINED_1}, m0, 0.25)
    m2, k2 = global_prune({"w": TRAINED_2}, m0, 0.25)
    assert k1 == k2 == 2
    assert m1["w"].astype(int).tolist() == [[1, 1, 1], [0, 0, 1], [1, 1, 1]]
    assert m2["w"].astype(int).tolist() == [[1, 1, 0], [0, 1, 1], [1, 1, 1]]
    m = intersect(m1, m2)
    assert m["w"].astype(int).tolist() == [[1, 1, 0], [0, 0, 1], [1, 1, 1]]
    for trained in (TRAINED_1, TRAINED_2):
        params = _single(THETA0)
        params["w"].data[...] = trained
        rewind(params, m)
        assert params["w"].data.tolist() == np.array(
            [[0.1, -0.2, 0], [0, 0, 0.8], [0.3, 0.5, -0.7]], dtype=np.float32).tolist()
    assert prune_rate(m) == 33.3


def test_prune_sort_example():
    m, k = global_prune({"w": np.array([0.5, -0.1, 0.3, -0.4, 0.2])}, Mask.ones({"w": (5,)}, ["w"]), 0.4)
    assert k == 2 and m["w"].astype(int).tolist() == [1, 0, 1, 1, 0]


def test_ties_prune_lowest_index_first():
    m, k = global_prune({"a": np.zeros(4), "b": np.zeros(4)}, Mask.ones({"a": (4,), "b": (4,)}, ["a", "b"]), 0.5)
    assert k == 4
    assert m["a"].tolist() == [False] * 4 and m["b"].tolist() == [True] * 4


def test_prune_skips_ineligible_and_already_pruned():
    m = Mask.from_arrays({"a": np.array([1, 0, 1, 1], bool), "head": np.ones(3, bool)}, ["a"])
    new, k = global_prune({"a": np.array([9.0, 0.0, 1.0, 2.0]), "head": np.zeros(3)}, m, 0.34)
    assert k == 1 and new["a"].tolist() == [True, False, False, True] and new["head"].all()
    assert new.total("eligible") == 4


def test_no_op_round_reports_zero():
    m = Mask.ones({"w": (2,)}, ["w"])
    assert global_prune({"w": np.ones(2)}, m, 0.2) == (m, 0)


def test_prune_count_is_exact_on_decimals():
    assert prune_count(0.2, 1000) == 200 and prune_count(0.15, 20) == 3 and prune_count(0.1, 30) == 3


# -- schedule recurrence --------------------------------------------------------
def test_lth_recurrence_matches_oracle():
    kept = lth_kept(1000, 0.2, 15)
    m = Mask.ones({"w": (1000,)}, ["w"])
    rng = np.random.default_rng(0)
    w = rng.standard_normal(1000)
    for k in range(1, 16):
        m, _ = global_prune({"w": w}, m, 0.2)
        assert m.entries["w"].kept() == kept[k]
    assert kept[5] == 328 and float(sparsity(Mask.from_arrays({"w": np.arange(1000) < 328}, ["w"]))) == 67.2
    assert 100 * (1 - Fraction(kept[10], 1000)) >= Fraction("88.8")


# -- mask algebra properties ---------------------------------------------------
masks = st.integers(1, 80).flatmap(lambda n: st.tuples(
    st.lists(st.booleans(), min_size=n, max_size=n), st.lists(st.booleans(), min_size=n, max_size=n)))


@settings(max_examples=400, deadline=None)
@given(masks)
def test_intersection_laws(pair):
    a, b = _mask(pair[0]), _mask(pair[1])
    ab = intersect(a, b)
    assert ab == intersect(b, a)
    assert intersect(a, a) == a
    assert intersect(a, Mask.ones({"w": (len(pair[0]),)}, ["w"])) == a
    assert sparsity(ab) >= max(sparsity(a), sparsity(b))
    za, zb = ~np.array(pair[0]), ~np.array(pair[1])
    contains = (za >= zb).all() or (zb >= za).all()
    assert (sparsity(ab) == max(sparsity(a), sparsity(b))) == contains


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.01, 0.99), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_rounds_are_monotone_and_exact(values, p, rounds, seed):
    keep = list(np.random.default_rng(seed).random(len(values)) < 0.9)
    m = _mask(keep)
    w = {"w": np.array(values)}
    for _ in range(rounds):
        before = m["w"].copy()
        expected = magnitude_prune_sorted(values, before.tolist(), p)
        m, k = global_prune(w, m, p)
        assert k == prune_count(p, int(before.sum()))
        assert m["w"].tolist() == expected
        assert not (m["w"] & ~before).any()


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_rewind_is_bit_exact_and_idempotent(seed, density):
    rng = np.random.default_rng(seed)
    init = rng.standard_normal((3, 5)).astype(np.float32)
    params = _single(init)
    keep = rng.random((3, 5)) < density
    m = _mask(keep)
    params["w"].data[...] = rng.standard_normal((3, 5))
    rewind(params, m)
    once = params["w"].data.copy()
    assert np.array_equal(once[keep], init[keep])
    assert not np.signbit(once[~keep]).any() and not once[~keep].any()
    rewind(params, m)
    assert np.array_equal(params["w"].data, once)
    apply_mask(params, m)
    assert np.array_equal(params["w"].data, once)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["adam", "sgd"]))
def test_pruned_positions_stay_zero_through_training(seed, kind):
    rng = np.random.default_rng(seed)
    model = build_model(ModelSpec(widths=(2, 3, 4), num_classes=3, input_shape=(1, 8, 8)), seed)
    base = full_mask(model.params)
    keep = {n: rng.random(base.entries[n].shape) < 0.5 for n in base.eligible_names}
    m = base.with_entries({n: MaskEntry(k.shape, pack_bits(k), True) for n, k in keep.items()})
    apply_mask(model.params, m)
    opt = OptimizerState(kind, lr=0.05)
    x = rng.random((4, 1, 8, 8)).astype(np.float32)
    for _ in range(3):
        for t in model.params.values():
            t.grad = None
        softmax_cross_entropy(model(x), rng.integers(0, 3, 4)).backward()
        mask_gradients(model.params, m)
        optimizer_step(model.params, opt)
        apply_mask(model.params, m)
        for n, k in keep.items():
            assert not model.params[n].data[~k].any()


def test_apply_mask_identity_and_annihilator():
    params = build_model(ModelSpec(), 0).params
    before = {n: t.data.copy() for n, t in params.items()}
    apply_mask(params, full_mask(params))
    assert all(np.array_equal(before[n], params[n].data) for n in params)
    zero = full_mask(params)
    zero = zero.with_entries({n: MaskEntry(zero.entries[n].shape, np.zeros_like(zero.entries[n].bits), True)
                              for n in zero.eligible_names})
    apply_mask(params, zero)
    assert all(not params[n].data.any() for n in zero.eligible_names)
    assert np.array_equal(params["head.weight"].data, before["head.weight"])


def test_rewind_after_training_restores_initial():
    params = build_model(ModelSpec(), 2).params
    for t in params.values():
        t.data += 1.0
    rewind(params, full_mask(params))
    assert all(np.array_equal(params[n].data, params.initial[n]) for n in params)


def test_rewind_without_snapshot():
    params = _single(THETA0)
    params.initial = {}
    with pytest.raises(SnapshotError):
        rewind(params, _mask(np.ones((3, 3))))


def test_misaligned_masks_rejected():
    with pytest.raises(AlignmentError):
        intersect(_mask([1, 1]), _mask([1, 1, 1]))
    with pytest.raises(AlignmentError):
        apply_mask(_single(THETA0), _mask([1, 1]))
    with pytest.raises(AlignmentError):
        Mask.from_arrays({"head": np.array([1, 0], bool)}, [])


def test_eligibility_rules():
    conv = build_model(ModelSpec(), 0).params
    assert eligible_names(conv) == ["conv1.weight", "conv2.weight", "conv3.weight"]
    mlp = build_model(ModelSpec.mlp(3), 0).params
    assert eligible_names(mlp) == ["fc1.weight", "fc2.weight"]
    assert "head.weight" not in eligible_names(conv, "all-weights")


def test_sparsity_denominators():
    m = Mask.from_arrays({"a": np.array([0, 0, 1, 1], bool), "b": np.ones(4, bool)}, ["a"])
    assert sparsity(m, "all") == 25 and sparsity(m, "eligible") == 50
    assert prune_rate(Mask.ones({"a": (3,)}, ["a"])) == 0.0


def test_bits_are_lsb_first():
    bits = pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 0, 1], bool))
    assert bits.tolist() == [1, 1]
    assert unpack_bits(bits, (9,)).tolist() == [True] + [False] * 7 + [True]


@pytest.mark.parametrize("scope", ["global", "tensor"])
def test_shuffle_preserves_counts(scope):
    rng = np.random.default_rng(0)
    m = Mask.from_arrays({"a": rng.random(50) < 0.3, "b": rng.random((4, 5)) < 0.6, "h": np.ones(3, bool)},
                         ["a", "b"])
    s = shuffle_mask(m, 1, scope)
    assert s.zeros("eligible") == m.zeros("eligible") and s["h"].all()
    if scope == "tensor":
        assert s.kept_counts() == m.kept_counts()
    assert shuffle_mask(m, 1, scope) == s and shuffle_mask(m, 2, scope) != s


def test_random_mask_exact_count():
    m = random_mask({"a": (10, 10), "b": (5,)}, ["a"], 30.0, seed=0)
    assert m.zeros() == 30 and m["b"].all()
