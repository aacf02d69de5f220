import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kanet import tensor as T
from kanet.classifier import ClassifierWeights, argmax_class, extend, predict, prototypes
from kanet.tensor import Tensor


def weights(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float64)
    return ClassifierWeights(Tensor(rows), tuple(range(len(rows))) if ids is None else tuple(ids))


def test_one_feature_per_class():
    f = np.random.default_rng(0).normal(size=(3, 4))
    w = prototypes(f, [5, 2, 9])
    assert w.class_ids == (2, 5, 9)
    np.testing.assert_allclose(w.rows.data, f[[1, 0, 2]])


def test_opposite_features_zero_row():
    v = np.random.default_rng(1).normal(size=4)
    w = prototypes(np.stack([v, -v]), [0, 0])
    np.testing.assert_allclose(w.rows.data, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_prototype_means_match_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 5)
    rng.shuffle(labels)
    f = rng.normal(size=(20, 6))
    w = prototypes(f, labels)
    for i, c in enumerate(w.class_ids):
        members = [f[j] for j in range(20) if labels[j] == c]
        np.testing.assert_allclose(w.rows.data[i], sum(members) / len(members), atol=1e-6)


def test_predict_picks_matching_prototype():
    rows = np.eye(3)
    p = predict(Tensor(rows[1] * 4.0), weights(rows), 16.0)
    assert int(np.argmax(p.data)) == 1


def test_predict_hand_softmax():
    p = predict(Tensor([1.0, 0.0, 0.0]), weights(np.eye(3)), 16.0).data
    e = math.exp(16.0)
    np.testing.assert_allclose(p, [e / (e + 2), 1 / (e + 2), 1 / (e + 2)], rtol=1e-12)


def test_predict_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        predict(Tensor([1.0, 0.0]), weights(np.eye(2)), 0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_predict_scale_invariance(seed, c_query, c_row):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(4, 5))
    f = rng.normal(size=5)
    base = predict(Tensor(f), weights(rows), 16.0).data
    np.testing.assert_allclose(predict(Tensor(f * c_query), weights(rows), 16.0).data, base, atol=1e-9)
    scaled = rows.copy()
    scaled[2] *= c_row
    np.testing.assert_allclose(predict(Tensor(f), weights(scaled), 16.0).data, base, atol=1e-9)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_higher_alpha_sharpens(seed):
    rng = np.random.default_rng(seed)
    rows, f = rng.normal(size=(5, 4)), rng.normal(size=4)
    cos = T.cosine(Tensor(f[None]), Tensor(rows)).data[0]
    if np.sort(cos)[-1] - np.sort(cos)[-2] < 1e-9:
        return
    tops = [predict(Tensor(f), weights(rows), a).data.max() for a in (1.0, 4.0, 16.0, 64.0)]
    assert all(b >= a for a, b in zip(tops, tops[1:]))


def test_zero_row_handled_by_clamp():
    p = predict(Tensor([1.0, 1.0]), weights([[0.0, 0.0], [1.0, 0.0]]), 16.0).data
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_extend_with_empty_is_identity():
    w = weights(np.eye(2))
    assert extend(w, ClassifierWeights.empty(2, np.float64)) is w


def test_extend_cifar_sizes():
    rng = np.random.default_rng(2)
    old = weights(rng.normal(size=(60, 8)))
    new = weights(rng.normal(size=(5, 8)), range(60, 65))
    ext = extend(old, new)
    assert len(ext) == 65
    assert ext.rows.data[:60].tobytes() == old.rows.data.tobytes()


def test_extend_rejects_overlap():
    with pytest.raises(ValueError):
        extend(weights(np.eye(2)), weights(np.eye(2)))


def test_extend_associative():
    rng = np.random.default_rng(3)
    a, b, c = (weights(rng.normal(size=(2, 3)), ids) for ids in ((0, 1), (2, 3), (4, 5)))
    left, right = extend(extend(a, b), c), extend(a, extend(b, c))
    assert left.class_ids == right.class_ids
    assert left.rows.data.tobytes() == right.rows.data.tobytes()


def test_argmax_over_extended_equals_union():
    rng = np.random.default_rng(4)
    a = weights(rng.normal(size=(3, 6)), (0, 1, 2))
    b = weights(rng.normal(size=(2, 6)), (3, 4))
    union = weights(np.concatenate([a.rows.data, b.rows.data]), range(5))
    f = rng.normal(size=(10, 6))
    p1 = predict(Tensor(f), extend(a, b), 16.0)
    p2 = predict(Tensor(f), union, 16.0)
    np.testing.assert_array_equal(argmax_class(p1, (0, 1, 2, 3, 4)), argmax_class(p2, range(5)))


def test_argmax_distinct_and_tie():
    assert argmax_class(np.array([0.1, 0.7, 0.2]), [4, 8, 1]) == 8
    assert argmax_class(np.array([0.4, 0.2, 0.4]), [7, 5, 3]) == 3
    assert argmax_class(np.array([0.5, 0.5]), [3, 7]) == 3


@pytest.mark.parametrize("seed", range(10))
def test_argmax_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(20)[:8]
    probs = rng.integers(0, 4, size=8).astype(float)  # plenty of ties
    best_p, best_c = -1.0, None
    for p, c in zip(probs, ids):
        if p > best_p or (p == best_p and c < best_c):
            best_p, best_c = p, c
    assert argmax_class(probs, ids) == best_c


def test_weights_save_load(tmp_path):
    w = weights(np.random.default_rng(5).normal(size=(3, 4)), (4, 1, 9))
    w.save(tmp_path / "clf.kant")
    back = ClassifierWeights.load(tmp_path / "clf.kant")
    assert back.class_ids == w.class_ids and back.rows.data.tobytes() == w.rows.data.tobytes()
