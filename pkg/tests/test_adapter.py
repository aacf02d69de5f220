import math

import numpy as np
import pytest

from kanet import adapter
from kanet import tensor as T
from kanet.adapter import (
    ClassConflictError,
    EmptyClassError,
    FusionParams,
    KnowledgeLibrary,
    attention_weights,
    extend_library,
    fuse,
    identity_fuse,
    refine,
    summarize_library,
)
from kanet.encoder import Encoder, EncoderConfig
from kanet.tensor import Tape, Tensor

from gradcheck import max_rel_error, numeric_grad

D = 16
HEADS = 4


def random_params(seed, dim=D, heads=HEADS, dtype=np.float64, std=0.3):
    rng = np.random.default_rng(seed)
    p = FusionParams.init(dim, heads, dtype=dtype)
    return FusionParams({k: v.data + rng.normal(0, std, v.shape).astype(dtype) for k, v in p.tensors.items()}, heads)


def naive_attention(x, M, wq, wk, heads):
    d = x.shape[0]
    dh = d // heads
    out = np.zeros((heads, len(M)))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ wq[:, cols]
        scores = [float(q @ (m @ wk[:, cols])) / math.sqrt(dh) for m in M]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        out[h] = [v / sum(e) for v in e]
    return out


# ---------------------------------------------------------------- library


def test_single_token_per_class_is_the_row():
    rng = np.random.default_rng(0)
    toks = {c: rng.normal(size=(1, D)) for c in (4, 1, 2)}
    lib = summarize_library(toks)
    assert lib.class_ids == (1, 2, 4)
    for i, c in enumerate(lib.class_ids):
        np.testing.assert_array_equal(lib.entries[i], toks[c][0])


def test_opposite_tokens_average_to_zero():
    v = np.random.default_rng(1).normal(size=D)
    lib = summarize_library({0: np.stack([v, -v])})
    np.testing.assert_allclose(lib.entries[0], 0.0, atol=1e-12)


def test_five_token_mean_matches_sum_over_five():
    toks = np.random.default_rng(2).normal(size=(5, D))
    lib = summarize_library({3: toks})
    ref = [sum(toks[i, j] for i in range(5)) / 5 for j in range(D)]
    np.testing.assert_allclose(lib.entries[0], ref, atol=1e-6)


def test_within_class_order_irrelevant():
    toks = np.random.default_rng(3).normal(size=(6, D))
    a = summarize_library({0: toks}).entries
    b = summarize_library({0: toks[::-1]}).entries
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_class_raises():
    with pytest.raises(EmptyClassError):
        summarize_library({0: np.zeros((0, D))})


def test_extend_with_nothing_is_identity():
    lib = summarize_library({0: np.ones((2, D))})
    assert extend_library(lib, {}) is lib


def test_extend_conflict():
    lib = summarize_library({0: np.ones((2, D))})
    with pytest.raises(ClassConflictError):
        extend_library(lib, {0: np.ones((1, D))})


def test_cifar_style_growth_keeps_old_rows():
    rng = np.random.default_rng(4)
    lib = summarize_library({c: rng.normal(size=(3, D)) for c in range(60)})
    first = lib.entries.copy()
    lib = extend_library(lib, {c: rng.normal(size=(5, D)) for c in range(60, 65)})
    assert len(lib) == 65
    assert lib.entries[:60].tobytes() == first.tobytes()
    for s in range(1, 8):
        lib = extend_library(lib, {c: rng.normal(size=(5, D)) for c in range(60 + 5 * s, 65 + 5 * s)})
    assert len(lib) == 100
    assert lib.class_ids == tuple(range(100))


def test_library_save_load(tmp_path):
    lib = summarize_library({c: np.random.default_rng(c).normal(size=(2, D)) for c in (7, 3)})
    lib.save(tmp_path / "lib.kant")
    back = KnowledgeLibrary.load(tmp_path / "lib.kant")
    assert back.class_ids == lib.class_ids and back.entries.tobytes() == lib.entries.tobytes()


# ---------------------------------------------------------------- fusion


def test_single_row_library_weight_is_one():
    p = random_params(0)
    lib = KnowledgeLibrary(np.random.default_rng(0).normal(size=(1, D)), (0,))
    w = attention_weights(np.random.default_rng(1).normal(size=D), lib, p)
    assert w.shape == (HEADS, 1)
    np.testing.assert_array_equal(w, 1.0)


def test_identical_keys_give_uniform_weights():
    p = random_params(1)
    row = np.random.default_rng(2).normal(size=D)
    lib = KnowledgeLibrary(np.stack([row] * 5), tuple(range(5)))
    w = attention_weights(np.random.default_rng(3).normal(size=D), lib, p)
    np.testing.assert_allclose(w, 0.2, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    M = rng.normal(size=(int(rng.integers(1, 8)), D))
    x = rng.normal(size=D)
    w = attention_weights(x, KnowledgeLibrary(M, tuple(range(len(M)))), p)
    ref = naive_attention(x, M, p.tensors["wq"].data, p.tensors["wk"].data, HEADS)
    np.testing.assert_allclose(w, ref, atol=1e-6)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_duplicate_rows_equal_single_row():
    p = random_params(2)
    r = np.random.default_rng(4).normal(size=D)
    x = np.random.default_rng(5).normal(size=(3, D))
    one = fuse(x, KnowledgeLibrary(r[None], (0,)), p).data
    two = fuse(x, KnowledgeLibrary(np.stack([r, r]), (0, 1)), p).data
    np.testing.assert_allclose(one, two, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_fuse_is_permutation_equivariant_in_library(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    M = rng.normal(size=(6, D))
    x = rng.normal(size=(2, D))
    perm = rng.permutation(6)
    a = fuse(x, KnowledgeLibrary(M, tuple(range(6))), p).data
    b = fuse(x, KnowledgeLibrary(M[perm], tuple(perm.tolist())), p).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_fuse_output_finite_for_extreme_inputs():
    p = random_params(3, std=5.0)
    M = np.random.default_rng(6).normal(scale=1e3, size=(4, D))
    out = fuse(np.random.default_rng(7).normal(scale=1e3, size=D), KnowledgeLibrary(M, (0, 1, 2, 3)), p).data
    assert out.shape == (D,) and np.all(np.isfinite(out))


def test_fuse_empty_library():
    with pytest.raises(ValueError):
        fuse(np.zeros(D), KnowledgeLibrary.empty(D), random_params(0))


def test_output_projection_starts_at_zero():
    p = FusionParams.init(D, HEADS, dtype=np.float64)
    assert not p.tensors["wo"].data.any()


@pytest.mark.parametrize("seed", range(3))
def test_fuse_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    M = KnowledgeLibrary(rng.normal(size=(4, D)), (0, 1, 2, 3))
    x = rng.normal(size=(2, D))
    probe = Tensor(rng.normal(size=(2, D)))

    def f():
        return T.sum(T.mul(fuse(x, M, p), probe))

    p.zero_grad()
    with Tape() as tape:
        out = f()
    T.backward(out, tape)
    for name, t in p.tensors.items():
        numeric = numeric_grad(lambda: float(f().data), t.data)
        assert max_rel_error(t.grad, numeric) <= 1e-4, name


# ---------------------------------------------------------------- refine

ENC = EncoderConfig(image_size=16, patch_size=8, embed_dim=D, num_heads=HEADS, n_early=1, n_middle=1, n_post=1, seed=2)


def test_refine_with_identity_hook_is_plain_encoder():
    enc = Encoder(ENC, np.float64)
    imgs = np.random.default_rng(8).normal(size=(3, 3, 16, 16))
    lib = KnowledgeLibrary(np.random.default_rng(9).normal(size=(2, D)), (0, 1))
    out = refine(imgs, lib, enc, random_params(4), fuse_fn=identity_fuse).data
    np.testing.assert_array_equal(out, enc.forward(imgs).data[:, 0, :])


def test_refine_differs_with_random_fusion_and_is_deterministic():
    enc = Encoder(ENC, np.float64)
    imgs = np.random.default_rng(10).normal(size=(2, 3, 16, 16))
    lib = KnowledgeLibrary(np.random.default_rng(11).normal(size=(3, D)), (0, 1, 2))
    p = random_params(5)
    a = refine(imgs, lib, enc, p).data
    b = refine(imgs, lib, enc, p).data
    assert a.tobytes() == b.tobytes()
    assert np.linalg.norm(a - enc.forward(imgs).data[:, 0, :]) > 0


def test_refine_only_replaces_class_token():
    enc = Encoder(ENC, np.float64)
    x_m = np.random.default_rng(12).normal(size=(1, 5, D))
    lib = KnowledgeLibrary(np.random.default_rng(13).normal(size=(2, D)), (0, 1))
    p = random_params(6)
    fused = fuse(x_m[:, 0, :], lib, p).data
    manual = enc.encode_post(np.concatenate([fused[:, None, :], x_m[:, 1:, :]], axis=1)).data[:, 0, :]
    np.testing.assert_allclose(adapter.refine_middle(x_m, lib, enc, p).data, manual, atol=1e-12)


def test_flat_round_trip():
    p = random_params(7)
    q = FusionParams.init(D, HEADS, dtype=np.float64)
    q.load_flat(p.flat())
    assert q.flat().tobytes() == p.flat().tobytes()
    with pytest.raises(ValueError):
        q.load_flat(np.zeros(3))
