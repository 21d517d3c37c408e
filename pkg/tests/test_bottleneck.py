import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_transformer.autodiff import NoiseSource, Tensor, backward, ops, parameter
from latent_transformer.bottleneck import (
    EVAL,
    TRAIN,
    Codebook,
    DVQBottleneck,
    GumbelBottleneck,
    SemhashBottleneck,
    codes_to_bits,
    compose_code,
    compose_codes,
    decompose_code,
    decompose_codes,
    dvq,
    ema_update,
    from_bits,
    gumbel_softmax,
    make_bottleneck,
    nearest,
    read_histogram_csv,
    semhash,
    to_bits,
    usage_stats,
    write_histogram_csv,
)
from latent_transformer.errors import CodeRangeError, ConfigError, DimensionError

# ------------------------------------------------------------------ codes


def test_compose_hand_example():
    assert to_bits(1, 2) + to_bits(2, 2) == [0, 1, 1, 0]
    assert compose_code([1, 2], 4) == 6


def test_compose_single_slice_is_identity():
    assert all(compose_code([i], 16) == i for i in range(16))


def test_compose_all_zero():
    assert compose_code([0, 0, 0], 8) == 0


def test_decompose_hand_example():
    assert decompose_code(6, 2, 4) == [1, 2]


def test_decompose_exhaustive_256():
    for n_d, k in [(1, 256), (2, 16), (4, 4), (8, 2)]:
        for code in range(256):
            assert compose_code(decompose_code(code, n_d, k), k) == code


def test_decompose_to_bit_vector():
    for code in range(64):
        assert decompose_code(code, 6, 2) == to_bits(code, 6)


def test_code_range_errors():
    with pytest.raises(CodeRangeError):
        compose_code([4, 0], 4)
    with pytest.raises(CodeRangeError):
        decompose_code(16, 2, 4)
    with pytest.raises(CodeRangeError):
        to_bits(8, 3)
    with pytest.raises(CodeRangeError):
        compose_codes([[0, 5]], 4)


@given(st.integers(1, 16), st.data())
def test_bits_round_trip(m, data):
    i = data.draw(st.integers(0, (1 << m) - 1))
    assert from_bits(to_bits(i, m)) == i


@given(st.sampled_from([(1, 1024), (2, 32), (5, 4), (10, 2)]), st.lists(st.integers(0, 1023), min_size=1, max_size=20))
def test_vectorized_matches_scalar(layout, codes):
    n_d, k = layout
    arr = decompose_codes(codes, n_d, k)
    assert arr.tolist() == [decompose_code(c, n_d, k) for c in codes]
    assert compose_codes(arr, k).tolist() == codes


def test_msb_first_bits():
    assert codes_to_bits([2], 2).tolist() == [[1, 0]]


# ------------------------------------------------------------------ Gumbel-Softmax


def test_gumbel_eval_argmax(rng):
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    e = rng.normal(size=(2, 3))
    out = gumbel_softmax(np.array([[3.0, 1.0]]), W, e, mode=EVAL)
    assert out.z_d.tolist() == [0]
    np.testing.assert_array_equal(out.z_q.data, e[[0]])
    assert out.aux_loss.item() == 0.0


def test_gumbel_low_temperature_is_one_hot(rng):
    enc = rng.normal(size=(4, 3))
    W = rng.normal(size=(8, 3))
    e = np.eye(8)
    noise_a, noise_b = NoiseSource(1), NoiseSource(1)
    out = gumbel_softmax(enc, W, e, temperature=1e-4, mode=TRAIN, noise=noise_a)
    g = -np.log(-np.log(np.clip(noise_b.uniform("gumbel", (4, 8)), np.finfo(float).tiny, 1 - 1e-16)))
    winner = np.argmax(enc @ W.T + g, axis=-1)
    np.testing.assert_allclose(out.z_q.data, np.eye(8)[winner], atol=1e-9)


@given(st.floats(-100, 100))
def test_gumbel_eval_shift_invariance(shift):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6))
    # with W = I, enc equals the logits
    base = gumbel_softmax(logits, np.eye(6), np.eye(6), mode=EVAL).z_d
    moved = gumbel_softmax(logits + shift, np.eye(6), np.eye(6), mode=EVAL).z_d
    assert base.tolist() == moved.tolist()


def test_gumbel_train_needs_positive_temperature(rng):
    with pytest.raises(ValueError):
        gumbel_softmax(np.ones((1, 2)), np.eye(2), np.eye(2), temperature=0.0, noise=NoiseSource(0))


# ------------------------------------------------------------------ semhash


def test_semhash_eval_saturated_bits(rng):
    e1, e2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    out = semhash(np.array([[10.0, -10.0]]), e1, e2, mode=EVAL)
    assert out.z_d.tolist() == [2]
    np.testing.assert_allclose(out.z_q.data, e1[[0]] + e2[[1]], rtol=1e-12)


def test_semhash_half_is_bit_zero(rng):
    e = rng.normal(size=(1, 3))
    assert semhash(np.array([[0.0]]), e, e, mode=EVAL).z_d.tolist() == [0]


def test_semhash_equal_embeddings_column_sums(rng):
    e = rng.normal(size=(3, 4))
    out = semhash(rng.normal(size=(5, 3)), e, e, mode=TRAIN, noise=NoiseSource(0))
    np.testing.assert_allclose(out.z_q.data, np.tile(e.sum(axis=0), (5, 1)), rtol=1e-12)


def test_semhash_eval_deterministic(rng):
    enc = rng.normal(size=(6, 5))
    e1, e2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a = semhash(enc, e1, e2, mode=EVAL)
    b = semhash(enc, e1, e2, mode=EVAL)
    assert a.z_d.tolist() == b.z_d.tolist()
    assert ((a.z_d >= 0) & (a.z_d < 32)).all()


def test_semhash_gradient_reaches_scores(rng):
    enc = parameter(rng.normal(size=(4, 3)))
    out = semhash(enc, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), mode=TRAIN, noise=NoiseSource(2))
    backward(ops.sum(ops.square(out.z_q)))
    assert np.abs(enc.grad).sum() > 0


def test_semhash_dimension_check(rng):
    with pytest.raises(DimensionError):
        semhash(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 2)), mode=EVAL)


# ------------------------------------------------------------------ DVQ


def _book(tables, counts=None, decay=0.999):
    tables = np.asarray(tables, dtype=np.float64)
    counts = np.ones(tables.shape[:2]) if counts is None else np.asarray(counts, dtype=np.float64)
    return Codebook(tables, counts, decay)


def test_vq_nearest_neighbour():
    book = _book([[[0.0, 0.0], [1.0, 1.0]]])
    out = dvq(np.array([[0.2, 0.1]]), book, mode=EVAL)
    assert out.z_d.tolist() == [0]
    np.testing.assert_array_equal(out.z_q.data, [[0.0, 0.0]])


def test_vq_tie_breaks_low():
    book = _book([[[0.0, 0.0], [1.0, 1.0]]])
    assert dvq(np.array([[0.5, 0.5]]), book, mode=EVAL).z_d.tolist() == [0]


def test_slice_size_from_bits(rng):
    book = Codebook.create(16, 1 << 16, 2, rng)
    assert book.slice_size == 256
    assert book.tables.shape == (2, 256, 8)


def test_codebook_divisibility_errors(rng):
    with pytest.raises(ConfigError):
        Codebook.create(16, 1 << 9, 2, rng)
    with pytest.raises(ConfigError):
        Codebook.create(15, 1 << 8, 2, rng)


def test_dvq_dimension_error(rng):
    book = Codebook.create(8, 16, 2, rng)
    with pytest.raises(DimensionError):
        dvq(np.ones((2, 6)), book, mode=EVAL)


def test_codebook_init_positive_counts(rng):
    book = Codebook.create(8, 64, 2, rng)
    assert (book.counts > 0).all()


def test_sliced_dvq_matches_per_slice_vq(rng):
    book = Codebook.create(8, 256, 2, rng)
    enc = rng.normal(size=(10, 8))
    out = dvq(enc, book, mode=EVAL)
    for i in range(2):
        k = nearest(enc[:, 4 * i : 4 * (i + 1)], book.tables[i])
        assert out.slice_indices[:, i].tolist() == k.tolist()
    assert out.z_d.tolist() == compose_codes(out.slice_indices, 16).tolist()


def test_single_slice_is_plain_vq(rng):
    book = Codebook.create(6, 32, 1, rng)
    enc = rng.normal(size=(12, 6))
    out = dvq(enc, book, mode=EVAL)
    d = ((enc[:, None, :] - book.tables[0][None]) ** 2).sum(-1)
    assert out.z_d.tolist() == np.argmin(d, axis=1).tolist()
    np.testing.assert_array_equal(out.z_q.data, book.tables[0][np.argmin(d, axis=1)])


def test_eval_zq_rows_are_codebook_rows(rng):
    book = Codebook.create(8, 64, 2, rng, projected=True)
    out = dvq(rng.normal(size=(5, 8)), book, mode=EVAL)
    for r in range(5):
        parts = [book.tables[i][out.slice_indices[r, i]] for i in range(2)]
        np.testing.assert_array_equal(out.z_q.data[r], np.concatenate(parts))


def test_projected_uses_fixed_projections(rng):
    book = Codebook.create(8, 64, 2, rng, projected=True)
    enc = rng.normal(size=(4, 8))
    out = dvq(enc, book, mode=EVAL)
    for i in range(2):
        assert out.slice_indices[:, i].tolist() == nearest(enc @ book.projections[i], book.tables[i]).tolist()


def test_straight_through_gradient_equals_identity_path(rng):
    book = Codebook.create(6, 64, 2, rng)
    target = rng.normal(size=(5, 6))
    enc = parameter(rng.normal(size=(5, 6)))
    out = dvq(enc, book, mode=TRAIN)
    backward(ops.sum(ops.square(out.z_q - target)))
    # as if z_q were enc on the reconstruction path, evaluated at z_q's value
    np.testing.assert_allclose(enc.grad, 2 * (out.z_q.data - target), rtol=1e-12)


def test_commitment_loss_value(rng):
    book = Codebook.create(4, 16, 2, rng)
    enc = rng.normal(size=(3, 4))
    out = dvq(enc, book, mode=TRAIN, beta=0.25)
    zq = out.z_q.data
    assert out.aux_loss.item() == pytest.approx(0.25 * ((enc - zq) ** 2).sum(axis=1).mean(), rel=1e-12)


def test_unsquared_commitment(rng):
    book = Codebook.create(4, 4, 1, rng)
    enc = rng.normal(size=(3, 4))
    out = dvq(enc, book, mode=TRAIN, beta=1.0, squared=False)
    zq = out.z_q.data
    ref = np.sqrt(((enc - zq) ** 2).sum(axis=1) + 1e-12).mean()
    assert out.aux_loss.item() == pytest.approx(ref, rel=1e-12)


def test_codebook_gets_no_gradient(rng):
    layer = DVQBottleneck(6, 4, 2, rng)
    enc = parameter(rng.normal(size=(4, 6)))
    out = layer(enc, mode=TRAIN)
    backward(ops.sum(ops.square(out.z_q)) + out.aux_loss)
    assert layer.parameters() == {}


# ------------------------------------------------------------------ EMA


def test_ema_hand_example():
    book = _book([[[1.0, 0.0], [5.0, 5.0]]], decay=0.9)
    vecs = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    ema_update(book, np.zeros((3, 1), dtype=int), vecs[:, None, :])
    assert book.counts[0, 0] == pytest.approx(1.2)
    np.testing.assert_allclose(book.tables[0, 0], [1.15, 0.25], rtol=1e-12)


def test_ema_unassigned_rows_decay():
    book = _book([[[1.0, 0.0], [4.0, 2.0]]], decay=0.9)
    ema_update(book, np.zeros((1, 1), dtype=int), np.ones((1, 1, 2)))
    assert book.counts[0, 1] == pytest.approx(0.9)
    np.testing.assert_allclose(book.tables[0, 1], [3.6, 1.8], rtol=1e-12)


def test_after_step_respects_mask(rng):
    layer = DVQBottleneck(4, 4, 1, rng, decay=0.5)
    enc = rng.normal(size=(1, 3, 4))
    out = layer(enc, mode=TRAIN)
    mask = np.array([[True, False, False]])
    before = layer.book.copy()
    layer.after_step(out, mask)
    oracle = before.copy()
    ema_update(oracle, out.slice_indices[0, :1], out.enc_slices[0, :1])
    np.testing.assert_array_equal(layer.book.counts, oracle.counts)
    np.testing.assert_array_equal(layer.book.tables, oracle.tables)


def test_projections_frozen_by_ema(rng):
    layer = DVQBottleneck(8, 4, 2, rng, projected=True)
    proj = layer.book.projections.copy()
    out = layer(rng.normal(size=(6, 8)), mode=TRAIN)
    layer.after_step(out)
    np.testing.assert_array_equal(layer.book.projections, proj)


# ------------------------------------------------------------------ embed_codes


@pytest.mark.parametrize("kind,kw", [
    ("gumbel", {}),
    ("semhash", {}),
    ("vq", {}),
    ("dvq", {"n_slices": 2}),
    ("dvq", {"n_slices": 2, "projected": True}),
])
def test_embed_codes_reproduces_eval_zq(kind, kw, rng):
    layer = make_bottleneck(kind, 8, 6, rng, **kw)
    out = layer(rng.normal(size=(2, 5, 8)), mode=EVAL)
    np.testing.assert_array_equal(layer.embed_codes(out.z_d).data, out.z_q.data)


def test_embed_codes_round_trip(rng):
    layer = DVQBottleneck(8, 6, 2, rng)
    k = np.array([[3, 5], [7, 0]])
    z = layer.embed_codes(compose_codes(k, 8)).data
    for r in range(2):
        np.testing.assert_array_equal(z[r], np.concatenate([layer.book.tables[i][k[r, i]] for i in range(2)]))


def test_embed_codes_single_slice_row(rng):
    layer = DVQBottleneck(4, 3, 1, rng)
    np.testing.assert_array_equal(layer.embed_codes([5]).data[0], layer.book.tables[0][5])


def test_embed_codes_range_check(rng):
    with pytest.raises(CodeRangeError):
        SemhashBottleneck(4, 3, rng).embed_codes([8])
    with pytest.raises(CodeRangeError):
        GumbelBottleneck(4, 3, rng).embed_codes([-1])


def test_output_code_consistency(rng):
    layer = make_bottleneck("dvq", 8, 8, rng, n_slices=4)
    out = layer(rng.normal(size=(7, 8)), mode=TRAIN)
    assert out.z_d.tolist() == compose_codes(out.slice_indices, 4).tolist()


def test_unknown_bottleneck(rng):
    with pytest.raises(ConfigError):
        make_bottleneck("bogus", 4, 2, rng)


# ------------------------------------------------------------------ usage


def test_usage_fraction_and_row_sums():
    hist = [np.array([[0, 1], [0, 1]]), np.array([[2, 1]])]
    rep = usage_stats(hist, 16, 2)
    assert rep.counts.shape == (2, 4)
    assert rep.counts.sum(axis=1).tolist() == [3, 3]
    assert rep.fraction == pytest.approx(3 / 8)
    assert rep.slice_fractions == [0.5, 0.25]
    assert rep.code_fraction == pytest.approx(2 / 16)


def test_usage_collapse_flag():
    rep = usage_stats([np.zeros((100, 1), dtype=int)], 64, 1)
    assert rep.collapsed(0.2)
    assert not usage_stats([np.arange(64)[:, None]], 64, 1).collapsed(0.2)


def test_usage_windows():
    hist = [np.array([[i]]) for i in range(6)]
    rep = usage_stats(hist, 8, 1, window=4)
    assert len(rep.windows) == 2
    assert rep.windows[1][0].tolist() == [0, 0, 0, 0, 1, 1, 0, 0]


def test_usage_empty_history():
    with pytest.raises(ValueError):
        usage_stats([], 8, 1)


def test_histogram_csv_round_trip(tmp_path):
    counts = np.array([[0, 3, 1], [2, 0, 0]])
    path = tmp_path / "u.csv"
    write_histogram_csv(path, [(0, counts)])
    write_histogram_csv(path, [(1, counts * 2)], append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "step_bin,slice,code,count"
    data = read_histogram_csv(path)
    assert data[0] == {(0, 1): 3, (0, 2): 1, (1, 0): 2}
    assert data[1][(0, 1)] == 6
    assert {s for s, _ in data[0]} == {0, 1}


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=50))
def test_usage_counts_sum_to_positions(pairs):
    rep = usage_stats([np.array(pairs)], 64, 2)
    assert rep.counts.sum(axis=1).tolist() == [len(pairs)] * 2
    assert 0 < rep.fraction <= 1
