import numpy as np
import pytest

from evdance import autodiff as ad
from evdance.clip_bridge import (
    PrecomputedEmbedder,
    RandomProjectionEmbedder,
    TextFeatureBank,
    gram_softmax,
    load_feature_bank,
    loss_kd,
    loss_pkd,
    loss_vkd,
    stub_text_features,
    write_feature_bank,
)
from evdance.errors import CorruptFile, DimensionMismatch, InvalidConfig, InvalidTemperature, NotADistribution


def unit(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def naive_gram_softmax(f, tau):
    n = len(f)
    out = np.zeros((n, n))
    for i in range(n):
        row = [np.exp(sum(f[i][d] * f[j][d] for d in range(len(f[i]))) / tau) for j in range(n)]
        out[i] = np.array(row) / sum(row)
    return out


def naive_kl(p, q):
    return sum(sum(a * np.log(a / b) for a, b in zip(pr, qr) if a > 0) for pr, qr in zip(p, q)) / len(p)


def test_stub_is_orthonormal_and_deterministic():
    names = ["a", "b", "c", "d"]
    bank = stub_text_features(names, 8, seed=3)
    assert np.allclose(bank.features @ bank.features.T, np.eye(4), atol=1e-9)
    assert np.array_equal(bank.features, stub_text_features(names, 8, seed=3).features)
    assert bank.prompts()[0] == "A photo of [a]"
    with pytest.raises(InvalidConfig):
        stub_text_features(names, 3)


def test_gram_softmax_closed_form():
    n = 5
    g = gram_softmax(np.eye(n), 1.0).values
    e = np.e
    assert np.allclose(np.diag(g), e / (e + n - 1), atol=1e-12)
    assert np.allclose(g[~np.eye(n, dtype=bool)], 1 / (e + n - 1), atol=1e-12)
    assert gram_softmax(np.array([[0.6, 0.8]])).values.tolist() == [[1.0]]
    dup = gram_softmax(unit(np.array([[1.0, 2.0], [1.0, 2.0], [3.0, -1.0]]))).values
    assert np.array_equal(dup[0], dup[1])


def test_gram_softmax_permutation_equivariance():
    rng = np.random.default_rng(0)
    f = unit(rng.normal(size=(6, 4)))
    perm = rng.permutation(6)
    P = np.eye(6)[perm]
    assert np.allclose(gram_softmax(f[perm]).values, P @ gram_softmax(f).values @ P.T, atol=1e-12)


def test_gram_softmax_matches_naive():
    rng = np.random.default_rng(1)
    f = unit(rng.normal(size=(5, 3)))
    assert np.allclose(gram_softmax(f, 0.5).values, naive_gram_softmax(f, 0.5), atol=1e-12)


def test_invalid_temperature():
    with pytest.raises(InvalidTemperature):
        gram_softmax(np.eye(2), 0.0)


def test_vkd_zero_for_matching_structure():
    rng = np.random.default_rng(2)
    f = unit(rng.normal(size=(4, 6)))
    assert loss_vkd(3.0 * f, f).item() == pytest.approx(0.0, abs=1e-9)
    assert loss_vkd(rng.normal(size=(1, 5)), rng.normal(size=(1, 3))).item() == pytest.approx(0.0, abs=1e-12)


def test_vkd_matches_naive_and_is_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f_s = rng.normal(size=(5, 7))
        f_vis = np.linalg.qr(rng.normal(size=(8, 5)))[0].T  # orthonormal rows
        expected = naive_kl(naive_gram_softmax(unit(f_s), 1.0), naive_gram_softmax(f_vis, 1.0))
        got = loss_vkd(f_s, f_vis).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got >= 0.0


def test_pkd_examples():
    bank = stub_text_features(list("abcd"), 8)
    p = ad.softmax_rows(np.random.default_rng(4).normal(size=(1, 4))).values
    assert loss_pkd(p, bank).item() == pytest.approx(0.0, abs=1e-12)
    same = np.tile(p, (3, 1))
    assert loss_pkd(same, bank).item() == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(NotADistribution):
        loss_pkd(np.full((2, 4), 0.5), bank)


def test_pkd_matches_naive_and_vanishes_for_orthonormal_bank():
    rng = np.random.default_rng(5)
    bank = stub_text_features(list("abcd"), 8)
    for _ in range(20):
        p = ad.softmax_rows(rng.normal(size=(6, 4))).values
        z = p @ bank.features
        expected = naive_kl(naive_gram_softmax(unit(p), 1.0), naive_gram_softmax(unit(z), 1.0))
        got = loss_pkd(p, bank).item()
        assert got == pytest.approx(expected, abs=1e-12)
        # orthonormal text rows preserve inner products of probability rows
        assert abs(got) <= 1e-12


def test_pkd_nonzero_for_general_bank():
    rng = np.random.default_rng(6)
    bank = TextFeatureBank(rng.normal(size=(4, 8)), list("abcd"))
    p = ad.softmax_rows(rng.normal(size=(6, 4))).values
    assert loss_pkd(p, bank).item() > 1e-6


def test_kd_is_sum_of_parts():
    rng = np.random.default_rng(7)
    bank = TextFeatureBank(rng.normal(size=(4, 8)), list("abcd"))
    f_s, f_vis = rng.normal(size=(5, 6)), rng.normal(size=(5, 8))
    p = ad.softmax_rows(rng.normal(size=(5, 4))).values
    assert loss_kd(f_s, f_vis, p, bank).item() == pytest.approx(
        loss_pkd(p, bank).item() + loss_vkd(f_s, f_vis).item(), abs=1e-15)


def test_embedders_unit_rows_and_frozen():
    rng = np.random.default_rng(8)
    emb = RandomProjectionEmbedder(16, 8, seed=1)
    x = rng.random((4, 16))
    a = emb.embed(x)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
    with pytest.raises(ValueError):
        emb.matrix[0, 0] = 1.0
    assert np.array_equal(a, emb.embed(x))
    pre = PrecomputedEmbedder(rng.normal(size=(3, 5)), ["x", "y", "z"])
    assert np.allclose(np.linalg.norm(pre.embed(ids=["z", "x"]), axis=1), 1.0)
    with pytest.raises(KeyError):
        pre.embed(ids=["missing"])


def test_bank_files_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    text = TextFeatureBank(rng.normal(size=(3, 4)) * 5, ["cat", "dog", "bar 45°"])
    write_feature_bank(tmp_path / "t.evfb", text)
    back = load_feature_bank(tmp_path / "t.evfb", expected_k=3)
    assert back.class_names == text.class_names
    assert np.allclose(np.linalg.norm(back.features, axis=1), 1.0)
    assert np.allclose(back.features, text.features, atol=1e-6)
    with pytest.raises(DimensionMismatch):
        load_feature_bank(tmp_path / "t.evfb", expected_k=4)

    vis = PrecomputedEmbedder(rng.normal(size=(2, 4)), ["s/0", "s/1"])
    write_feature_bank(tmp_path / "v.evfb", vis)
    assert load_feature_bank(tmp_path / "v.evfb").ids == ["s/0", "s/1"]

    data = (tmp_path / "t.evfb").read_bytes()
    (tmp_path / "bad.evfb").write_bytes(data[:-3])
    with pytest.raises(CorruptFile):
        load_feature_bank(tmp_path / "bad.evfb")
