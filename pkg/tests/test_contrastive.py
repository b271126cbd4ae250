import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctvis_engine.contrastive import (ContrastiveItem, NegativeMode, build_cis, emb_loss, emb_loss_grad,
                                      mean_clip_loss)
from ctvis_engine.memory_bank import MemoryBank


def naive_loss(v, kp, kn):
    """Direct evaluation without any log-sum-exp trick."""
    return math.log(1.0 + sum(math.exp(v @ k - v @ kp) for k in kn))


def random_ci(rng, dim=None, n_neg=None, scale=0.5):
    dim = dim or int(rng.integers(8, 65))
    n_neg = int(rng.integers(1, 9)) if n_neg is None else n_neg
    return ContrastiveItem.from_vectors(rng.normal(size=dim) * scale, rng.normal(size=dim) * scale,
                                        rng.normal(size=(n_neg, dim)) * scale)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_loss_examples():
    assert emb_loss(ContrastiveItem.from_vectors([1.0, 0.0], [1.0, 0.0])) == 0.0
    ci = ContrastiveItem.from_vectors([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
    assert emb_loss(ci) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert emb_loss(ci) == pytest.approx(0.31326, abs=1e-5)
    sym = ContrastiveItem.from_vectors([1.0, 2.0], [0.5, 0.5], [[0.5, 0.5]])
    assert emb_loss(sym) == pytest.approx(math.log(2), abs=1e-12)


def test_grad_examples():
    g = emb_loss_grad(ContrastiveItem.from_vectors([1.0, 0.0], [1.0, 0.0]))
    np.testing.assert_array_equal(g.anchor, [0.0, 0.0])
    ci = ContrastiveItem.from_vectors([0.3, -0.4], [2.0, 1.0], [[2.0, 1.0]])
    g = emb_loss_grad(ci)
    np.testing.assert_array_equal(g.anchor, [0.0, 0.0])
    assert g.loss == pytest.approx(math.log(2))


def test_loss_matches_naive_and_is_stable(rng):
    for _ in range(50):
        ci = random_ci(rng)
        assert emb_loss(ci) == pytest.approx(naive_loss(ci.anchor, ci.positive, ci.negatives), rel=1e-10)
    huge = ContrastiveItem.from_vectors([30.0], [-30.0], [[30.0]])
    assert emb_loss(huge) == pytest.approx(1800.0, rel=1e-12)


def test_finite_difference_gradients():
    rng = np.random.default_rng(99)
    for _ in range(100):
        ci = random_ci(rng)
        g = emb_loss_grad(ci)
        v, kp, kn = ci.anchor, ci.positive, ci.negatives
        fd_v = central_diff(lambda x: naive_loss(x, kp, kn), v)
        fd_p = central_diff(lambda x: naive_loss(v, x, kn), kp)
        fd_n = central_diff(lambda x: naive_loss(v, kp, x), kn)
        assert rel_err(g.anchor, fd_v) < 1e-6
        assert rel_err(g.positive, fd_p) < 1e-6
        assert rel_err(g.negatives, fd_n) < 1e-6


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
@settings(max_examples=50)
def test_loss_monotone_in_logits(seed, delta):
    rng = np.random.default_rng(seed)
    ci = random_ci(rng, dim=6)
    base = emb_loss(ci)
    unit = ci.anchor / np.linalg.norm(ci.anchor) ** 2
    # raising v.k+ by delta lowers the loss; raising one v.k- raises it
    up = ContrastiveItem.from_vectors(ci.anchor, ci.positive + delta * unit, ci.negatives)
    assert emb_loss(up) < base
    neg = ci.negatives.copy()
    neg[0] += delta * unit
    assert emb_loss(ContrastiveItem.from_vectors(ci.anchor, ci.positive, neg)) > base
    assert base > 0


def test_mean_clip_loss(rng):
    assert mean_clip_loss([]) == 0.0
    ci = random_ci(rng)
    assert mean_clip_loss([ci]) == emb_loss(ci)
    cis = [random_ci(rng) for _ in range(9)]
    assert mean_clip_loss(cis) == pytest.approx(sum(emb_loss(c) for c in cis) / 9)


def _bank(n_tracks, dim=4, backgrounds=None):
    bank = MemoryBank()
    for g in range(n_tracks):
        bank.new_track(g)
        bank.append_observation(g, 0, np.eye(dim)[g % dim] + 0.1)
    for frame, k in (backgrounds or {}).items():
        bank.add_background(frame, np.full((k, dim), 0.5 + frame))
    return bank


def test_build_cis_frame_zero_and_single():
    bank = _bank(1)
    assert build_cis(bank, {0: np.ones(4)}, 0) == []
    (ci,) = build_cis(bank, {0: np.ones(4)}, 1)
    assert ci.major.shape == (0, 4)
    assert ci.supplementary.shape == (0, 4)
    np.testing.assert_array_equal(ci.positive, bank.tracks[0].ma_embedding)


def test_build_cis_local_counts():
    bank = _bank(3, backgrounds={0: 4})
    cis = build_cis(bank, {g: np.ones(4) * g for g in range(3)}, 1, "major_plus_local")
    assert len(cis) == 3
    for ci in cis:
        assert (len(ci.major), len(ci.supplementary)) == (2, 4)
        assert ci.negative_tags == ["major"] * 2 + ["supplementary"] * 4
        others = [bank.tracks[g].ma_embedding for g in range(3) if g != ci.key]
        np.testing.assert_array_equal(ci.major, others)


def test_build_cis_modes_pool_selection():
    bank = _bank(3, backgrounds={0: 2, 1: 3, 2: 5})
    present = {0: np.ones(4), 1: np.ones(4), 7: np.ones(4)}  # 7 is new: no item
    counts = {}
    for mode in NegativeMode:
        cis = build_cis(bank, present, 3, mode)
        assert sorted(ci.key for ci in cis) == [0, 1]
        counts[mode.value] = (len(cis[0].major), len(cis[0].supplementary))
    assert counts == {
        "major_only": (2, 0),
        "major_plus_local": (2, 5),
        "major_plus_global": (2, 10),
        "supplementary_only": (0, 5),
    }
    # only strictly earlier frames feed the pool
    assert len(build_cis(bank, present, 2, "major_plus_global")[0].supplementary) == 5


def test_negative_mode_rejects_unknown():
    with pytest.raises(ValueError):
        build_cis(_bank(2), {0: np.ones(4)}, 1, "everything")
