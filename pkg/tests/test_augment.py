import numpy as np
import pytest

from rgbt_sod.augment import CorruptionPolicy, hflip, make_rng, maybe_corrupt, standard_augment
from rgbt_sod.data import ModalityPair


def _pair(h=4, w=5, seed=0):
    rng = np.random.default_rng(seed)
    return ModalityPair(rng.random((3, h, w), dtype=np.float32), rng.random((3, h, w), dtype=np.float32))


def test_no_corruption_when_disabled():
    pair = _pair()
    rng = make_rng(0)
    for _ in range(200):
        out, rec = maybe_corrupt(pair, CorruptionPolicy(p_corrupt=0.0), rng)
        assert out is pair and not rec.corrupted and rec.to_log() is None


def test_forced_rgb_zero():
    pair = _pair()
    out, rec = maybe_corrupt(pair, CorruptionPolicy.forced("rgb", "zero"), make_rng(1))
    assert (rec.modality, rec.kind) == ("rgb", "zero")
    assert not out.rgb.any()
    assert np.array_equal(out.thermal, pair.thermal)


def test_forced_thermal_noise_is_seeded():
    pair = _pair(32, 32)
    policy = CorruptionPolicy.forced("thermal", "noise")
    a, rec = maybe_corrupt(pair, policy, make_rng(3, 0, 7))
    b, _ = maybe_corrupt(pair, policy, make_rng(3, 0, 7))
    c, _ = maybe_corrupt(pair, policy, make_rng(3, 0, 8))
    assert rec.to_log() == {"modality": "thermal", "kind": "noise"}
    assert np.array_equal(a.thermal, b.thermal) and not np.array_equal(a.thermal, c.thermal)
    assert np.array_equal(a.rgb, pair.rgb)
    assert a.thermal.min() < 0  # unclipped standard normal


def test_clipped_noise_stays_in_range():
    policy = CorruptionPolicy(1.0, 0.0, 0.0, clip_noise=True)
    out, _ = maybe_corrupt(_pair(16, 16), policy, make_rng(0))
    assert out.thermal.min() >= 0 and out.thermal.max() <= 1


def test_default_policy_frequencies():
    pair = _pair(1, 1)
    rng = make_rng(2024)
    recs = [maybe_corrupt(pair, CorruptionPolicy(), rng)[1] for _ in range(20000)]
    hit = [r for r in recs if r.corrupted]
    assert 0.09 <= len(hit) / len(recs) <= 0.11
    assert 0.47 <= np.mean([r.modality == "rgb" for r in hit]) <= 0.53
    assert 0.47 <= np.mean([r.kind == "zero" for r in hit]) <= 0.53


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_policy_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        CorruptionPolicy(p_corrupt=p)


def test_flip_involution_and_mask():
    pair = _pair()
    mask = np.arange(20, dtype=np.float32).reshape(4, 5)
    p1, m1 = hflip(pair, mask)
    assert np.array_equal(m1, mask[:, ::-1])
    assert np.array_equal(p1.rgb, pair.rgb[..., ::-1]) and np.array_equal(p1.thermal, pair.thermal[..., ::-1])
    p2, m2 = hflip(p1, m1)
    assert np.array_equal(p2.rgb, pair.rgb) and np.array_equal(m2, mask)


def test_flip_rate():
    pair, mask = _pair(1, 2), np.array([[0.0, 1.0]], dtype=np.float32)
    rng = make_rng(11)
    flips = sum(standard_augment(pair, mask, rng)[1][0, 0] == 1.0 for _ in range(1000))
    assert 0.46 <= flips / 1000 <= 0.54


def test_augment_keeps_alignment():
    pair = _pair(8, 8)
    mask = (pair.rgb[0] > 0.5).astype(np.float32)
    rng = make_rng(5)
    for _ in range(20):
        p, m = standard_augment(pair, mask, rng)
        assert np.array_equal(m, (p.rgb[0] > 0.5).astype(np.float32))
