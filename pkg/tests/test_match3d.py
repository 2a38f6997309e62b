import numpy as np
import pytest

from hiermatch.errors import EmptyCandidateSetError
from hiermatch.match3d import (
    Match3DConfig,
    SubvolumeDescriptor,
    VoxelGrid,
    candidates_per_axis,
    coarse_candidates,
    fine_candidates,
    match_3d,
)

from instances import match3d_case
from oracles import match3d_oracle


def test_default_candidate_counts():
    cfg = Match3DConfig()
    assert candidates_per_axis(cfg) == 11
    assert len(coarse_candidates((0, 0, 0), cfg)) == 11 ** 3


def test_gap_equal_to_span_gives_two_per_axis():
    cfg = Match3DConfig(region_edge=60, subvolume_edge=30, coarse_gap=30)
    assert candidates_per_axis(cfg) == 2
    pts = coarse_candidates((0, 0, 0), cfg)
    np.testing.assert_array_equal(np.unique(pts[:, 0]), [-15.0, 15.0])


def test_region_smaller_than_subvolume():
    with pytest.raises(EmptyCandidateSetError):
        candidates_per_axis(Match3DConfig(region_edge=20, subvolume_edge=30))


def test_coarse_candidates_are_lexicographic():
    pts = coarse_candidates((1, 2, 3), Match3DConfig(9, 3, 3))
    keys = [tuple(p) for p in pts]
    assert keys == sorted(keys)


def test_fine_candidates_stay_in_region():
    cfg = Match3DConfig()
    pts = fine_candidates((15.0, -15.0, 0.0), (0, 0, 0), cfg)
    assert np.all(np.abs(pts) <= 15.0)
    assert np.all(np.linalg.norm(pts - [15.0, -15.0, 0.0], axis=1) <= 15.0 + 1e-9)
    assert any(np.array_equal(p, [15.0, -15.0, 0.0]) for p in pts)


@pytest.mark.parametrize("seed", range(5))
def test_match_3d_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg, deep, shallow, deep_ref, shallow_ref = match3d_case(rng)
    center = (4.5, 4.5, 4.5)
    res = match_3d(deep_ref, shallow_ref, deep, shallow, center, cfg)
    c0, dc, c1, df, nc, nf = match3d_oracle(deep_ref, shallow_ref, deep, shallow, center, cfg)
    np.testing.assert_array_equal(res.coarse_center, c0)
    np.testing.assert_array_equal(res.refined_center, c1)
    assert res.d_coarse == pytest.approx(dc, abs=1e-12)
    assert res.d_fine == pytest.approx(df, abs=1e-12)
    assert (res.n_coarse_candidates, res.n_fine_candidates) == (nc, nf)
    np.testing.assert_array_equal(res.offset, c1 - np.array(center))


def test_subvolume_descriptor_locates_planted_block():
    rng = np.random.default_rng(5)
    ref = np.zeros((40, 40, 40))
    ref[14:26, 14:26, 14:26] = rng.random((12, 12, 12))
    shift = np.array([3, -2, 4])
    tgt = np.zeros_like(ref)
    tgt[14 + 3:26 + 3, 14 - 2:26 - 2, 14 + 4:26 + 4] = ref[14:26, 14:26, 14:26]
    cfg = Match3DConfig(region_edge=24, subvolume_edge=12, coarse_gap=3, fine_gap=1, refine_radius=4)
    g_ref, g_tgt = VoxelGrid(ref), VoxelGrid(tgt)
    p = np.array([20.0, 20.0, 20.0])
    res = match_3d(
        SubvolumeDescriptor(g_ref, 12, 2)(p),
        SubvolumeDescriptor(g_ref, 12, 4)(p),
        SubvolumeDescriptor(g_tgt, 12, 2),
        SubvolumeDescriptor(g_tgt, 12, 4),
        p,
        cfg,
    )
    np.testing.assert_array_equal(res.offset, shift)
    assert res.d_fine == pytest.approx(0.0, abs=1e-12)


def test_subvolume_descriptor_is_unit_and_zero_outside():
    g = VoxelGrid(np.random.default_rng(0).random((10, 10, 10)))
    d = SubvolumeDescriptor(g, 6, 3)((5, 5, 5))
    assert d.shape == (27,)
    assert np.linalg.norm(d) == pytest.approx(1.0)
    np.testing.assert_array_equal(SubvolumeDescriptor(g, 6, 3)((100, 100, 100)), 0.0)


def test_subvolume_descriptor_uneven_blocks():
    data = np.random.default_rng(1).random((40, 40, 40))
    center = np.array([20.0, 19.0, 21.0])
    got = SubvolumeDescriptor(VoxelGrid(data), 12, 5)(center)
    s = np.rint(center - 6).astype(int)
    block = data[s[0]:s[0] + 12, s[1]:s[1] + 12, s[2]:s[2] + 12]
    e = np.linspace(0, 12, 6).astype(int)
    means = np.array([
        block[e[a]:e[a + 1], e[b]:e[b + 1], e[c]:e[c + 1]].mean()
        for a in range(5) for b in range(5) for c in range(5)
    ])
    np.testing.assert_allclose(got, means / np.linalg.norm(means), atol=1e-15)
