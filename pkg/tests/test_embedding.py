import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointmae.dims import DESK, FULL, TINY, ModelDims
from jointmae.embedding import (
    EMBED_2D_CALLS,
    TokenSet3D,
    embed_2d,
    embed_3d,
    make_mask_plan,
    masked_count,
    patchify,
    token_grid,
    upsample_mask,
    visible_tokens,
)
from jointmae.geometry import normalize_to_cube
from jointmae.pipeline.model import init_model


@pytest.fixture(scope="module")
def desk_tree():
    return init_model(DESK, seed=0)


@pytest.fixture(scope="module")
def cloud():
    return normalize_to_cube(np.random.default_rng(5).normal(size=(DESK.n_points, 3)))


class TestDims:
    def test_presets_validate(self):
        for d in (DESK, FULL, TINY):
            d.validate()

    def test_full_counts(self):
        assert (FULL.g1, FULL.g2, FULL.stage1_dim, FULL.width_c, FULL.k1, FULL.k2) == (128, 32, 192, 384, 16, 4)
        assert FULL.gi == 196 and FULL.grid == (14, 14)

    def test_indivisible_image(self):
        with pytest.raises(ValueError):
            ModelDims(height=60).validate()

    def test_width_needs_multiple_of_four(self):
        with pytest.raises(ValueError):
            ModelDims(width_c=90, heads=6).validate()


class TestEmbed3D:
    def test_desk_shapes_and_centers_subset(self, desk_tree, cloud):
        tok = embed_3d(cloud, desk_tree, DESK)
        assert tok.tokens.shape == (1, 16, 96)
        assert tok.stage_centers.shape == (1, 64, 3)
        assert np.array_equal(tok.centers[0], cloud[tok.center_index[0]])

    def test_full_scale_shapes(self):
        tree = init_model(FULL, seed=0)
        pts = normalize_to_cube(np.random.default_rng(0).normal(size=(2048, 3)))
        assert embed_3d(pts, tree, FULL).tokens.shape == (1, 32, 384)

    def test_permutation_invariant(self, desk_tree, cloud):
        perm = np.random.default_rng(3).permutation(len(cloud))
        a = embed_3d(cloud, desk_tree, DESK)
        b = embed_3d(cloud[perm], desk_tree, DESK)
        assert np.array_equal(a.tokens.data, b.tokens.data)
        assert np.array_equal(a.centers, b.centers)

    def test_every_point_assigned_to_nearest_center(self, desk_tree, cloud):
        tok = embed_3d(cloud, desk_tree, DESK)
        d = np.linalg.norm(cloud[:, None] - tok.centers[0][None], axis=-1)
        assert np.array_equal(tok.group_assignment[0], np.argmin(d, axis=1))

    def test_fine_parent_is_nearest_final_center(self, desk_tree, cloud):
        tok = embed_3d(cloud, desk_tree, DESK)
        d = np.linalg.norm(tok.stage_centers[0][:, None] - tok.centers[0][None], axis=-1)
        assert np.array_equal(tok.fine_parent[0], np.argmin(d, axis=1))

    def test_too_few_points(self, desk_tree):
        with pytest.raises(ValueError):
            embed_3d(np.random.default_rng(0).normal(size=(32, 3)), desk_tree, DESK)

    def test_identical_cloud_identical_tokens(self, desk_tree, cloud):
        a = embed_3d(cloud, desk_tree, DESK).tokens.data
        b = embed_3d(cloud.copy(), desk_tree, DESK).tokens.data
        assert np.array_equal(a, b)


class TestEmbed2D:
    def test_token_counts(self, desk_tree):
        assert embed_2d(np.zeros((64, 64)), desk_tree, DESK).tokens.shape == (1, 16, 96)
        assert token_grid(FULL).shape == (196, 2)

    def test_full_scale_tokens(self):
        tree = init_model(FULL, seed=0)
        assert embed_2d(np.zeros((224, 224)), tree, FULL).tokens.shape == (1, 196, 384)

    def test_indivisible_map(self, desk_tree):
        with pytest.raises(ValueError):
            embed_2d(np.zeros((60, 64)), desk_tree, DESK)

    def test_constant_zero_map_interior_tokens_equal(self, desk_tree):
        tok = embed_2d(np.zeros((64, 64)), desk_tree, DESK).tokens.data[0].reshape(4, 4, -1)
        # with zero input every position sees the same (bias-only) values, up to zero padding at
        # the top/left border of each stride-2 conv; interior tokens are therefore identical
        interior = tok[1:, 1:].reshape(-1, tok.shape[-1])
        assert np.allclose(interior, interior[0], atol=0.0)

    def test_patchify_roundtrip_order(self):
        m = np.arange(64.0).reshape(1, 8, 8)
        p = patchify(m, 4)
        assert p.shape == (1, 2, 2, 16)
        assert list(p[0, 0, 1, :4]) == [4.0, 5.0, 6.0, 7.0]

    @given(st.integers(0, 1000))
    def test_masked_pixels_do_not_leak(self, seed):
        tree = _tiny_tree()
        rng = np.random.default_rng(seed)
        plan = make_mask_plan(0.5, TINY.g2, TINY.gi, TINY.grid, seed)
        a = rng.uniform(size=(TINY.height, TINY.width))
        b = a.copy()
        hidden = upsample_mask(plan.mask2d[None], TINY.grid, TINY.TOKEN_PX)[0]
        b[hidden] = rng.uniform(size=int(hidden.sum()))
        ta = embed_2d(a, tree, TINY, plan.mask2d[None]).tokens.data[0]
        tb = embed_2d(b, tree, TINY, plan.mask2d[None]).tokens.data[0]
        assert np.array_equal(ta[plan.visible2d], tb[plan.visible2d])

    def test_call_counter(self, desk_tree):
        before = EMBED_2D_CALLS["count"]
        embed_2d(np.zeros((64, 64)), desk_tree, DESK)
        assert EMBED_2D_CALLS["count"] == before + 1


_TINY = {}


def _tiny_tree():
    if "t" not in _TINY:
        _TINY["t"] = init_model(TINY, seed=1)
    return _TINY["t"]


class TestMaskPlan:
    def test_ratio_zero(self):
        plan = make_mask_plan(0.0, 16, 16, (4, 4), 0)
        assert not plan.mask3d.any() and not plan.mask2d.any()

    def test_full_counts(self):
        plan = make_mask_plan(0.75, 32, 196, (14, 14), 7)
        assert plan.mask3d.sum() == 24 and plan.mask2d.sum() == 147

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            make_mask_plan(1.0, 16, 16, (4, 4), 0)

    @given(st.floats(0.0, 0.99), st.integers(1, 64), st.integers(1, 12), st.integers(0, 10_000))
    def test_exact_counts(self, ratio, g2, side, seed):
        plan = make_mask_plan(ratio, g2, side * side, (side, side), seed)
        assert plan.mask3d.sum() == masked_count(ratio, g2)
        assert plan.mask2d.sum() == masked_count(ratio, side * side)

    def test_multiscale_consistency_over_1000_plans(self):
        rng = np.random.default_rng(0)
        for seed in range(1000):
            centers = rng.uniform(-1, 1, size=(16, 3))
            fine = rng.uniform(-1, 1, size=(64, 3))
            parent = np.argmin(np.linalg.norm(fine[:, None] - centers[None], axis=-1), axis=1)
            plan = make_mask_plan(0.75, 16, 16, (4, 4), seed, parent)
            d = np.linalg.norm(fine[:, None] - centers[None], axis=-1)
            assert np.array_equal(plan.fine_mask3d, plan.mask3d[np.argmin(d, axis=1)])

    def test_deterministic(self):
        a = make_mask_plan(0.75, 16, 16, (4, 4), [3, 1])
        b = make_mask_plan(0.75, 16, 16, (4, 4), [3, 1])
        assert np.array_equal(a.mask3d, b.mask3d) and np.array_equal(a.mask2d, b.mask2d)

    def test_upsample(self):
        m = np.array([[True, False, False, True]])
        up = upsample_mask(m, (2, 2), 2)
        assert up.shape == (1, 4, 4)
        assert up[0, :2, :2].all() and not up[0, :2, 2:].any()


class TestVisibleTokens:
    def test_all_visible_identity(self, desk_tree, cloud):
        tok = embed_3d(cloud, desk_tree, DESK)
        vis = visible_tokens(tok)
        assert np.array_equal(vis.tokens.data, tok.tokens.data)

    def test_desk_ratio_leaves_four_rows_with_matching_meta(self, desk_tree, cloud):
        tok = embed_3d(cloud, desk_tree, DESK)
        plan = make_mask_plan(0.75, 16, 16, (4, 4), 2)
        tok.visible = plan.visible3d[None]
        vis = visible_tokens(tok)
        assert vis.tokens.shape == (1, 4, 96)
        idx = np.nonzero(plan.visible3d)[0]
        assert np.array_equal(vis.index[0], idx)
        assert np.array_equal(vis.meta[0], tok.centers[0][idx])
        assert np.array_equal(vis.tokens.data[0], tok.tokens.data[0][idx])

    def test_2d_meta_is_grid_cells(self, desk_tree):
        plan = make_mask_plan(0.75, 16, 16, (4, 4), 4)
        t2 = embed_2d(np.zeros((64, 64)), desk_tree, DESK, plan.mask2d[None])
        vis = visible_tokens(t2)
        idx = np.nonzero(plan.visible2d)[0]
        assert np.array_equal(vis.meta[0], np.stack(np.divmod(idx, 4), axis=1))

    def test_tokenset_type(self, desk_tree, cloud):
        assert isinstance(embed_3d(cloud, desk_tree, DESK), TokenSet3D)
