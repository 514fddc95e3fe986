import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivc_prune.layout import GridLayout
from ivc_prune.rope_core import RopeConfig, ScoreTable, score_table
from ivc_prune.selection import (
    SelectionConfig,
    SelectionResult,
    foreground_refine,
    ivc_budget,
    ivc_select,
    map_to_tiles,
    select_per_frame,
    select_tokens,
    semantic_seed,
    topk_indices,
)
from reference import scalar_stage_scores


def _values(rng, L, N, D=16):
    return rng.standard_normal((L, D)), rng.standard_normal((N, D))


class TestTopK:
    def test_ties_prefer_lower_index(self):
        assert topk_indices(np.array([1.0, 3.0, 3.0, 3.0, 0.0]), 2).tolist() == [1, 2]

    def test_clamped(self):
        assert topk_indices(np.array([1.0, 2.0]), 5).tolist() == [0, 1]
        assert topk_indices(np.array([1.0, 2.0]), 0).tolist() == []

    def test_neg_inf_ranks_last(self):
        assert topk_indices(np.array([-np.inf, 0.5, 0.1]), 2).tolist() == [1, 2]


class TestIvcSelect:
    def test_n16_d4_one_per_axis(self):
        # exhaustive enumeration of V/U over m=0..15 puts the maxima at 0 and 14
        table = score_table(16, RopeConfig(4))
        assert ivc_budget(16, 0.125) == (1, 1)
        assert ivc_select(table, 0.125).tolist() == [0, 14]

    def test_full_budget_with_disjoint_tops(self):
        v = np.array([1.0] * 8 + [0.0] * 8)
        u = np.array([0.0] * 8 + [1.0] * 8)
        assert ivc_select(ScoreTable(v, u), 1.0).tolist() == list(range(16))

    def test_tie_goes_to_lower_index(self):
        v = np.array([0.0, 5.0, 5.0, 1.0])
        u = np.array([-1.0, -1.0, -1.0, -1.0])
        assert ivc_select(ScoreTable(v, u), 0.5).tolist() == [0, 1]  # V picks 1, U ties pick 0

    def test_degenerate_budget_keeps_v_argmax_only(self):
        table = score_table(10, RopeConfig(8))
        assert ivc_budget(10, 0.1) == (1, 0)
        assert ivc_select(table, 0.1).tolist() == [0]

    def test_union_never_exceeds_total_budget(self):
        for n in range(2, 300, 7):
            for k_c in (0.05, 0.1, 0.2, 0.33):
                b_v, b_u = ivc_budget(n, k_c)
                if k_c * n >= 2:
                    assert b_v + b_u == math.ceil(round(k_c * n, 9))
                assert len(ivc_select(score_table(n, RopeConfig(16)), k_c)) <= max(b_v + b_u, 1)

    def test_per_line_selection_keeps_separators(self):
        layout = GridLayout(4, 20, line_separators=True)
        table = score_table(layout.n_tokens, RopeConfig(8), layout)
        ivc = ivc_select(table, 0.1, layout)
        assert set(layout.protected.tolist()) <= set(ivc.tolist())
        starts = [s for s, _ in layout.segments]
        assert set(starts) <= set(ivc.tolist())  # local position 0 tops V in every line
        for start, stop in layout.segments:
            inside = [i for i in ivc if start <= i < stop]
            assert len(inside) <= 2

    def test_per_tile_selection(self):
        layout = GridLayout(4, 8, tile_grid=(1, 2))
        table = score_table(32, RopeConfig(8), layout)
        per_tile = ivc_select(score_table(16, RopeConfig(8)), 0.125)
        got = ivc_select(table, 0.125, layout)
        assert got.tolist() == sorted(per_tile.tolist() + (per_tile + 16).tolist())


class TestSemanticSeed:
    def test_aligned_token_wins(self):
        e1 = np.array([1.0, 0.0, 0.0])
        v_img = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        s, seed = semantic_seed(np.array([3.0 * e1]), v_img)
        assert s[0] > s[1] and seed.tolist() == [0]

    def test_scores_sum_to_one(self, rng):
        v_text, v_img = _values(rng, 5, 37)
        s, _ = semantic_seed(v_text, v_img)
        assert abs(s.sum() - 1.0) < 1e-6

    def test_matches_double_loop(self, rng):
        v_text, v_img = _values(rng, 3, 8)
        s, _ = semantic_seed(v_text, v_img)
        np.testing.assert_allclose(s, scalar_stage_scores(v_text, v_img), atol=1e-9)

    @pytest.mark.parametrize("n,expected", [(1, 1), (99, 1), (100, 1), (101, 2), (256, 3), (1024, 11)])
    def test_seed_size(self, rng, n, expected):
        v_text, v_img = _values(rng, 2, n)
        assert len(semantic_seed(v_text, v_img)[1]) == expected

    def test_no_text(self, rng):
        with pytest.raises(ValueError, match="no text tokens"):
            semantic_seed(np.zeros((0, 16)), rng.standard_normal((4, 16)))


class TestForegroundRefine:
    def test_empty_seed_rejected(self, rng):
        v_text, v_img = _values(rng, 2, 8)
        with pytest.raises(ValueError, match="seed"):
            foreground_refine(v_text, v_img, [], 0.4)

    def test_seed_out_of_range(self, rng):
        v_text, v_img = _values(rng, 2, 8)
        with pytest.raises(ValueError):
            foreground_refine(v_text, v_img, [8], 0.4)

    def test_scores_sum_to_one(self, rng):
        v_text, v_img = _values(rng, 2, 30)
        f, fg = foreground_refine(v_text, v_img, [3, 4], 0.4)
        assert abs(f.sum() - 1.0) < 1e-6
        assert len(fg) == 12

    def test_matches_double_loop(self, rng):
        v_text, v_img = _values(rng, 2, 12)
        f, _ = foreground_refine(v_text, v_img, [5], 0.4)
        oracle = scalar_stage_scores(np.vstack([v_text, v_img[[5]]]), v_img)
        np.testing.assert_allclose(f, oracle, atol=1e-9)

    def test_seed_rows_change_ranking(self):
        # token 1 is text-orthogonal but shares a direction with the seed;
        # token 2 is weakly text-aligned only. Stage 2 must flip their order.
        v_text = np.array([[2.0, 0, 0, 0]])
        v_img = np.array([[3.0, 3, 0, 0], [0, 3, 0, 0], [0.5, 0, 0, 0], [0, 0, 0, 0]] + [[0, 0, 0, -1.0]] * 96)
        s, seed = semantic_seed(v_text, v_img)
        f, fg = foreground_refine(v_text, v_img, seed, 0.02)
        assert seed.tolist() == [0]
        assert s[2] > s[1]
        assert f[1] > f[2]
        assert fg.tolist() == [0, 1]


class TestSelectTokens:
    def test_retain_all(self, rng):
        v_text, v_img = _values(rng, 3, 20)
        cfg = SelectionConfig(k_c=1.0, k_f=1.0)
        res = select_tokens(v_text, v_img, score_table(20, RopeConfig(8)), cfg)
        assert res.selected == tuple(range(20))

    def test_defaults_n100(self, rng):
        v_text, v_img = _values(rng, 6, 100)
        res = select_tokens(v_text, v_img, score_table(100, RopeConfig(64)))
        assert 40 <= len(res.selected) <= 50
        assert len(res.foreground) == 40 and len(res.ivc) <= 10
        assert len(res.seed) == 1

    def test_deterministic(self, rng):
        v_text, v_img = _values(rng, 4, 64)
        table = score_table(64, RopeConfig(16))
        assert select_tokens(v_text, v_img, table) == select_tokens(v_text, v_img, table)

    def test_structure(self, rng):
        v_text, v_img = _values(rng, 4, 90)
        res = select_tokens(v_text, v_img, score_table(90, RopeConfig(16)))
        assert res.selected == tuple(sorted(set(res.ivc) | set(res.foreground)))
        assert list(res.selected) == sorted(set(res.selected))
        assert len(res.selected) <= math.ceil(0.1 * 90) + math.floor(0.4 * 90)

    def test_position_ids_carried(self, rng):
        v_text, v_img = _values(rng, 2, 10)
        pos = np.arange(10) + 37
        res = select_tokens(v_text, v_img, score_table(10, RopeConfig(8)), position_ids=pos)
        assert res.position_ids == tuple(i + 37 for i in res.selected)

    def test_protected_tokens_always_selected(self, rng):
        layout = GridLayout(6, 6, line_separators=True)
        n = layout.n_tokens
        v_text, v_img = _values(rng, 3, n)
        res = select_tokens(v_text, v_img, score_table(n, RopeConfig(8), layout), layout=layout)
        assert set(layout.protected.tolist()) <= set(res.selected)

    def test_text_range(self, rng):
        v_text, v_img = _values(rng, 6, 50)
        table = score_table(50, RopeConfig(8))
        sub = select_tokens(v_text, v_img, table, SelectionConfig(text_range=(2, 5)))
        direct = select_tokens(v_text[2:5], v_img, table)
        assert sub == direct

    def test_table_mismatch(self, rng):
        v_text, v_img = _values(rng, 2, 10)
        with pytest.raises(ValueError):
            select_tokens(v_text, v_img, score_table(11, RopeConfig(8)))

    def test_degenerate_flag(self, rng):
        v_text, v_img = _values(rng, 2, 10)
        res = select_tokens(v_text, v_img, score_table(10, RopeConfig(8)))
        assert res.ivc_degenerate and res.ivc == (0,)

    def test_round_trip_dict(self, rng):
        v_text, v_img = _values(rng, 2, 40)
        res = select_tokens(v_text, v_img, score_table(40, RopeConfig(8)))
        assert SelectionResult.from_dict(res.to_dict()) == res

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 16), st.integers(0, 2**32 - 1))
    def test_stage_scores_match_scalar_oracle(self, L, N, seed):
        rng = np.random.default_rng(seed)
        v_text, v_img = _values(rng, L, N, D=8)
        s, seeds = semantic_seed(v_text, v_img)
        f, _ = foreground_refine(v_text, v_img, seeds, 0.4)
        np.testing.assert_allclose(s, scalar_stage_scores(v_text, v_img), atol=1e-9)
        np.testing.assert_allclose(f, scalar_stage_scores(np.vstack([v_text, v_img[seeds]]), v_img), atol=1e-9)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"k_c": 0.0}, {"k_f": 1.5}, {"seed_fraction": -0.1}, {"selection_layer": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SelectionConfig(**kw)

    def test_default_fractions(self):
        cfg = SelectionConfig()
        assert (cfg.k_c, cfg.k_f, cfg.seed_fraction) == (0.10, 0.40, 0.01)

    def test_dict_round_trip(self):
        cfg = SelectionConfig(k_c=0.05, k_f=0.25, selection_layer=3, protected_layers={0})
        assert SelectionConfig.from_dict(cfg.to_dict()) == cfg


class TestMapToTiles:
    def test_block_expansion(self):
        assert map_to_tiles([0], GridLayout(2, 2), GridLayout(4, 4)).tolist() == [0, 1, 4, 5]

    def test_empty(self):
        assert map_to_tiles([], GridLayout(2, 2), GridLayout(4, 4)).tolist() == []

    def test_scale_three(self):
        got = map_to_tiles([3], GridLayout(2, 2), GridLayout(6, 6)).tolist()
        expected = sorted(r * 6 + c for r in range(3, 6) for c in range(3, 6))
        assert got == expected

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            map_to_tiles([0], GridLayout(2, 2), GridLayout(5, 4))

    def test_tiled_target_uses_token_order(self):
        tiles = GridLayout(4, 4, tile_grid=(2, 2))
        got = map_to_tiles([1], GridLayout(2, 2), tiles).tolist()
        assert got == [4, 5, 6, 7]  # thumbnail cell (0,1) covers the whole second tile


class TestPerFrame:
    def test_single_frame_matches(self, rng):
        v_text, v_img = _values(rng, 3, 36)
        rope = RopeConfig(8)
        layout = GridLayout(6, 6)
        cfg = SelectionConfig()
        (res,) = select_per_frame([(v_img, layout)], v_text, cfg, rope)
        assert res == select_tokens(v_text, v_img, score_table(36, rope, layout), cfg, layout)

    def test_identical_frames(self, rng):
        v_text, v_img = _values(rng, 3, 36)
        a, b = select_per_frame([(v_img, None), (v_img, None)], v_text, SelectionConfig(), RopeConfig(8))
        assert a == b

    def test_random_frames_within_budget(self, rng):
        v_text = rng.standard_normal((5, 16))
        frames = [(rng.standard_normal((100, 16)), GridLayout(10, 10)) for _ in range(3)]
        for res in select_per_frame(frames, v_text, SelectionConfig(), RopeConfig(16)):
            assert 0.40 <= len(res.selected) / 100 <= 0.50

    def test_no_frames(self, rng):
        with pytest.raises(ValueError):
            select_per_frame([], rng.standard_normal((2, 4)), SelectionConfig(), RopeConfig(4))
