import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenrate import cost
from tokenrate.autograd import Tensor
from tokenrate.schedule import CompressionSchedule
from tokenrate.tokens import (
    MergeMap,
    ScheduleCompressor,
    apply_schedule,
    merge,
    prune,
    sort_tokens,
    stage_plan,
    uncompress,
)
from tokenrate.vit import ModelConfig

from conftest import random_params

# --- sorting ----------------------------------------------------------------------


def test_sorted_already():
    assert sort_tokens(np.array([0.0, 0.5, 0.3, 0.2])).order.tolist() == [0, 1, 2, 3]


def test_class_token_first_even_when_small():
    assert sort_tokens(np.array([0.0, 0.1, 0.9])).order.tolist() == [0, 2, 1]


def test_tie_break_ascending_index():
    for _ in range(3):
        assert sort_tokens(np.array([0.1, 0.2, 0.2, 0.2, 0.1])).order.tolist() == [0, 1, 2, 3, 4]


def test_masked_token_ranked_last():
    metric = np.array([0.0, 0.1, 0.9, 0.3])
    order = sort_tokens(metric, mask=np.array([1, 1, 0, 1])).order
    assert order.tolist() == [0, 3, 1, 2]


def test_ranks_inverse(rng):
    o = sort_tokens(rng.random((3, 6)))
    r = o.ranks()
    for b in range(3):
        assert np.all(o.order[b][r[b]] == np.arange(6))


# --- pruning ----------------------------------------------------------------------------


def test_prune_examples():
    order = np.array([0, 3, 1, 4, 2])
    assert prune(order, 0).tolist() == order.tolist()
    assert prune(order, 4).tolist() == [0]
    kept = prune(order, 2)
    assert set(range(5)) - set(kept.tolist()) == {4, 2}
    with pytest.raises(ValueError):
        prune(order, 5)


# --- merging ---------------------------------------------------------------------------


def test_merge_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 5, 3)))
    out, maps = merge(x, 0)
    np.testing.assert_array_equal(out.data, x.data)
    assert all(m.entries == [] for m in maps)


def test_merge_identical_vectors():
    v = np.array([1.0, 2.0, 3.0])
    x = np.stack([np.zeros(3) + 7, v, np.array([0.0, 1.0, 0.0]), v])
    out, maps = merge(Tensor(x), 1)
    assert maps[0].entries == [(3, 1, 2)]
    np.testing.assert_array_equal(out.data[1], v)


def test_merge_prefers_most_similar():
    s = np.array([1.0, 0.0])
    d1 = np.array([0.9, np.sqrt(1 - 0.81)])  # cos 0.9 with s
    d2 = np.array([0.4, np.sqrt(1 - 0.16)])  # cos 0.4 with s
    x = np.stack([np.array([0.0, 5.0]), d2, d1, s])
    out, maps = merge(Tensor(x), 1)
    assert maps[0].entries == [(3, 2, 2)]
    np.testing.assert_allclose(out.data[2], (d1 + s) / 2)
    np.testing.assert_array_equal(out.data[1], d2)


def test_multi_source_mean(rng):
    dest = rng.normal(size=4)
    srcs = [dest * c for c in (1.5, 2.0, 0.5)]
    x = np.stack([rng.normal(size=4), dest, -dest] + srcs)
    x[2] = -dest  # anti-aligned, never chosen
    out, maps = merge(Tensor(x[None]), 3)
    assert {d for _, d, _ in maps[0].entries} == {1}
    np.testing.assert_allclose(out.data[0, 1], np.mean([dest] + srcs, axis=0))
    assert all(g == 4 for _, _, g in maps[0].entries)


def test_merge_without_destination():
    with pytest.raises(ValueError, match="no eligible destination"):
        merge(Tensor(np.ones((1, 3, 2))), 2)


def test_merge_deterministic(rng):
    x = Tensor(rng.normal(size=(3, 8, 4)))
    a = merge(x, 3)[1]
    b = merge(x, 3)[1]
    assert [m.entries for m in a] == [m.entries for m in b]


# --- uncompress --------------------------------------------------------------------------


def test_uncompress_identity(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(uncompress(Tensor(x), MergeMap(4)).data, x)


def test_uncompress_single_merge(rng):
    x = rng.normal(size=(5, 3))
    out, maps = merge(Tensor(x), 1)
    full = uncompress(out.data[0] if out.ndim == 3 else out.data, maps[0]).data
    s, d, _ = maps[0].entries[0]
    np.testing.assert_array_equal(full[s], full[d])
    assert full.shape == x.shape


def test_uncompress_round_trip(rng):
    x = rng.normal(size=(2, 7, 3))
    out, maps = merge(Tensor(x), 3)
    for b in range(2):
        full = uncompress(out.data[b], maps[b]).data
        assert full.shape == (7, 3)
        kept = [i for i in range(7) if i not in maps[b].sources()]
        np.testing.assert_array_equal(full[kept], out.data[b])


def test_uncompress_pruned_positions_zero(rng):
    x = rng.normal(size=(3, 2))
    full = uncompress(Tensor(x), MergeMap(5), pruned=[1, 4]).data
    np.testing.assert_array_equal(full[[1, 4]], 0)
    np.testing.assert_array_equal(full[[0, 2, 3]], x)


def test_uncompress_inconsistent_map(rng):
    with pytest.raises(ValueError):
        uncompress(Tensor(rng.normal(size=(3, 2))), MergeMap(5, [(4, 1, 2)]))
    with pytest.raises(ValueError):
        MergeMap(5, [(4, 1, 2), (4, 2, 2)]).validate()
    with pytest.raises(ValueError):
        MergeMap(5, [(4, 3, 2)]).validate(pruned=[3])


# --- stage plan and apply ----------------------------------------------------------------


@pytest.mark.parametrize(
    "option,expected",
    [("prune_merge", (6, 4, "prune")), ("merge_prune", (4, 4, "merge")), ("prune", (6, 6, "prune")), ("merge", (10, 4, "prune"))],
)
def test_stage_plan(option, expected):
    assert stage_plan(10, 6, 4, option) == expected


def test_zero_schedule_op_count(tiny_cfg, tiny_params):
    n, d = tiny_cfg.token_count, tiny_cfg.embed_dim
    res = apply_schedule(tiny_params, CompressionSchedule.zero(n, tiny_cfg.depth), np.zeros((2, 6, 6, 3)), tiny_cfg)
    assert res.macs == tiny_cfg.depth * (12 * n * d * d + 2 * n * n * d)


def test_measured_macs_match_model(rng):
    cfg = ModelConfig(depth=2, embed_dim=8, heads=2, patch_size=2, image_size=4, classes=3)
    p = random_params(cfg, rng)
    imgs = rng.random((3, 4, 4, 3))
    n = cfg.token_count
    for kp, km in itertools.product(itertools.product(range(1, n + 1), repeat=2), repeat=2):
        s = CompressionSchedule(n, kp, km)
        res = apply_schedule(p, s, imgs, cfg)
        assert res.macs == cost.schedule_flops(s, cfg)
        assert res.token_counts == s.effective_counts()


@pytest.mark.parametrize("option", ["prune_merge", "merge_prune", "prune", "merge"])
def test_options_reach_counts(option, rng, tiny_cfg):
    p = random_params(tiny_cfg, rng)
    n = tiny_cfg.token_count
    s = CompressionSchedule(n, [8, 6, 3], [7, 4, 2])
    res = apply_schedule(p, s, rng.random((2, 6, 6, 3)), tiny_cfg, option=option, record=True)
    if option == "prune":
        assert res.token_counts == [8, 6, 3]
    elif option == "merge":
        assert res.token_counts == [7, 4, 2]
    else:
        assert res.token_counts == [7, 4, 2]
    assert len(res.records) == 3


def test_merge_into_class_only_drops(rng, tiny_cfg):
    p = random_params(tiny_cfg, rng)
    n = tiny_cfg.token_count
    s = CompressionSchedule(n, [n, n, n], [1, 1, 1])
    res = apply_schedule(p, s, rng.random((1, 6, 6, 3)), tiny_cfg, option="merge")
    assert res.token_counts == [1, 1, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_records_keep_sorted_prefix(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(depth=2, embed_dim=8, heads=2, patch_size=2, image_size=6, classes=3)
    p = random_params(cfg, rng)
    n = cfg.token_count
    from tokenrate.schedule import random_schedule

    s = random_schedule(n, cfg.depth, rng)
    res = apply_schedule(p, s, rng.random((2, 6, 6, 3)), cfg, record=True)
    for rec in res.records:
        for b in range(2):
            assert sorted(rec.order[b].tolist()) == list(range(rec.n_in))
            assert rec.order[b][0] == 0
            srcs = rec.merge_maps[b].sources()
            assert all(s_ >= rec.n_out for s_ in srcs)
            assert all(d < rec.n_out for _, d, _ in rec.merge_maps[b].entries)


def test_schedule_compressor_rejects_option():
    with pytest.raises(ValueError):
        ScheduleCompressor(CompressionSchedule.zero(5, 1), option="shuffle")
