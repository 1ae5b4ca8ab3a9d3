import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenrate import autograd as ag
from tokenrate import cost
from tokenrate.autograd import Tensor
from tokenrate.cost import (
    HW_DOMAINS,
    CostModel,
    HwConfig,
    HwSearchParam,
    calibrate,
    expected_hw_alpha,
    expected_hw_beta,
    expected_hw_kept,
    hw_beta_loss,
)
from tokenrate.schedule import CompressionSchedule, random_schedule
from tokenrate.vit import ModelConfig

from conftest import central_diff, rel_err

VIT_B = ModelConfig(depth=12, embed_dim=768, heads=12, patch_size=16, image_size=224, classes=1000)
VIT_S = ModelConfig(depth=12, embed_dim=384, heads=6, patch_size=16, image_size=224, classes=1000)


@pytest.fixture(scope="module")
def cm():
    return CostModel.load()


# --- FLOPs ----------------------------------------------------------------------------


def test_hand_evaluated_block():
    cfg = ModelConfig(depth=1, embed_dim=2, heads=1, patch_size=1, image_size=1, classes=2)
    # a 1x1 image gives N=2, so evaluate the formula directly at N=4
    assert cost.block_macs(4, 4, 2) == 4 * 4 * 4 + 2 * 16 * 2 + 8 * 4 * 4 == 256
    assert cost.flops([0.0], [0.0], cfg).item() == cost.block_macs(2, 2, 2)


def test_vit_b_baseline():
    f = cost.flops([0.0] * 12, [0.0] * 12, VIT_B).item()
    assert f == 17_447_454_720
    assert abs(f / 17.6e9 - 1) <= 0.02


def test_vit_s_reference_schedule():
    s = cost.vit_s_reference_schedule()
    blocks = cost.schedule_flops(s, VIT_S)
    total = cost.schedule_flops(s, VIT_S, include_stem=True)
    assert blocks == pytest.approx(2.8468e9, rel=1e-4)
    assert abs(total / 2.9e9 - 1) <= 0.05


def test_differentiable_matches_integer_counts(rng):
    cfg = ModelConfig(depth=3, embed_dim=8, heads=2, patch_size=2, image_size=6, classes=3)
    for _ in range(50):
        s = random_schedule(cfg.token_count, cfg.depth, rng)
        ap, am = s.alphas()
        assert cost.flops(ap, am, cfg).item() == pytest.approx(cost.schedule_flops(s, cfg), abs=1e-6)


def test_flops_gradient_through_running_max(rng):
    cfg = ModelConfig(depth=3, embed_dim=8, heads=2, patch_size=2, image_size=6, classes=3)
    n, c = cfg.token_count, cfg.embed_dim

    def by_running(a):
        total, n_in = 0.0, n
        for x in a:
            n_out = n * (1 - x)
            total += 4 * n_in * c * c + 2 * n_in * n_in * c + 8 * n_out * c * c
            n_in = n_out
        return total

    for _ in range(10):
        ap = np.sort(rng.uniform(0, 0.8, 3))
        am = ap - 0.05
        tp = [Tensor(v, requires_grad=True) for v in ap]
        tm = [Tensor(v, requires_grad=True) for v in am]
        cost.flops(tp, tm, cfg).backward()
        d_running = central_diff(by_running, ap)
        # the straight-through max hands each block's gradient back to every earlier rate
        expect = np.cumsum(d_running[::-1])[::-1]
        assert rel_err([t.grad for t in tp], expect) <= 1e-6
        assert rel_err([t.grad for t in tm], expect) <= 1e-6


def test_flops_rejects_empty_block():
    cfg = ModelConfig(depth=1, embed_dim=8, heads=2, patch_size=2, image_size=4, classes=3)
    with pytest.raises(ValueError):
        cost.flops([1.0], None, cfg)


def test_flops_monotone(rng):
    cfg = ModelConfig(depth=3, embed_dim=8, heads=2, patch_size=2, image_size=6, classes=3)
    n = cfg.token_count
    for _ in range(50):
        s = random_schedule(n, cfg.depth, rng)
        base = cost.schedule_flops(s, cfg)
        l = int(rng.integers(cfg.depth))
        p = list(s.prune_kept)
        if p[l] > 1:
            p[l] -= 1
            assert cost.schedule_flops(CompressionSchedule(n, p, s.merge_kept), cfg) <= base


def test_minimum_flops():
    cfg = ModelConfig(depth=2, embed_dim=8, heads=2, patch_size=2, image_size=4, classes=3)
    s = CompressionSchedule(cfg.token_count, [1, 1], [1, 1])
    assert cost.schedule_flops(s, cfg) == cost.minimum_flops(cfg)


# --- losses ---------------------------------------------------------------------------------


def test_flops_loss():
    assert cost.flops_loss(Tensor(5.0), 5.0).item() == 0.0
    assert cost.flops_loss(Tensor(6.0), 5.0).item() == 1.0
    f = Tensor(7.5, requires_grad=True)
    cost.flops_loss(f, 5.0).backward()
    assert f.grad == pytest.approx(5.0)
    with pytest.raises(ValueError):
        cost.flops_loss(Tensor(1.0), 0.0)


def test_hw_loss_examples():
    assert cost.hw_loss(Tensor(3.0), 3.0).item() == 0.0
    assert cost.hw_loss(Tensor(1.0), 0.0).item() == pytest.approx(0.433781, abs=1e-6)
    assert cost.hw_loss(Tensor(1e4), 0.0).item() == pytest.approx(1e4 - math.log(2))


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_hw_loss_symmetric(e, t):
    a = cost.hw_loss(Tensor(e), t).item()
    b = cost.hw_loss(Tensor(t), e).item()
    assert a == b and a >= 0 and math.isfinite(a)


# --- overhead closed forms ------------------------------------------------------------------


def test_overhead():
    assert cost.overhead_parameters(196, 12) == 4704
    assert cost.overhead_flops(196, 12) == 236376


# --- synthetic accelerator --------------------------------------------------------------------


def test_shipped_model_is_calibration(cm):
    assert cm.to_dict() == calibrate().to_dict()


def test_anchor_calibration(cm):
    lat, pw = cm.schedule_metrics(CompressionSchedule.zero(197, 12))
    assert abs(lat / 68.1 - 1) <= 0.01 and abs(pw / 156.0 - 1) <= 0.01
    lat, pw = cm.schedule_metrics(cost.vit_s_reference_schedule())
    assert abs(lat / 40.1 - 1) <= 0.01 and abs(pw / 98.0 - 1) <= 0.01


def test_mesh_doubling_quarters_compute(cm):
    lat = {m: cm.block_latency(150, HwConfig(mesh_row=m, mesh_col=m)) for m in (4, 8, 16)}
    # only the compute term depends on the mesh, so successive differences shrink by 4
    assert (lat[4] - lat[8]) / (lat[8] - lat[16]) == pytest.approx(4.0, rel=1e-12)


def test_hw_domain_checked():
    with pytest.raises(ValueError):
        HwConfig(mesh_row=12)
    assert len(list(cost.all_hw_configs(small_domains(tiles_row=(1, 2))))) == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=8, max_size=8), st.integers(1, 196))
def test_fewer_tokens_never_cost_more(idx, n):
    cm = CostModel.load()
    idx = [min(i, len(HW_DOMAINS[k]) - 1) for i, k in zip(idx, HW_DOMAINS)]
    hw = HwConfig.from_indices(idx)
    assert cm.block_latency(n, hw) <= cm.block_latency(n + 1, hw)
    assert cm.block_power(n, hw) <= cm.block_power(n + 1, hw)


def test_cost_model_round_trip(tmp_path, cm):
    cm.save(tmp_path / "c.json", anchors={"x": 1})
    assert CostModel.load(tmp_path / "c.json") == cm


# --- differentiable hardware expectations ------------------------------------------------------


def test_expected_hw_alpha(cm):
    alphas = [Tensor(v, requires_grad=True) for v in (0.0, 0.2, 0.2, 0.5)]
    hw = HwConfig()
    e = expected_hw_alpha(alphas, hw, cm)
    assert e.item() == pytest.approx(cm.schedule_cost([0.0, 0.2, 0.2, 0.5], hw), rel=1e-14)
    e.backward()
    scale = cm.ref_depth / 4
    for a in alphas:
        assert a.grad == pytest.approx(scale * cm.block_cost(float(a.data), hw, "latency"), rel=1e-14)


def test_expected_hw_kept_flips_sign(cm):
    alphas = [Tensor(v, requires_grad=True) for v in (0.1, 0.3)]
    e = expected_hw_kept(alphas, HwConfig(), cm, "power")
    assert e.item() == pytest.approx(cm.schedule_cost([0.1, 0.3], HwConfig(), "power"))
    e.backward()
    for a in alphas:
        assert a.grad == pytest.approx(-6 * cm.block_cost(float(a.data), HwConfig(), "power"))


def test_zero_schedule_expectation(cm):
    e = expected_hw_alpha([0.0] * 12, HwConfig(), cm).item()
    assert e == pytest.approx(12 * cm.block_latency(197, HwConfig()))


def small_domains(**free):
    d = {k: (HwConfig().to_dict()[k],) for k in HW_DOMAINS}
    d.update(free)
    return d


def test_expected_hw_beta_monte_carlo(cm):
    doms = small_domains(mesh_row=(8, 16), bus_width=(64, 128, 256))
    hsp = HwSearchParam.uniform(doms)
    hsp.logits["mesh_row"] = Tensor([0.3, -0.4], requires_grad=True)
    hsp.logits["bus_width"] = Tensor([1.0, 0.0, -0.5], requires_grad=True)
    alphas = [0.0, 0.3, 0.5, 0.9]
    probs = hsp.probabilities()
    hand = 0.0
    for i, m in enumerate(doms["mesh_row"]):
        for j, b in enumerate(doms["bus_width"]):
            c = cm.schedule_cost(alphas, HwConfig(mesh_row=m, bus_width=b))
            hand += probs["mesh_row"][i] * probs["bus_width"][j] * c
    hand *= len(HW_DOMAINS)
    rng = np.random.default_rng(0)
    with ag.no_grad():
        draws = [expected_hw_beta(alphas, hsp, cm, rng)[0].item() for _ in range(10_000)]
    assert abs(np.mean(draws) / hand - 1) <= 0.02


def test_literal_and_per_option_share_value(cm):
    hsp = HwSearchParam.uniform(small_domains(mesh_row=(8, 16)))
    a, hw_a = expected_hw_beta([0.2], hsp, cm, np.random.default_rng(5), form="literal")
    b, hw_b = expected_hw_beta([0.2], hsp, cm, np.random.default_rng(5))
    assert hw_a == hw_b and a.item() == b.item() == 8 * cm.schedule_cost([0.2], hw_a)
    with pytest.raises(ValueError):
        expected_hw_beta([0.2], hsp, cm, np.random.default_rng(5), form="other")


def test_equal_cost_options_give_zero_gradient(cm):
    # latency only sees min(sp_banks, 4), so 4 and 8 banks cost the same
    hsp = HwSearchParam.uniform(small_domains(sp_banks=(4, 8)))
    rng = np.random.default_rng(1)
    for _ in range(20):
        hsp.logits["sp_banks"].grad = None
        e, _ = expected_hw_beta([0.1, 0.4], hsp, cm, rng)
        e.backward()
        np.testing.assert_allclose(hsp.logits["sp_banks"].grad, 0.0, atol=1e-9)


def test_beta_loss_value(cm):
    hsp = HwSearchParam.uniform(small_domains(mesh_row=(8, 16)))
    target = 50.0
    loss, hw = hw_beta_loss([0.2, 0.5], hsp, cm, np.random.default_rng(2), target)
    h = len(HW_DOMAINS)
    expect = cost.hw_loss(Tensor(h * cm.schedule_cost([0.2, 0.5], hw)), h * target).item()
    assert loss.item() == pytest.approx(expect, rel=1e-12)


def test_gumbel_softmax_small_tau_is_onehot():
    b = cost.gumbel_softmax(Tensor([0.0, 1.0, 2.0]), 1e-3, np.random.default_rng(0)).data
    assert np.sort(b)[-1] == pytest.approx(1.0)
