"""Cost model: closed-form agreement, hand-derived spot values, measured
counts from execution traces, CSV emission."""

import numpy as np
import pytest

from conftest import make_config
from d2dmoe.errors import InputError, ValidationError
from d2dmoe.flops import (CostParams, CostRow, attention_flops, dense_model_flops,
                          dense_site_flops, dynk_flops, expert_flops, ffn_flops,
                          flops_ratio, head_flops, model_flops, moe_site_costs,
                          router_flops, write_cost_csv)
from d2dmoe.mha_replace import exact_replacement, install_replacement
from d2dmoe.models import build_model
from d2dmoe.moe import ExecutionTrace
from d2dmoe.routing import GatePolicy

SPOT = CostParams(model_dim=64, expansion=4, n_experts=16, router_hidden=8)


def test_spot_values():
    # 2*4*64^2 = 32768; expert = 2048; router = 8*(64+16) = 640;
    # k=4 -> 4*2048 + 640 = 8832; 8832/32768 = 0.26953125 exactly
    assert ffn_flops(SPOT) == 32768
    assert expert_flops(SPOT) == 2048
    assert router_flops(SPOT) == 640
    assert dynk_flops(SPOT, 4) == 8832
    assert flops_ratio(SPOT, 4) == 0.26953125


def closed_form(p: CostParams, k: float) -> float:
    return k / p.n_experts + p.router_hidden * (1 + p.n_experts / p.model_dim) \
        / (2 * p.expansion * p.model_dim)


@pytest.mark.parametrize("seed", range(20))
def test_ratio_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    d_m = int(rng.choice([16, 32, 64, 128]))
    e = int(rng.choice([2, 4, 8]))
    n = int(rng.choice([2, 4, 8, 16]))
    p = CostParams(model_dim=d_m, expansion=e, n_experts=n,
                   router_hidden=int(rng.integers(2, 32)))
    for k in np.linspace(0, n, 7):
        got = flops_ratio(p, float(k))
        want = closed_form(p, float(k))
        assert abs(got - want) <= 1e-12 * max(abs(want), 1.0)


def test_router_term_grows_with_expert_count():
    # same total capacity, finer split: the k-term shrinks per expert but the
    # router term rises linearly in n; at size 1 it dominates
    e, d_m = 4, 64
    ratios = []
    for size in (1, 4, 16):
        n = e * d_m // size
        p = CostParams(model_dim=d_m, expansion=e, n_experts=n, router_hidden=8)
        ratios.append(flops_ratio(p, 0.25 * n))  # 25% of experts active
    assert ratios[0] > ratios[1] > ratios[2]


def test_dynk_k_bounds():
    with pytest.raises(InputError):
        dynk_flops(SPOT, -0.5)
    with pytest.raises(InputError):
        dynk_flops(SPOT, 17)


def test_params_must_divide():
    with pytest.raises(ValidationError):
        ffn_flops(CostParams(model_dim=64, expansion=4, n_experts=7, router_hidden=8))


def test_fractional_k_interpolates():
    lo, hi = dynk_flops(SPOT, 2), dynk_flops(SPOT, 3)
    assert dynk_flops(SPOT, 2.5) == pytest.approx((lo + hi) / 2)


def test_dense_model_flops_hand_value():
    # 2 layers of (4*64^2 attn proj + 2*64*64 attn mix + 2*64*512 ffn)
    # + 64*64 lm head = 184320
    cfg = make_config(context_length=64, model_dim=64, num_heads=4,
                      expansion=8, vocab_size=64)
    assert dense_model_flops(cfg, 64) == 184320


def test_attention_and_head_components():
    cfg = make_config(model_dim=32, vocab_size=64)
    assert attention_flops(cfg, 10) == 2 * 10 * 32
    assert head_flops(cfg, 10) == 32 * 64
    clf = make_config(model_dim=32, task_head="classifier", num_classes=6)
    assert head_flops(clf, 10) == pytest.approx(32 * 6 / 10)


def test_gated_ffn_counts_three_matrices():
    gated = make_config(ffn_kind="gated", activation="gelu")
    std = make_config()
    d_m, e = std.model_dim, std.expansion
    diff = dense_model_flops(gated, 16) - dense_model_flops(std, 16)
    assert diff == std.num_layers * d_m * e * d_m


def test_site_flops_by_form(tiny_model):
    d_m = tiny_model.config.model_dim
    h = tiny_model.config.hidden_dim
    assert dense_site_flops(tiny_model, "0.ffn") == 2 * d_m * h
    assert dense_site_flops(tiny_model, "0.q") == d_m * d_m
    W = tiny_model.param("layer.0.attn.wq").data
    b = tiny_model.param("layer.0.attn.bq").data
    install_replacement(tiny_model, "0.q", exact_replacement(W, b))
    # the mirrored control costs exactly what the projection it replaces did
    assert dense_site_flops(tiny_model, "0.q") == d_m * d_m


def test_moe_site_costs_and_model_flops(lm_dataset):
    from d2dmoe.sparsity import evaluate
    from test_moe import converted

    model = converted(policy=GatePolicy(kind="top_k", k=2), n_experts=4)
    trace = ExecutionTrace()
    evaluate(model, lm_dataset, split="val", max_sequences=2, exec_trace=trace)
    cfg = model.config
    c_e, c_r = moe_site_costs(model, "0.ffn")
    assert c_e == 2 * cfg.model_dim * (cfg.hidden_dim // 4)
    analytic, measured, breakdown = model_flops(model, trace, seq_len=16)
    # constant k=2 makes measured match the closed form exactly
    assert measured == analytic
    assert breakdown["0.ffn"] == 2 * c_e + c_r
    want_base = cfg.num_layers * attention_flops(cfg, 16) + head_flops(cfg, 16)
    want = want_base + 2 * (2 * c_e + c_r) \
        + sum(dense_site_flops(model, s) for s in model.forms if s.endswith(("q", "k", "v", "o")))
    assert measured == pytest.approx(want)


def test_model_flops_requires_counts(tiny_model):
    from test_moe import converted

    model = converted()
    with pytest.raises(InputError):
        model_flops(model, ExecutionTrace(), seq_len=16)


def test_cost_csv_sorted_and_byte_stable(tmp_path):
    rows = [
        CostRow(policy="k=2", analytic_flops=200.0, measured_flops=201.0,
                metric=2.5, site_flops={"0.ffn": 100.0}, meta={"seed": 0}),
        CostRow(policy="tau=0.5", analytic_flops=100.0, measured_flops=99.0,
                metric=2.7, site_flops={"0.ffn": 50.0}, meta={"seed": 0}),
    ]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_cost_csv(rows, p1)
    write_cost_csv(list(reversed(rows)), p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "policy,analytic_flops,measured_flops,metric,site:0.ffn,seed"
    assert lines[1].startswith("tau=0.5,100.0")  # ascending flops order


def test_cost_csv_floats_roundtrip(tmp_path):
    third = 1.0 / 3.0
    rows = [CostRow(policy="k=1", analytic_flops=third, measured_flops=third,
                    metric=third, site_flops={}, meta={})]
    path = tmp_path / "c.csv"
    write_cost_csv(rows, path)
    cell = path.read_text().splitlines()[1].split(",")[1]
    assert float(cell) == third  # repr() keeps every bit
