"""Attention projection replacement: exact mirrored construction, distilled
MLPs, install/recovery plumbing."""

import numpy as np
import pytest

from conftest import make_config
from d2dmoe.errors import ContractError, ValidationError
from d2dmoe.mha_replace import (DistillConfig, ReplacementMlp,
                                capture_projection_inputs, default_replacement_hidden,
                                distill_projection, exact_replacement,
                                install_replacement, replace_mha,
                                replacement_mac_ratio)
from d2dmoe.models import build_model, forward, site_ffn_weights
from d2dmoe.moe import cluster_sites


@pytest.mark.parametrize("seed", range(10))
def test_exact_replacement_is_bitwise(seed):
    # relu(u) - relu(-u) == u exactly in IEEE floats, and the mirrored MLP
    # runs the same-shaped matmul as the dense projection, so even BLAS
    # blocking cannot introduce a difference
    rng = np.random.default_rng(seed)
    d = int(rng.integers(8, 60))
    W = rng.normal(size=(d, d)).astype(np.float32)
    b = rng.normal(size=d).astype(np.float32)
    x = rng.normal(size=(int(rng.integers(1, 70)), d)).astype(np.float32)
    mlp = exact_replacement(W, b)
    np.testing.assert_array_equal(mlp.apply(x), x @ W + b)


def test_exact_replacement_handles_zeros_and_denormals():
    W = np.eye(4, dtype=np.float32)
    b = np.zeros(4, dtype=np.float32)
    x = np.array([[0.0, -0.0, 1e-40, -1e-40]], dtype=np.float32)
    got = exact_replacement(W, b).apply(x)
    np.testing.assert_array_equal(got, x @ W + b)


def test_mirrored_hidden_dim_counts_both_halves():
    W = np.zeros((6, 6), dtype=np.float32)
    mlp = exact_replacement(W, np.zeros(6, dtype=np.float32))
    assert mlp.mirrored and mlp.hidden_dim == 12
    assert mlp.b_in is None and mlp.W_out is None


def test_mac_ratio():
    # hidden = d_m/2 keeps the replacement at the projection's own cost
    assert replacement_mac_ratio(64, 32) == pytest.approx(1.0)
    assert replacement_mac_ratio(64, 64) == pytest.approx(2.0)
    assert default_replacement_hidden(64) == 32


@pytest.mark.parametrize("seed", range(3))
def test_distillation_beats_mean_predictor(seed):
    rng = np.random.default_rng(seed)
    d = 12
    W = rng.normal(size=(d, d)).astype(np.float32)
    b = rng.normal(size=d).astype(np.float32)
    samples = rng.normal(size=(1500, d)).astype(np.float32)
    cfg = DistillConfig(hidden=48, steps=500, batch_size=128, lr=2e-3)
    mlp, report = distill_projection(W, b, samples, cfg, seed=seed)
    assert report["val_mse"] < 0.15 * report["target_second_moment"]
    assert not mlp.mirrored


def test_capture_projection_inputs(tiny_model, lm_dataset):
    pools = capture_projection_inputs(tiny_model, ["0.q", "1.o"], lm_dataset,
                                      max_tokens=128)
    assert set(pools) == {"0.q", "1.o"}
    assert pools["0.q"].shape == (128, tiny_model.config.model_dim)
    assert pools["0.q"].dtype == np.float32


def test_install_distilled_replacement_changes_form(tiny_model, rng):
    d = tiny_model.config.model_dim
    mlp = ReplacementMlp(W_in=rng.normal(size=(d, 8)).astype(np.float32),
                         b_in=np.zeros(8, dtype=np.float32),
                         W_out=rng.normal(size=(8, d)).astype(np.float32),
                         b_out=np.zeros(d, dtype=np.float32))
    install_replacement(tiny_model, "0.q", mlp)
    assert tiny_model.forms["0.q"] == "replaced-mha"
    ffn = site_ffn_weights(tiny_model, "0.q")
    assert ffn.hidden_dim == 8
    np.testing.assert_array_equal(ffn.W1, mlp.W_in)


def test_install_mirrored_replacement_is_lossless_end_to_end(tiny_model, rng):
    x = rng.integers(0, 64, size=12)
    want = forward(tiny_model, x).logits.data.copy()
    for site in ("0.q", "0.k", "0.v", "0.o", "1.q", "1.k", "1.v", "1.o"):
        layer, proj = site.split(".")
        W = tiny_model.param(f"layer.{layer}.attn.w{proj}").data
        b = tiny_model.param(f"layer.{layer}.attn.b{proj}").data
        install_replacement(tiny_model, site, exact_replacement(W, b))
        assert tiny_model.forms[site] == "replaced-mha-mirrored"
    got = forward(tiny_model, x).logits.data
    np.testing.assert_array_equal(want, got)


def test_mirrored_site_cannot_be_clustered(tiny_model):
    W = tiny_model.param("layer.0.attn.wq").data
    b = tiny_model.param("layer.0.attn.bq").data
    install_replacement(tiny_model, "0.q", exact_replacement(W, b))
    with pytest.raises(ContractError):
        site_ffn_weights(tiny_model, "0.q")
    with pytest.raises(ContractError):
        cluster_sites(tiny_model, ["0.q"], n_experts=4)


def test_install_rejects_ffn_site(tiny_model, rng):
    d = tiny_model.config.model_dim
    mlp = exact_replacement(np.eye(d, dtype=np.float32), np.zeros(d, dtype=np.float32))
    with pytest.raises(ValidationError):
        install_replacement(tiny_model, "0.ffn", mlp)


def test_replace_mha_reports_and_keeps_model_usable(lm_dataset, rng):
    model = build_model(make_config(), seed=0)
    x = rng.integers(0, 64, size=10)
    before = forward(model, x).logits.data.copy()
    cfg = DistillConfig(hidden=16, steps=120, batch_size=64, lr=2e-3,
                        max_tokens=512)
    reports = replace_mha(model, ["0.q", "0.k"], lm_dataset, cfg, seed=0)
    assert set(reports) == {"0.q", "0.k"}
    for rep in reports.values():
        assert rep["val_mse"] < rep["target_second_moment"]
        assert rep["dataset_tokens"] == 512
    assert model.forms["0.q"] == "replaced-mha"
    assert model.forms["0.v"] == "dense"  # untouched sites stay dense
    after = forward(model, x).logits.data
    assert after.shape == before.shape
    assert np.isfinite(after).all()


def test_replaced_site_clusters_and_reconstructs(lm_dataset, rng):
    model = build_model(make_config(), seed=1)
    cfg = DistillConfig(hidden=16, steps=80, batch_size=64, lr=2e-3, max_tokens=256)
    replace_mha(model, ["1.v"], lm_dataset, cfg, seed=0)
    devs = cluster_sites(model, ["1.v"], n_experts=4, seed=0)
    assert devs["1.v"] < 1e-5
