"""Analytical per-token cost model, in multiply-accumulate counts.

A dense FFN with expansion e costs 2 e d_m^2 per token; one of n experts
costs 1/n of that; the router adds d_h (d_m + n).  Dynamic-k inference with
k experts active costs k * C_E + C_R, so the relative cost is

    ratio(k) = k / n + d_h (1 + n / d_m) / (2 e d_m)

whose router term grows linearly in n: at expert size 1 (n = e d_m) the
router overhead alone caps how much sparsity can save, which is why expert
sizes a bit above 1 win.

Measured numbers come from ExecutionTrace selected-expert counts pushed
through the same formulas, so constant-k policies match the closed form
exactly in integer arithmetic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ValidationError
from .models import DenseModel, TransformerConfig, parse_site, site_ffn_weights


@dataclass
class CostParams:
    model_dim: int
    expansion: int
    n_experts: int
    router_hidden: int

    def validate(self) -> None:
        if min(self.model_dim, self.expansion, self.n_experts, self.router_hidden) < 1:
            raise ValidationError(f"cost params must be positive: {self}")
        if (self.expansion * self.model_dim) % self.n_experts:
            raise ValidationError(
                f"n_experts={self.n_experts} must divide hidden dim "
                f"{self.expansion * self.model_dim}")


def ffn_flops(params: CostParams) -> int:
    params.validate()
    return 2 * params.expansion * params.model_dim**2


def expert_flops(params: CostParams) -> int:
    params.validate()
    return 2 * params.expansion * params.model_dim**2 // params.n_experts


def router_flops(params: CostParams) -> int:
    params.validate()
    return params.router_hidden * (params.model_dim + params.n_experts)


def dynk_flops(params: CostParams, k: float) -> float:
    """Per-token cost with k experts active; fractional k gives expected cost."""
    if not 0 <= k <= params.n_experts:
        raise InputError(f"k={k} out of range for {params.n_experts} experts")
    return k * expert_flops(params) + router_flops(params)


def flops_ratio(params: CostParams, k: float) -> float:
    """dynk_flops relative to the dense FFN it replaces."""
    return dynk_flops(params, k) / ffn_flops(params)


# === whole-model accounting ===


def attention_flops(config: TransformerConfig, seq_len: int) -> int:
    """Score + value MACs per token for one layer at a given context."""
    return 2 * seq_len * config.model_dim


def _site_hidden(model: DenseModel, site: str) -> int:
    _, kind = parse_site(site)
    if kind == "ffn" and model.forms[site] != "moe" and site not in model.partitions:
        return model.config.hidden_dim
    return site_ffn_weights(model, site).hidden_dim


def _site_mats(model: DenseModel, site: str) -> int:
    # Weight matrices touched per token: up + down, plus the gate path.
    _, kind = parse_site(site)
    return 3 if kind == "ffn" and model.config.ffn_kind == "gated" else 2


def dense_site_flops(model: DenseModel, site: str) -> int:
    d_m = model.config.model_dim
    _, kind = parse_site(site)
    if kind != "ffn" and model.forms[site] in ("dense", "replaced-mha-mirrored"):
        return d_m * d_m  # mirrored control runs the same single matmul
    return _site_mats(model, site) * d_m * _site_hidden(model, site)


def moe_site_costs(model: DenseModel, site: str) -> tuple[int, int]:
    """(per-expert MACs, router MACs) for a split site."""
    from .moe import site_router

    partition = model.partitions.get(site)
    if partition is None:
        raise InputError(f"site {site} has no partition")
    d_m = model.config.model_dim
    c_e = _site_mats(model, site) * d_m * partition.expert_size
    c_r = site_router(model, site).hidden_dim * (d_m + partition.n_experts)
    return c_e, c_r


def head_flops(config: TransformerConfig, seq_len: int) -> float:
    d_m = config.model_dim
    if config.task_head == "lm":
        return d_m * config.vocab_size
    return d_m * config.num_classes / seq_len  # one classification per sequence


def dense_model_flops(config: TransformerConfig, seq_len: int) -> float:
    """Per-token MACs of the all-dense model at a given context length."""
    d_m = config.model_dim
    mats = 3 if config.ffn_kind == "gated" else 2
    per_layer = 4 * d_m * d_m + attention_flops(config, seq_len) \
        + mats * d_m * config.expansion * d_m
    return config.num_layers * per_layer + head_flops(config, seq_len)


@dataclass
class CostRow:
    policy: str
    analytic_flops: float
    measured_flops: float
    metric: float
    site_flops: dict[str, float]
    meta: dict


def model_flops(model: DenseModel, exec_trace, seq_len: int,
                nominal_k: dict[str, float] | None = None) -> tuple[float, float, dict[str, float]]:
    """(analytic, measured, per-site measured) per-token MACs.

    MoE sites are costed from their ExecutionTrace counts; the analytic
    number uses nominal_k per site when given (e.g. a top-k policy's k),
    otherwise the trace's realized mean.
    """
    cfg = model.config
    d_m = cfg.model_dim
    base = cfg.num_layers * attention_flops(cfg, seq_len) + head_flops(cfg, seq_len)
    analytic = measured = base
    site_break: dict[str, float] = {}
    for site in sorted(model.forms):
        if model.forms[site] != "moe":
            cost = dense_site_flops(model, site)
            analytic += cost
            measured += cost
            site_break[site] = cost
            continue
        c_e, c_r = moe_site_costs(model, site)
        counts = exec_trace.site_counts(site)
        if counts.size == 0:
            raise InputError(f"execution trace has no counts for moe site {site}")
        mean_k = float(counts.mean())
        site_measured = mean_k * c_e + c_r
        k_a = nominal_k.get(site, mean_k) if nominal_k else mean_k
        analytic += k_a * c_e + c_r
        measured += site_measured
        site_break[site] = site_measured
    return float(analytic), float(measured), site_break


def write_cost_csv(rows: list[CostRow], path) -> None:
    """Rows sorted by analytic FLOPs; site breakdown in site:{name} columns."""
    rows = sorted(rows, key=lambda r: (r.analytic_flops, r.policy))
    sites = sorted({s for r in rows for s in r.site_flops})
    meta_keys = sorted({k for r in rows for k in r.meta})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["policy", "analytic_flops", "measured_flops", "metric"]
                        + [f"site:{s}" for s in sites] + meta_keys)
        for r in rows:
            writer.writerow([r.policy, repr(float(r.analytic_flops)),
                             repr(float(r.measured_flops)), repr(float(r.metric))]
                            + [repr(float(r.site_flops.get(s, 0.0))) for s in sites]
                            + [r.meta.get(k, "") for k in meta_keys])
