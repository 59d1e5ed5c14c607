"""MoE inference runtime and dense-to-MoE conversion.

A MoeLayer holds one site's expert weight slices, its router, and the gate
policy.  Inference is tape-free numpy on the same kernels the dense forward
uses: with every expert selected the output matches the dense site up to
f32 summation order.  Expert contributions accumulate in ascending expert
index; the shared output bias is added once, up front.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ACTIVATIONS
from .clustering import ExpertPartition, ExpertSlices, slice_ffn, split_ffn, reconstruct_check
from .errors import ContractError, InputError, ValidationError
from .models import DenseModel, parse_site, site_activation, site_ffn_weights
from .routing import GatePolicy, Router, gate_mask


@dataclass
class MoeLayer:
    site: str
    activation: str
    slices: ExpertSlices
    router: Router
    policy: GatePolicy | None = None

    @property
    def n_experts(self) -> int:
        return len(self.slices.W1)


def moe_forward_arrays(layer: MoeLayer, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gated forward for a (tokens x d_m) batch.  Returns the output and the
    per-token selected-expert counts."""
    if layer.policy is None:
        raise ContractError(f"site {layer.site}: no gate policy set")
    if z.ndim != 2 or z.shape[1] != layer.slices.W1[0].shape[0]:
        raise InputError(f"moe input shape {z.shape} does not match site {layer.site}")
    scores = layer.router.predict(z)
    mask, _ = gate_mask(scores, layer.policy)
    act = ACTIVATIONS[layer.activation]
    out = np.broadcast_to(layer.slices.b2, z.shape).astype(z.dtype).copy()
    for e in range(layer.n_experts):
        rows = mask[:, e]
        if not rows.any():
            continue
        ze = z[rows]
        lin = ze @ layer.slices.W1[e] + layer.slices.b1[e]
        if layer.slices.kind == "gated":
            hidden = act(ze @ layer.slices.Wg[e]) * lin
        else:
            hidden = act(lin)
        out[rows] += hidden @ layer.slices.W2[e]
    return out, mask.sum(axis=1).astype(np.int64)


@dataclass
class ExecutionTrace:
    """Per-site record of selected-expert counts, one entry per token."""

    counts: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def record(self, site: str, token_counts: np.ndarray) -> None:
        self.counts.setdefault(site, []).append(np.asarray(token_counts, dtype=np.int64))

    def site_counts(self, site: str) -> np.ndarray:
        chunks = self.counts.get(site)
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)

    def sites(self) -> list[str]:
        return sorted(self.counts)

    def total_selected(self, site: str) -> int:
        return int(self.site_counts(site).sum())

    def num_tokens(self, site: str) -> int:
        return int(self.site_counts(site).size)

    def mean_selected(self, site: str) -> float:
        c = self.site_counts(site)
        return float(c.mean()) if c.size else 0.0


# === conversion ===


def cluster_sites(model: DenseModel, sites: list[str], n_experts, seed: int = 0,
                  max_iters: int = 60) -> dict[str, float]:
    """Split each site's hidden neurons into balanced experts and store the
    partitions on the model.  n_experts is an int or a per-site dict.
    Returns per-site reconstruction deviations on a random probe batch."""
    devs = {}
    rng = np.random.default_rng(seed)
    for site in sites:
        layer, kind = parse_site(site)
        if kind != "ffn" and model.forms[site] == "dense":
            raise ContractError(f"site {site}: attention projections must be replaced before clustering")
        if model.forms[site] == "moe":
            raise ContractError(f"site {site} is already converted")
        n = n_experts[site] if isinstance(n_experts, dict) else int(n_experts)
        ffn = site_ffn_weights(model, site)
        if ffn.hidden_dim % n:
            raise InputError(f"site {site}: n_experts={n} must divide hidden dim {ffn.hidden_dim}")
        partition, slices = split_ffn(ffn, n, layer=layer, seed=seed, max_iters=max_iters)
        model.partitions[site] = partition
        probe = rng.normal(0.0, 1.0, size=(32, ffn.W1.shape[0])).astype(np.float32)
        devs[site] = reconstruct_check(ffn, slices, probe, site_activation(model, site))
    return devs


def attach_router(model: DenseModel, site: str, router: Router) -> None:
    """Store router weights as model parameters under router.{layer}.{proj}."""
    from .autodiff import parameter

    layer, kind = parse_site(site)
    pre = f"router.{layer}.{kind}"
    model.params[f"{pre}.Wh"] = parameter(router.Wh.astype(np.float32))
    model.params[f"{pre}.bh"] = parameter(router.bh.astype(np.float32))
    model.params[f"{pre}.Wo"] = parameter(router.Wo.astype(np.float32))
    model.params[f"{pre}.bo"] = parameter(router.bo.astype(np.float32))
    model.router_outputs[site] = router.output_kind


def site_router(model: DenseModel, site: str) -> Router:
    layer, kind = parse_site(site)
    pre = f"router.{layer}.{kind}"
    try:
        return Router(
            Wh=model.param(f"{pre}.Wh").data,
            bh=model.param(f"{pre}.bh").data,
            Wo=model.param(f"{pre}.Wo").data,
            bo=model.param(f"{pre}.bo").data,
            output_kind=model.router_outputs.get(site, "abs"),
        )
    except ContractError:
        raise ContractError(f"site {site} has no trained router attached") from None


def assemble_moe_layer(model: DenseModel, site: str, policy: GatePolicy | None) -> MoeLayer:
    partition = model.partitions.get(site)
    if partition is None:
        raise ContractError(f"site {site} has no expert partition; run clustering first")
    ffn = site_ffn_weights(model, site)
    return MoeLayer(
        site=site,
        activation=site_activation(model, site),
        slices=slice_ffn(ffn, partition),
        router=site_router(model, site),
        policy=policy,
    )


def convert_model(model: DenseModel, sites: list[str], n_experts=None, routers=None,
                  policy: GatePolicy | None = None, seed: int = 0) -> DenseModel:
    """Flip sites into moe form in place.

    n_experts and routers may be omitted when clustering / router training
    already stored partitions and router weights on the model; passing them
    runs those steps here.  Converting zero sites leaves the model's outputs
    bitwise unchanged.
    """
    if n_experts is not None:
        pending = [s for s in sites if s not in model.partitions]
        if pending:
            cluster_sites(model, pending, n_experts, seed=seed)
    if routers is not None:
        for site, router in routers.items():
            attach_router(model, site, router)
    for site in sites:
        if model.forms.get(site) is None:
            raise ValidationError(f"unknown site {site!r}")
        layer = assemble_moe_layer(model, site, policy)
        model.forms[site] = "moe"
        model.moe_layers[site] = layer
    return model


def set_gate_policy(model: DenseModel, policy: GatePolicy) -> None:
    """Point every assembled MoE site at one shared policy."""
    for site, form in model.forms.items():
        if form != "moe":
            continue
        if site not in model.moe_layers:
            model.moe_layers[site] = assemble_moe_layer(model, site, policy)
        else:
            model.moe_layers[site].policy = policy


def assemble_all(model: DenseModel, policy: GatePolicy | None = None) -> None:
    """Build MoeLayer runtimes for every moe-form site (after checkpoint load)."""
    for site, form in model.forms.items():
        if form == "moe" and site not in model.moe_layers:
            model.moe_layers[site] = assemble_moe_layer(model, site, policy)
    if policy is not None:
        set_gate_policy(model, policy)


def per_token_expert_counts(model: DenseModel, dataset, policies: list[GatePolicy],
                            split: str = "val", max_sequences: int | None = None) -> dict:
    """Selected-expert count distributions per site for each policy."""
    from .sparsity import evaluate

    out = {}
    for policy in policies:
        set_gate_policy(model, policy)
        trace = ExecutionTrace()
        evaluate(model, dataset, split=split, max_sequences=max_sequences, exec_trace=trace)
        out[policy.label()] = trace
    return out


def write_count_histogram_csv(traces: dict, path) -> None:
    """Columns: policy, site, selected, tokens."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["policy", "site", "selected", "tokens"])
        for label in sorted(traces):
            trace = traces[label]
            for site in trace.sites():
                counts = trace.site_counts(site)
                for value in np.unique(counts):
                    writer.writerow([label, site, int(value), int((counts == value).sum())])
