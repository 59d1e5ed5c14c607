"""Desk-scale pre-LN transformer: byte-level LM or last-token classifier.

A model is a flat name->Tensor parameter dict plus a per-site form map.
Sites are the convertible units: "{layer}.ffn" for the FFN and
"{layer}.{q|k|v|o}" for the attention projections.  Forms are "dense",
"replaced-mha" (projection swapped for a two-layer relu MLP), and "moe"
(site split into experts and gated at inference time).

Head attention is expressed through constant 0/1 selector matrices so the
whole forward pass stays inside the fixed autodiff op set; the 1/sqrt(d_head)
score scaling is folded into the query selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError

ATTN_SITES = ("q", "k", "v", "o")
FFN_KINDS = ("standard", "gated")
ACTIVATION_KINDS = ("relu", "gelu")
TASK_HEADS = ("lm", "classifier")
FORMS = ("dense", "replaced-mha", "replaced-mha-mirrored", "moe")

INIT_STD = 0.02
MASK_VALUE = -1e30


@dataclass
class TransformerConfig:
    vocab_size: int = 256
    context_length: int = 128
    num_layers: int = 2
    model_dim: int = 128
    num_heads: int = 4
    expansion: int = 4
    ffn_kind: str = "standard"
    activation: str = "gelu"
    task_head: str = "lm"
    num_classes: int = 6

    @property
    def hidden_dim(self) -> int:
        return self.expansion * self.model_dim

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def validate(self) -> list[str]:
        bad = []
        if not 2 <= self.vocab_size <= 256:
            bad.append(f"vocab_size must be in [2, 256], got {self.vocab_size}")
        if self.context_length < 1:
            bad.append(f"context_length must be >= 1, got {self.context_length}")
        if self.num_layers < 1:
            bad.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.model_dim < 1:
            bad.append(f"model_dim must be >= 1, got {self.model_dim}")
        if self.num_heads < 1 or self.model_dim % max(self.num_heads, 1):
            bad.append(f"num_heads must divide model_dim, got {self.num_heads} for {self.model_dim}")
        if self.expansion < 1:
            bad.append(f"expansion must be >= 1, got {self.expansion}")
        if self.ffn_kind not in FFN_KINDS:
            bad.append(f"ffn_kind must be one of {FFN_KINDS}, got {self.ffn_kind!r}")
        if self.activation not in ACTIVATION_KINDS:
            bad.append(f"activation must be one of {ACTIVATION_KINDS}, got {self.activation!r}")
        if self.task_head not in TASK_HEADS:
            bad.append(f"task_head must be one of {TASK_HEADS}, got {self.task_head!r}")
        if self.task_head == "classifier" and self.num_classes < 2:
            bad.append(f"num_classes must be >= 2, got {self.num_classes}")
        return bad

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "num_layers": self.num_layers,
            "model_dim": self.model_dim,
            "num_heads": self.num_heads,
            "expansion": self.expansion,
            "ffn_kind": self.ffn_kind,
            "activation": self.activation,
            "task_head": self.task_head,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def site_names(config: TransformerConfig) -> list[str]:
    names = []
    for l in range(config.num_layers):
        names.append(f"{l}.ffn")
        names.extend(f"{l}.{s}" for s in ATTN_SITES)
    return names


def parse_site(site: str) -> tuple[int, str]:
    layer_str, _, kind = site.partition(".")
    if kind not in ("ffn",) + ATTN_SITES or not layer_str.isdigit():
        raise ValidationError(f"bad site name {site!r}")
    return int(layer_str), kind


@dataclass
class DenseModel:
    config: TransformerConfig
    params: dict[str, Tensor]
    forms: dict[str, str]
    partitions: dict[str, object] = field(default_factory=dict)
    router_outputs: dict[str, str] = field(default_factory=dict)
    moe_layers: dict[str, object] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def param(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"model has no parameter {name!r}") from None


def build_model(config: TransformerConfig, seed: int = 0) -> DenseModel:
    """Seeded init: N(0, 0.02) weights, residual projections scaled 1/sqrt(2L)."""
    bad = config.validate()
    if bad:
        raise ValidationError("invalid model config: " + "; ".join(bad))
    rng = np.random.default_rng(seed)
    d, h = config.model_dim, config.hidden_dim
    res_std = INIT_STD / math.sqrt(2 * config.num_layers)

    def w(shape, std):
        return ad.parameter(rng.normal(0.0, std, size=shape).astype(np.float32))

    def zeros(shape):
        return ad.parameter(np.zeros(shape, dtype=np.float32))

    def ones(shape):
        return ad.parameter(np.ones(shape, dtype=np.float32))

    params: dict[str, Tensor] = {}
    params["tok_emb"] = w((config.vocab_size, d), INIT_STD)
    params["pos_emb"] = w((config.context_length, d), INIT_STD)
    for l in range(config.num_layers):
        params[f"layer.{l}.ln1.g"] = ones(d)
        params[f"layer.{l}.ln1.b"] = zeros(d)
        for name in ("q", "k", "v"):
            params[f"layer.{l}.attn.w{name}"] = w((d, d), INIT_STD)
            params[f"layer.{l}.attn.b{name}"] = zeros(d)
        params[f"layer.{l}.attn.wo"] = w((d, d), res_std)
        params[f"layer.{l}.attn.bo"] = zeros(d)
        params[f"layer.{l}.ln2.g"] = ones(d)
        params[f"layer.{l}.ln2.b"] = zeros(d)
        params[f"layer.{l}.ffn.W1"] = w((d, h), INIT_STD)
        params[f"layer.{l}.ffn.b1"] = zeros(h)
        if config.ffn_kind == "gated":
            params[f"layer.{l}.ffn.Wg"] = w((d, h), INIT_STD)
        params[f"layer.{l}.ffn.W2"] = w((h, d), res_std)
        params[f"layer.{l}.ffn.b2"] = zeros(d)
    params["lnf.g"] = ones(d)
    params["lnf.b"] = zeros(d)
    out_dim = config.vocab_size if config.task_head == "lm" else config.num_classes
    params["head.W"] = w((d, out_dim), INIT_STD)
    params["head.b"] = zeros(out_dim)

    forms = {site: "dense" for site in site_names(config)}
    return DenseModel(config=config, params=params, forms=forms)


def count_params(model: DenseModel) -> int:
    return sum(t.size for t in model.params.values())


def relufy(model: DenseModel) -> str:
    """Swap the FFN activation to relu in place.  Returns "noop" if already relu."""
    if model.config.activation == "relu":
        return "noop"
    model.config = replace(model.config, activation="relu")
    return "ok"


# === capture ===


@dataclass
class CaptureSpec:
    """What to record during a forward pass.

    ffn_layers: layer indices whose FFN pre-activations to keep (gate path
    pre-activations for gated FFNs); "all" for every layer.
    mha_sites: (layer, proj) pairs whose projection inputs/outputs to keep.
    """

    ffn_layers: object = None
    mha_sites: object = None

    def wants_ffn(self, layer: int) -> bool:
        if self.ffn_layers is None:
            return False
        return self.ffn_layers == "all" or layer in self.ffn_layers

    def wants_mha(self, layer: int, proj: str) -> bool:
        if self.mha_sites is None:
            return False
        return self.mha_sites == "all" or (layer, proj) in self.mha_sites


@dataclass
class ActivationTrace:
    ffn_in: dict[int, Tensor] = field(default_factory=dict)
    ffn_pre: dict[int, Tensor] = field(default_factory=dict)
    ffn_out: dict[int, Tensor] = field(default_factory=dict)
    mha_in: dict[str, Tensor] = field(default_factory=dict)
    mha_out: dict[str, Tensor] = field(default_factory=dict)
    num_tokens: int = 0


@dataclass
class ForwardResult:
    logits: Tensor
    trace: ActivationTrace | None


# === forward ===


def _consts(model: DenseModel, key, build):
    cached = model._cache.get(key)
    if cached is None:
        cached = model._cache[key] = build()
    return cached


def _head_selectors(model: DenseModel) -> tuple[list[Tensor], list[Tensor]]:
    def build():
        d, nh, dh = model.config.model_dim, model.config.num_heads, model.config.head_dim
        plain, scaled = [], []
        for hidx in range(nh):
            sel = np.zeros((d, dh), dtype=np.float32)
            sel[hidx * dh : (hidx + 1) * dh] = np.eye(dh, dtype=np.float32)
            plain.append(ad.constant(sel))
            scaled.append(ad.constant(sel / math.sqrt(dh)))
        return plain, scaled

    return _consts(model, "head_selectors", build)


def _causal_mask(model: DenseModel, t: int) -> Tensor:
    def build():
        mask = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), MASK_VALUE, 0.0)
        return ad.constant(mask.astype(np.float32))

    return _consts(model, ("causal_mask", t), build)


def _last_row_selector(model: DenseModel, t: int) -> Tensor:
    def build():
        sel = np.zeros((1, t), dtype=np.float32)
        sel[0, t - 1] = 1.0
        return ad.constant(sel)

    return _consts(model, ("last_row", t), build)


def _moe_site_forward(model: DenseModel, site: str, x: Tensor, exec_trace) -> Tensor:
    if ad.active_tape() is not None:
        raise ContractError(f"site {site} is in moe form; gradient tracing is not supported")
    layer = model.moe_layers.get(site)
    if layer is None:
        raise ContractError(f"site {site} is in moe form but no MoeLayer is assembled")
    from . import moe as _moe  # runtime import; moe builds on this module

    out, counts = _moe.moe_forward_arrays(layer, x.data)
    if exec_trace is not None:
        exec_trace.record(site, counts)
    return ad.constant(out)


def _replaced_mlp_forward(model: DenseModel, layer: int, proj: str, x: Tensor) -> Tensor:
    pre = f"mha.{layer}.{proj}"
    u = ad.add_bias(ad.matmul(x, model.param(f"{pre}.W_in")), model.param(f"{pre}.b_in"))
    return ad.add_bias(ad.matmul(ad.relu(u), model.param(f"{pre}.W_out")), model.param(f"{pre}.b_out"))


def _mirrored_mlp_forward(model: DenseModel, layer: int, proj: str, x: Tensor) -> Tensor:
    # relu(u) - relu(-u) = u through a single projection-shaped matmul; the
    # wide [W, -W] layout would change the BLAS reduction order and lose bit
    # equality with the dense projection it stands in for.
    pre = f"mha.{layer}.{proj}"
    u = ad.matmul(x, model.param(f"{pre}.W_in"))
    flip = ad.constant(np.full(u.shape, -1.0, dtype=u.data.dtype))
    mirror = ad.mul(ad.relu(ad.mul(u, flip)), flip)
    return ad.add_bias(ad.add(ad.relu(u), mirror), model.param(f"{pre}.b_out"))


def _project(model, layer, proj, x, capture, trace, exec_trace) -> Tensor:
    site = f"{layer}.{proj}"
    if capture is not None and capture.wants_mha(layer, proj):
        trace.mha_in[site] = x
    form = model.forms[site]
    if form == "dense":
        out = ad.add_bias(
            ad.matmul(x, model.param(f"layer.{layer}.attn.w{proj}")),
            model.param(f"layer.{layer}.attn.b{proj}"),
        )
    elif form == "replaced-mha":
        out = _replaced_mlp_forward(model, layer, proj, x)
    elif form == "replaced-mha-mirrored":
        out = _mirrored_mlp_forward(model, layer, proj, x)
    elif form == "moe":
        out = _moe_site_forward(model, site, x, exec_trace)
    else:
        raise ContractError(f"site {site} has unknown form {form!r}")
    if capture is not None and capture.wants_mha(layer, proj):
        trace.mha_out[site] = out
    return out


def _attention(model, layer, x, causal, capture, trace, exec_trace) -> Tensor:
    t = x.shape[0]
    q = _project(model, layer, "q", x, capture, trace, exec_trace)
    k = _project(model, layer, "k", x, capture, trace, exec_trace)
    v = _project(model, layer, "v", x, capture, trace, exec_trace)
    plain, scaled = _head_selectors(model)
    mask = _causal_mask(model, t) if causal else None
    merged = None
    for sel, sel_q in zip(plain, scaled):
        qh = ad.matmul(q, sel_q)
        kh = ad.matmul(k, sel)
        vh = ad.matmul(v, sel)
        scores = ad.matmul(qh, kh, transpose_b=True)
        if mask is not None:
            scores = ad.add(scores, mask)
        ctxh = ad.matmul(ad.softmax(scores), vh)
        part = ad.matmul(ctxh, sel, transpose_b=True)
        merged = part if merged is None else ad.add(merged, part)
    return _project(model, layer, "o", merged, capture, trace, exec_trace)


def _ffn_dense(model, layer, x, capture, trace) -> Tensor:
    cfg = model.config
    act = ad.relu if cfg.activation == "relu" else ad.gelu
    pre = f"layer.{layer}.ffn"
    lin = ad.add_bias(ad.matmul(x, model.param(f"{pre}.W1")), model.param(f"{pre}.b1"))
    if cfg.ffn_kind == "gated":
        gate_pre = ad.matmul(x, model.param(f"{pre}.Wg"))
        if capture is not None and capture.wants_ffn(layer):
            trace.ffn_pre[layer] = gate_pre
        hidden = ad.mul(act(gate_pre), lin)
    else:
        if capture is not None and capture.wants_ffn(layer):
            trace.ffn_pre[layer] = lin
        hidden = act(lin)
    return ad.add_bias(ad.matmul(hidden, model.param(f"{pre}.W2")), model.param(f"{pre}.b2"))


def forward(
    model: DenseModel,
    ids,
    capture: CaptureSpec | None = None,
    causal: bool | None = None,
    exec_trace=None,
) -> ForwardResult:
    """Run one sequence of token ids; returns logits (t x vocab for the lm
    head, 1 x num_classes for the classifier) plus any captured activations.

    causal defaults by task head: masked for lm, unmasked for classifier.
    Pass it explicitly to pin the masking mode regardless of head.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1 or ids.size > cfg.context_length:
        raise ValidationError(
            f"ids must be a 1-d sequence of 1..{cfg.context_length} tokens, got shape {ids.shape}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError(f"token id out of range for vocab {cfg.vocab_size}")
    if causal is None:
        causal = cfg.task_head == "lm"
    t = ids.size

    trace = ActivationTrace(num_tokens=t) if capture is not None else None
    x = ad.add(
        ad.embedding_lookup(model.param("tok_emb"), ids),
        ad.embedding_lookup(model.param("pos_emb"), np.arange(t, dtype=np.int64)),
    )
    for l in range(cfg.num_layers):
        h1 = ad.layernorm(x, model.param(f"layer.{l}.ln1.g"), model.param(f"layer.{l}.ln1.b"))
        x = ad.add(x, _attention(model, l, h1, causal, capture, trace, exec_trace))
        h2 = ad.layernorm(x, model.param(f"layer.{l}.ln2.g"), model.param(f"layer.{l}.ln2.b"))
        site = f"{l}.ffn"
        wants = capture is not None and capture.wants_ffn(l)
        if wants:
            trace.ffn_in[l] = h2
        if model.forms[site] == "moe":
            ffn_out = _moe_site_forward(model, site, h2, exec_trace)
        else:
            ffn_out = _ffn_dense(model, l, h2, capture, trace)
        if wants:
            trace.ffn_out[l] = ffn_out
        x = ad.add(x, ffn_out)
    x = ad.layernorm(x, model.param("lnf.g"), model.param("lnf.b"))
    if cfg.task_head == "classifier":
        x = ad.matmul(_last_row_selector(model, t), x)
    logits = ad.add_bias(ad.matmul(x, model.param("head.W")), model.param("head.b"))
    return ForwardResult(logits=logits, trace=trace)


# === ffn weight views ===


@dataclass
class FfnWeights:
    """Raw weight views of one FFN-shaped site.  W1 up-projects, W2 down-
    projects, Wg is the (bias-free) gate path for gated FFNs."""

    kind: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wg: np.ndarray | None = None

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]


def site_ffn_weights(model: DenseModel, site: str) -> FfnWeights:
    """View any convertible site as an FFN: real FFNs directly, replaced
    attention projections through their relu-MLP weights."""
    layer, kind = parse_site(site)
    if kind == "ffn":
        pre = f"layer.{layer}.ffn"
        wg = model.params.get(f"{pre}.Wg")
        return FfnWeights(
            kind=model.config.ffn_kind,
            W1=model.param(f"{pre}.W1").data,
            b1=model.param(f"{pre}.b1").data,
            W2=model.param(f"{pre}.W2").data,
            b2=model.param(f"{pre}.b2").data,
            Wg=None if wg is None else wg.data,
        )
    if model.forms[site] == "replaced-mha-mirrored":
        raise ContractError(f"site {site} is a mirrored exactness control; it has no stored output layer to slice")
    if model.forms[site] not in ("replaced-mha", "moe"):
        raise ContractError(f"site {site} is a dense attention projection, not FFN-shaped; replace it first")
    pre = f"mha.{layer}.{kind}"
    return FfnWeights(
        kind="standard",
        W1=model.param(f"{pre}.W_in").data,
        b1=model.param(f"{pre}.b_in").data,
        W2=model.param(f"{pre}.W_out").data,
        b2=model.param(f"{pre}.b_out").data,
    )


def site_activation(model: DenseModel, site: str) -> str:
    """Activation used inside a site: the configured one for FFNs, relu for
    replacement MLPs."""
    _, kind = parse_site(site)
    return model.config.activation if kind == "ffn" else "relu"


def inject_ffn_bias_outlier(model: DenseModel, layer: int, channel: int, magnitude: float) -> None:
    """Add a large constant to one hidden channel's pre-activation bias.
    Simulates the massive-activation pathology for robustness studies."""
    b1 = model.param(f"layer.{layer}.ffn.b1")
    if not 0 <= channel < b1.shape[0]:
        raise ValidationError(f"channel {channel} out of range for hidden dim {b1.shape[0]}")
    b1.data[channel] += np.float32(magnitude)


def snapshot_params(model: DenseModel) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.params.items()}


def restore_params(model: DenseModel, snap: dict[str, np.ndarray]) -> None:
    for name, arr in snap.items():
        model.params[name].data = arr.copy()
