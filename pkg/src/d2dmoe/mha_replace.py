"""Replace attention projections with relu MLPs so they can be split too.

Each d_m x d_m projection becomes a d_m -> h -> d_m relu MLP with
h = floor(d_m / 2), which matches the original's multiply count exactly
(2 * d_m * h = d_m^2) and stays under 5% extra parameters (the two bias
vectors).  Every MLP is distilled independently against activations captured
from the original model, then all sites are swapped at once.

exact_replacement builds the identity construction relu(u) - relu(-u) = u
as a *mirrored* pair sharing one projection-shaped matmul.  The obvious
layout [W, -W] / [I; -I] is algebraically the same but not bit-exact here:
BLAS reorders the reduction when the output width changes, so x @ [W, -W]
does not reproduce x @ W bitwise.  Keeping the matmul shape identical to
the dense projection's makes the swap provably lossless, which is what the
construction exists to demonstrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError, NumericError
from .models import CaptureSpec, DenseModel, forward, parse_site
from .optim import OptimizerState, optimizer_step
from .routing import val_row_mask


def default_replacement_hidden(d_m: int) -> int:
    return d_m // 2


@dataclass
class ReplacementMlp:
    """Two-layer relu MLP standing in for a d_m x d_m projection.

    mirrored=True is the exactness control from exact_replacement: the
    hidden layer is conceptually [relu(u); relu(-u)] with u = x @ W_in and
    the output layer is the fixed [I; -I] contraction, so only W_in and
    b_out are stored (b_in and W_out are None).
    """

    W_in: np.ndarray
    b_in: np.ndarray | None
    W_out: np.ndarray | None
    b_out: np.ndarray
    mirrored: bool = False

    @property
    def hidden_dim(self) -> int:
        return 2 * self.W_in.shape[1] if self.mirrored else self.W_in.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.mirrored:
            u = x @ self.W_in
            return (np.maximum(u, 0.0) + -1.0 * np.maximum(-1.0 * u, 0.0)) + self.b_out
        return np.maximum(x @ self.W_in + self.b_in, 0.0) @ self.W_out + self.b_out


def replacement_mac_ratio(d_m: int, hidden: int) -> float:
    """Multiply count of the MLP relative to the dense projection."""
    return 2.0 * d_m * hidden / (d_m * d_m)


def exact_replacement(W: np.ndarray, b: np.ndarray) -> ReplacementMlp:
    """Identity construction relu(xW) - relu(-xW) = xW, stored mirrored."""
    return ReplacementMlp(W_in=W.copy(), b_in=None, W_out=None, b_out=b.copy(), mirrored=True)


@dataclass
class DistillConfig:
    hidden: int | None = None
    steps: int = 2500
    batch_size: int = 256
    lr: float = 2e-3
    schedule: str = "cosine"
    init_std: float = 0.05
    max_tokens: int = 16384


def distill_projection(W: np.ndarray, b: np.ndarray, samples: np.ndarray,
                       cfg: DistillConfig, seed: int = 0) -> tuple[ReplacementMlp, dict]:
    """Fit the replacement MLP to x -> xW + b over captured input samples.

    Returns the MLP and a report with held-out MSE, both raw and relative to
    the target second moment.
    """
    if samples.ndim != 2 or samples.shape[1] != W.shape[0]:
        raise InputError(f"samples shape {samples.shape} does not match projection {W.shape}")
    d_m = W.shape[0]
    h = cfg.hidden if cfg.hidden is not None else default_replacement_hidden(d_m)
    if h < 1:
        raise InputError(f"replacement hidden width must be >= 1, got {h}")
    targets = (samples @ W + b).astype(np.float32)
    samples = samples.astype(np.float32)
    val = val_row_mask(samples.shape[0])
    tr_x, tr_y = samples[~val], targets[~val]
    va_x, va_y = samples[val], targets[val]

    rng = np.random.default_rng(seed)
    params = {
        "W_in": ad.parameter(rng.normal(0.0, cfg.init_std, (d_m, h)).astype(np.float32)),
        "b_in": ad.parameter(np.zeros(h, dtype=np.float32)),
        "W_out": ad.parameter(rng.normal(0.0, cfg.init_std, (h, d_m)).astype(np.float32)),
        "b_out": ad.parameter(tr_y.mean(axis=0)),
    }
    opt = OptimizerState(lr=cfg.lr, schedule=cfg.schedule, total_steps=cfg.steps, seed=seed)

    for step in range(cfg.steps):
        idx = rng.integers(0, tr_x.shape[0], size=min(cfg.batch_size, tr_x.shape[0]))
        with ad.ComputationTape() as tape:
            x = ad.constant(tr_x[idx])
            u = ad.relu(ad.add_bias(ad.matmul(x, params["W_in"]), params["b_in"]))
            pred = ad.add_bias(ad.matmul(u, params["W_out"]), params["b_out"])
            loss = ad.mse(pred, ad.constant(tr_y[idx]))
            if not np.isfinite(float(loss.data)):
                raise NumericError(f"distillation diverged at step {step}")
            grads = ad.backward(tape, loss)
        optimizer_step(opt, params, {k: grads[p].data for k, p in params.items()})

    mlp = ReplacementMlp(W_in=params["W_in"].data, b_in=params["b_in"].data,
                         W_out=params["W_out"].data, b_out=params["b_out"].data)
    hold_x, hold_y = (va_x, va_y) if va_x.shape[0] else (tr_x, tr_y)
    mse = float(((mlp.apply(hold_x) - hold_y) ** 2).mean())
    second_moment = float((hold_y**2).mean())
    return mlp, {
        "val_mse": mse,
        "val_mse_relative": mse / max(second_moment, 1e-12),
        "target_second_moment": second_moment,
        "hidden": h,
        "mac_ratio": replacement_mac_ratio(d_m, h),
    }


def capture_projection_inputs(model: DenseModel, sites: list[str], dataset,
                              max_tokens: int = 16384, split: str = "train") -> dict[str, np.ndarray]:
    """Input activations per site from the current (unmodified) model."""
    pairs = []
    for site in sites:
        layer, kind = parse_site(site)
        if kind == "ffn":
            raise ContractError(f"site {site} is an FFN, not an attention projection")
        pairs.append((layer, kind))
    capture = CaptureSpec(mha_sites=set(pairs))
    seqs = dataset.split(split)
    chunks: dict[str, list[np.ndarray]] = {site: [] for site in sites}
    total = 0
    for i in range(seqs.shape[0]):
        if total >= max_tokens:
            break
        x = seqs[i][:-1] if dataset.task == "byte_lm" else seqs[i]
        res = forward(model, x, capture=capture)
        for site in sites:
            chunks[site].append(res.trace.mha_in[site].data)
        total += x.size
    return {site: np.concatenate(c, axis=0)[:max_tokens] for site, c in chunks.items()}


def install_replacement(model: DenseModel, site: str, mlp: ReplacementMlp) -> None:
    layer, kind = parse_site(site)
    if kind == "ffn":
        raise ContractError(f"site {site} is an FFN, not an attention projection")
    pre = f"mha.{layer}.{kind}"
    model.params[f"{pre}.W_in"] = ad.parameter(mlp.W_in.astype(np.float32))
    model.params[f"{pre}.b_out"] = ad.parameter(mlp.b_out.astype(np.float32))
    if mlp.mirrored:
        model.forms[site] = "replaced-mha-mirrored"
        return
    model.params[f"{pre}.b_in"] = ad.parameter(mlp.b_in.astype(np.float32))
    model.params[f"{pre}.W_out"] = ad.parameter(mlp.W_out.astype(np.float32))
    model.forms[site] = "replaced-mha"


def replace_mha(model: DenseModel, sites: list[str], dataset, cfg: DistillConfig,
                seed: int = 0) -> dict[str, dict]:
    """Capture, distill every site against the original model, then swap all
    replacements in.  Returns the per-site distillation reports."""
    inputs = capture_projection_inputs(model, sites, dataset, max_tokens=cfg.max_tokens)
    reports, mlps = {}, {}
    for i, site in enumerate(sites):
        layer, kind = parse_site(site)
        W = model.param(f"layer.{layer}.attn.w{kind}").data
        b = model.param(f"layer.{layer}.attn.b{kind}").data
        mlps[site], reports[site] = distill_projection(W, b, inputs[site], cfg, seed=seed + i)
        reports[site]["dataset_tokens"] = int(inputs[site].shape[0])
    for site in sites:
        install_replacement(model, site, mlps[site])
    return reports
