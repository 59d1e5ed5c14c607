"""Routers and gating.

The primary router is a small regression MLP (d_m -> d_h relu -> n, absolute
value on the way out) trained with MSE against per-expert output norms
||E_i(z)||_2.  Norm targets survive massive-activation outliers: an outlier
inflates only its own expert's target, leaving the rest exact.

The batch-max classifier baseline is also provided: labels are per-expert
activation sums normalized by the batch-wide max, trained with BCE through a
sigmoid.  One outlier channel crushes every other label toward zero, which
is the failure mode the regression router avoids.

Dynamic-k gating keeps every expert whose score clears tau * max(score);
top-k keeps the k best with ties broken toward lower expert index.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import ExpertPartition, ExpertSlices, expert_outputs
from .errors import ContractError, InputError, NumericError, ValidationError
from .models import CaptureSpec, DenseModel, forward, parse_site, site_activation, site_ffn_weights
from .optim import OptimizerState, optimizer_step

ROUTER_OUTPUTS = ("abs", "sigmoid")


def default_router_hidden(model_dim: int) -> int:
    """Keep the router a small fraction of the site it gates."""
    return max(4, model_dim // 6)


# === gates ===


@dataclass
class GatePolicy:
    kind: str  # "dynamic_k" | "top_k"
    tau: float = 0.0
    k: int = 1

    def validate(self, n_experts: int | None = None) -> None:
        if self.kind not in ("dynamic_k", "top_k"):
            raise ValidationError(f"unknown gate kind {self.kind!r}")
        if self.kind == "dynamic_k" and not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        if self.kind == "top_k":
            if self.k < 1:
                raise ValidationError(f"k must be >= 1, got {self.k}")
            if n_experts is not None and self.k > n_experts:
                raise ValidationError(f"k={self.k} exceeds {n_experts} experts")

    def label(self) -> str:
        return f"tau={self.tau:g}" if self.kind == "dynamic_k" else f"k={self.k}"


@dataclass
class GateDecision:
    mask: np.ndarray
    selected_count: int
    flagged: bool


def dynamic_k_gate(scores: np.ndarray, tau: float) -> GateDecision:
    """Keep every expert with score >= tau * max(scores).  tau=0 keeps all,
    tau=1 keeps the argmax tie set.  An all-zero vector selects everything
    and is flagged."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise InputError(f"scores must be a non-empty vector, got shape {scores.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    if scores.min() < 0:
        raise InputError("dynamic_k_gate expects non-negative scores")
    top = scores.max()
    mask = scores >= tau * top
    return GateDecision(mask=mask, selected_count=int(mask.sum()), flagged=bool(top <= 0))


def top_k_gate(scores: np.ndarray, k: int) -> GateDecision:
    """Keep the k highest-scoring experts; ties go to the lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise InputError(f"scores must be a non-empty vector, got shape {scores.shape}")
    if not 1 <= k <= scores.size:
        raise ValidationError(f"k must be in [1, {scores.size}], got {k}")
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return GateDecision(mask=mask, selected_count=k, flagged=False)


def gate_mask(scores: np.ndarray, policy: GatePolicy) -> tuple[np.ndarray, int]:
    """Vectorized gate over a (tokens x n) score matrix.  Returns the bool
    mask and the number of flagged (all-zero) rows."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise InputError(f"scores must be (tokens, experts), got shape {scores.shape}")
    policy.validate(n_experts=scores.shape[1])
    if policy.kind == "dynamic_k":
        if scores.size and scores.min() < 0:
            raise InputError("dynamic_k gating expects non-negative scores")
        top = scores.max(axis=1, keepdims=True)
        mask = scores >= policy.tau * top
        return mask, int((top <= 0).sum())
    order = np.argsort(-scores, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[:, : policy.k], True, axis=1)
    return mask, 0


# === router model ===


@dataclass
class Router:
    Wh: np.ndarray
    bh: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    output_kind: str = "abs"

    @property
    def hidden_dim(self) -> int:
        return self.Wh.shape[1]

    @property
    def n_experts(self) -> int:
        return self.Wo.shape[1]

    def predict(self, z: np.ndarray) -> np.ndarray:
        """Non-negative expert scores for a (tokens x d_m) input batch."""
        if z.ndim != 2 or z.shape[1] != self.Wh.shape[0]:
            raise InputError(f"router input shape {z.shape} does not match d_m={self.Wh.shape[0]}")
        h = np.maximum(z @ self.Wh + self.bh, 0.0)
        out = h @ self.Wo + self.bo
        if self.output_kind == "abs":
            return np.abs(out)
        return 1.0 / (1.0 + np.exp(-out))


@dataclass
class RouterDataset:
    inputs: np.ndarray  # (tokens, d_m) float32
    targets: np.ndarray  # (tokens, n) float32

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2 \
                or self.inputs.shape[0] != self.targets.shape[0]:
            raise ValidationError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} do not align")


def val_row_mask(n_rows: int) -> np.ndarray:
    """Deterministic ~10% validation split by row-index hash."""
    return np.asarray(
        [zlib.crc32(struct.pack("<Q", i)) % 10 == 0 for i in range(n_rows)], dtype=bool)


def expert_output_norms(slices: ExpertSlices, z: np.ndarray, activation: str) -> np.ndarray:
    """||E_i(z)||_2 per token per expert, excluding the shared b2."""
    outs = expert_outputs(slices, z, activation)
    return np.stack([np.sqrt((o * o).sum(axis=1)) for o in outs], axis=1)


def _site_inputs(model: DenseModel, site: str, dataset, split: str, max_tokens: int) -> np.ndarray:
    layer, kind = parse_site(site)
    seqs = dataset.split(split)
    capture = CaptureSpec(ffn_layers={layer}) if kind == "ffn" \
        else CaptureSpec(mha_sites={(layer, kind)})
    chunks, total = [], 0
    for i in range(seqs.shape[0]):
        if total >= max_tokens:
            break
        x = seqs[i][:-1] if dataset.task == "byte_lm" else seqs[i]
        res = forward(model, x, capture=capture)
        z = res.trace.ffn_in[layer] if kind == "ffn" else res.trace.mha_in[site]
        chunks.append(z.data)
        total += z.shape[0]
    if not chunks:
        raise InputError(f"no tokens captured for site {site}")
    return np.concatenate(chunks, axis=0)[:max_tokens]


def collect_router_dataset(model: DenseModel, site: str, dataset, slices: ExpertSlices,
                           max_tokens: int = 16384, split: str = "train") -> RouterDataset:
    """Inputs: the exact tensors the site consumes during forwards on the
    dataset.  Targets: per-expert output norms under the current weights."""
    z = _site_inputs(model, site, dataset, split, max_tokens)
    targets = expert_output_norms(slices, z, site_activation(model, site))
    return RouterDataset(inputs=z.astype(np.float32), targets=targets.astype(np.float32))


@dataclass
class RouterTrainConfig:
    hidden: int | None = None
    steps: int = 2000
    batch_size: int = 256
    lr: float = 3e-3
    schedule: str = "cosine"
    eval_interval: int = 200
    init_std: float = 0.02


def _router_training_loop(cfg: RouterTrainConfig, data: RouterDataset, seed: int,
                          loss_fn, output_kind: str) -> tuple[Router, dict]:
    d_m, n = data.inputs.shape[1], data.targets.shape[1]
    d_h = cfg.hidden if cfg.hidden is not None else default_router_hidden(d_m)
    rng = np.random.default_rng(seed)
    val = val_row_mask(data.inputs.shape[0])
    tr_x, tr_y = data.inputs[~val], data.targets[~val]
    va_x, va_y = data.inputs[val], data.targets[val]
    if tr_x.shape[0] == 0:
        raise InputError("router dataset has no training rows")

    params = {
        "Wh": ad.parameter(rng.normal(0.0, cfg.init_std, (d_m, d_h)).astype(np.float32)),
        "bh": ad.parameter(np.zeros(d_h, dtype=np.float32)),
        "Wo": ad.parameter(rng.normal(0.0, cfg.init_std, (d_h, n)).astype(np.float32)),
        "bo": ad.parameter(tr_y.mean(axis=0) if output_kind == "abs"
                           else np.zeros(n, dtype=np.float32)),
    }
    opt = OptimizerState(lr=cfg.lr, schedule=cfg.schedule, total_steps=cfg.steps, seed=seed)

    def scores_of(x: Tensor) -> Tensor:
        h = ad.relu(ad.add_bias(ad.matmul(x, params["Wh"]), params["bh"]))
        return ad.add_bias(ad.matmul(h, params["Wo"]), params["bo"])

    last = float("nan")
    for step in range(cfg.steps):
        idx = rng.integers(0, tr_x.shape[0], size=min(cfg.batch_size, tr_x.shape[0]))
        with ad.ComputationTape() as tape:
            loss = loss_fn(scores_of(ad.constant(tr_x[idx])), tr_y[idx])
            last = float(loss.data)
            if not np.isfinite(last):
                raise NumericError(f"router training diverged at step {step} (loss={last})")
            grads = ad.backward(tape, loss)
        optimizer_step(opt, params, {k: grads[p].data for k, p in params.items()})

    router = Router(Wh=params["Wh"].data, bh=params["bh"].data,
                    Wo=params["Wo"].data, bo=params["bo"].data, output_kind=output_kind)
    report = {"train_loss": last, "router_hidden": d_h,
              "target_variance": float(data.targets.var()),
              "val_rows": int(va_x.shape[0])}
    if va_x.shape[0]:
        pred = router.predict(va_x)
        report["val_mse"] = float(((pred - va_y) ** 2).mean())
    return router, report


def train_router(cfg: RouterTrainConfig, data: RouterDataset, seed: int = 0) -> tuple[Router, dict]:
    """Fit the regression router: MSE between |MLP(z)| and norm targets."""

    def loss_fn(raw: Tensor, target: np.ndarray) -> Tensor:
        return ad.mse(ad.absolute(raw), ad.constant(target))

    return _router_training_loop(cfg, data, seed, loss_fn, output_kind="abs")


# === batch-max classifier baseline ===


def group_by_expert(hidden: np.ndarray, partition: ExpertPartition) -> np.ndarray:
    """Reshape (tokens, hidden) post-activations to (tokens, n_experts, size)."""
    if hidden.ndim != 2 or hidden.shape[1] != partition.assignment.size:
        raise InputError(f"hidden shape {hidden.shape} does not match partition "
                         f"of {partition.assignment.size} neurons")
    return np.stack([hidden[:, idx] for idx in partition.expert_indices], axis=1)


def moefication_labels(acts: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-expert activation sums normalized by the batch-wide max sum.

    Returns (labels, number of all-zero rows).  All-zero rows get zero
    labels rather than NaN.
    """
    acts = np.asarray(acts)
    if acts.ndim != 3:
        raise InputError(f"acts must be (tokens, experts, size), got shape {acts.shape}")
    sums = acts.sum(axis=2)
    top = sums.max() if sums.size else 0.0
    zero_rows = int((np.abs(sums).sum(axis=1) == 0).sum())
    if top <= 0:
        return np.zeros_like(sums), zero_rows
    return sums / top, zero_rows


def collect_moefication_dataset(model: DenseModel, site: str, dataset,
                                partition: ExpertPartition, max_tokens: int = 16384,
                                split: str = "train") -> tuple[RouterDataset, int]:
    """Site inputs paired with batch-max labels computed from the site's own
    post-relu hidden activations."""
    if site_activation(model, site) != "relu":
        raise ContractError("batch-max labels are defined for relu sites; relufy first")
    z = _site_inputs(model, site, dataset, split, max_tokens)
    ffn = site_ffn_weights(model, site)
    hidden = np.maximum(z @ ffn.W1 + ffn.b1, 0.0)
    labels, zero_rows = moefication_labels(group_by_expert(hidden, partition))
    return RouterDataset(inputs=z.astype(np.float32), targets=labels.astype(np.float32)), zero_rows


def train_moefication_router(cfg: RouterTrainConfig, data: RouterDataset,
                             seed: int = 0) -> tuple[Router, dict]:
    """Fit the classifier baseline: per-expert BCE against batch-max labels,
    expressed as two-class cross-entropy on [x, 0] logit pairs."""
    n = data.targets.shape[1]
    cols = [ad.constant(np.eye(n, dtype=np.float32)[:, j : j + 1]) for j in range(n)]
    pair = ad.constant(np.asarray([[1.0, 0.0]], dtype=np.float32))

    def loss_fn(raw: Tensor, target: np.ndarray) -> Tensor:
        total = None
        for j in range(n):
            two = ad.matmul(ad.matmul(raw, cols[j]), pair)
            soft = np.stack([target[:, j], 1.0 - target[:, j]], axis=1)
            ce = ad.cross_entropy(two, soft.astype(np.float32))
            total = ce if total is None else ad.add(total, ce)
        return ad.div(total, ad.constant(np.asarray(float(n), dtype=np.float32)))

    return _router_training_loop(cfg, data, seed, loss_fn, output_kind="sigmoid")
