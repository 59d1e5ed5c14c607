"""Activation-sparsity enforcement.

The penalty is the square-Hoyer ratio (sum |a|)^2 / (sum a^2) per token,
averaged over tokens and layers.  It is scale-invariant and bounded by
[1, m] for m hidden channels, so it pushes tokens toward few large
activations instead of shrinking everything.  relu models are penalized on
post-activations; gelu models on displaced pre-activations max(0, z - d),
which targets the mass a later relu conversion would keep.  Gated FFNs are
penalized on the gate path.

sparsify_finetune with alpha = 0 is plain fine-tuning; the harness reuses it
for base training and for the no-penalty baseline branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ValidationError
from .models import ActivationTrace, CaptureSpec, DenseModel, forward, restore_params, snapshot_params
from .optim import OptimizerState, optimizer_step

DEGENERATE_EPS = 1e-12


def hoyer_core(acts: Tensor, stats: dict | None = None) -> Tensor:
    """Per-token square-Hoyer ratio averaged over a (tokens x m) activation
    matrix.  All-zero tokens contribute 0 (and are tallied into
    stats["degenerate_tokens"] when a dict is passed) instead of dividing by
    zero."""
    if acts.data.ndim != 2:
        raise ValidationError(f"hoyer_core: need (tokens, channels), got {acts.shape}")
    t = acts.shape[0]
    live = (np.abs(acts.data).max(axis=1) >= DEGENERATE_EPS).astype(acts.data.dtype)
    if stats is not None:
        stats["degenerate_tokens"] = stats.get("degenerate_tokens", 0) + int(t - live.sum())
    mask = ad.constant(live, dtype=acts.dtype)
    s1 = ad.sum_reduce(ad.absolute(acts), axis=1)
    s2 = ad.sum_reduce(ad.square(acts), axis=1)
    safe_s2 = ad.add(ad.mul(s2, mask), ad.constant(1.0 - live, dtype=acts.dtype))
    ratio = ad.mul(ad.div(ad.square(s1), safe_s2), mask)
    return ad.div(ad.sum_reduce(ratio), ad.constant(np.asarray(t), dtype=acts.data.dtype))


def displaced_preactivation(z: Tensor, displacement: float) -> Tensor:
    """max(0, z - d): the part of a pre-activation that survives a relu
    shifted by displacement d (d is negative in practice)."""
    if z.data.ndim != 2:
        raise ValidationError(f"displaced_preactivation: need a matrix, got {z.shape}")
    shift = ad.constant(np.full(z.shape[1], -displacement), dtype=z.dtype)
    return ad.relu(ad.add_bias(z, shift))


def sparse_activations(z: Tensor, activation: str, displacement: float) -> Tensor:
    """The tensor the penalty applies to, given a captured pre-activation."""
    if activation == "relu":
        return ad.relu(z)
    return displaced_preactivation(z, displacement)


def hoyer_loss(trace: ActivationTrace, activation: str, displacement: float = -10.0,
               stats: dict | None = None) -> Tensor:
    """Mean square-Hoyer penalty over the layers captured in a trace."""
    if not trace.ffn_pre:
        raise ContractError("hoyer_loss: trace has no captured FFN pre-activations")
    total = None
    for layer in sorted(trace.ffn_pre):
        acts = sparse_activations(trace.ffn_pre[layer], activation, displacement)
        term = hoyer_core(acts, stats=stats)
        total = term if total is None else ad.add(total, term)
    return ad.div(total, ad.constant(np.asarray(float(len(trace.ffn_pre)), dtype=total.dtype)))


# === fine-tuning ===


@dataclass
class SparsifyConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 5e-4
    schedule: str = "cosine"
    alpha: float = 0.0
    ramp: bool = True
    displacement: float = -10.0
    nonzero_threshold: float = 1e-6
    eval_interval: int = 100
    eval_sequences: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def alpha_at(self, step: int) -> float:
        """Penalty weight for 0-based step; the linear ramp hits alpha exactly
        on the final step."""
        if not self.ramp or self.alpha == 0.0:
            return self.alpha
        return self.alpha * (step + 1) / self.steps


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    tokens_consumed: int = 0
    degenerate_tokens: int = 0
    final_train_ce: float = float("nan")
    final_val_metric: float = float("nan")


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.integers(0, n, size=batch_size)


def _lm_pair(seqs: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    row = seqs[i]
    return row[:-1], row[1:]


def _sequence_ce(model: DenseModel, dataset, i: int, split: str, capture=None):
    """CE loss tensor for one training example, plus its trace and token count."""
    seqs = dataset.split(split)
    if dataset.task == "byte_lm":
        x, y = _lm_pair(seqs, i)
        res = forward(model, x, capture=capture)
        return ad.cross_entropy(res.logits, y), res.trace, x.size
    labels = dataset.split_labels(split)
    res = forward(model, seqs[i], capture=capture)
    return ad.cross_entropy(res.logits, np.asarray([labels[i]])), res.trace, seqs.shape[1]


def _mean(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return ad.div(total, ad.constant(np.asarray(float(len(tensors)), dtype=total.dtype)))


def evaluate(model: DenseModel, dataset, split: str = "val", max_sequences: int | None = None,
             exec_trace=None) -> dict:
    """Deterministic eval: mean CE per token (plus accuracy for classifiers)."""
    seqs = dataset.split(split)
    n = seqs.shape[0] if max_sequences is None else min(max_sequences, seqs.shape[0])
    ces, correct = [], 0
    for i in range(n):
        if dataset.task == "byte_lm":
            x, y = _lm_pair(seqs, i)
            res = forward(model, x, exec_trace=exec_trace)
            ces.append(float(ad.cross_entropy(res.logits, y).data))
        else:
            labels = dataset.split_labels(split)
            res = forward(model, seqs[i], exec_trace=exec_trace)
            ces.append(float(ad.cross_entropy(res.logits, np.asarray([labels[i]])).data))
            correct += int(np.argmax(res.logits.data[0]) == labels[i])
    out = {"ce": float(np.mean(ces)), "sequences": n}
    if dataset.task != "byte_lm":
        out["accuracy"] = correct / max(n, 1)
    return out


def _nonzero_fraction(traces: list[ActivationTrace], activation: str, cfg: SparsifyConfig) -> float:
    counts, total = 0, 0
    for trace in traces:
        for z in trace.ffn_pre.values():
            a = np.maximum(z.data, 0.0) if activation == "relu" \
                else np.maximum(z.data - cfg.displacement, 0.0)
            counts += int((np.abs(a) > cfg.nonzero_threshold).sum())
            total += a.size
    return counts / max(total, 1)


def sparsify_finetune(model: DenseModel, dataset, cfg: SparsifyConfig) -> TrainLog:
    """Fine-tune in place on task CE plus alpha * square-Hoyer.

    Non-finite loss aborts with NumericError naming the step; parameters are
    rolled back to the last logged-good snapshot first.
    """
    if any(form == "moe" for form in model.forms.values()):
        raise ContractError("sparsify_finetune cannot train through moe-form sites")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(lr=cfg.lr, schedule=cfg.schedule, total_steps=cfg.steps,
                         weight_decay=cfg.weight_decay, seed=cfg.seed)
    log = TrainLog()
    capture = CaptureSpec(ffn_layers="all")
    n_train = dataset.split("train").shape[0]
    last_good = snapshot_params(model)
    stats: dict = {}

    for step in range(cfg.steps):
        alpha = cfg.alpha_at(step)
        idx = _batch_indices(rng, n_train, cfg.batch_size)
        with ad.ComputationTape() as tape:
            ces, hoyers, traces = [], [], []
            for i in idx:
                ce, trace, tokens = _sequence_ce(model, dataset, int(i), "train", capture=capture)
                ces.append(ce)
                traces.append(trace)
                log.tokens_consumed += tokens
                if cfg.alpha != 0.0:
                    hoyers.append(hoyer_loss(trace, model.config.activation,
                                             cfg.displacement, stats=stats))
            ce_mean = _mean(ces)
            if hoyers:
                hoyer_mean = _mean(hoyers)
                loss = ad.add(ce_mean, ad.mul(ad.constant(np.asarray(alpha, dtype=np.float32)),
                                              hoyer_mean))
            else:
                hoyer_mean = None
                loss = ce_mean
            ce_val = float(ce_mean.data)
            hoyer_val = float(hoyer_mean.data) if hoyer_mean is not None else 0.0
            if not (np.isfinite(ce_val) and np.isfinite(hoyer_val)):
                restore_params(model, last_good)
                raise NumericError(f"non-finite loss at step {step} (ce={ce_val}, hoyer={hoyer_val})")
            grads = ad.backward(tape, loss)
        named = {}
        for name, p in model.params.items():
            g = grads.get(p)
            named[name] = g.data if g is not None else np.zeros_like(p.data)
        optimizer_step(opt, model.params, named)

        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            row = {
                "step": step,
                "alpha": alpha,
                "ce": ce_val,
                "hoyer": hoyer_val,
                "nonzero_frac": _nonzero_fraction(traces, model.config.activation, cfg),
            }
            if step == cfg.steps - 1 and cfg.eval_sequences:
                row.update({f"val_{k}": v for k, v in
                            evaluate(model, dataset, max_sequences=cfg.eval_sequences).items()})
            log.rows.append(row)
            last_good = snapshot_params(model)

    log.degenerate_tokens = stats.get("degenerate_tokens", 0)
    log.final_train_ce = log.rows[-1]["ce"] if log.rows else float("nan")
    log.final_val_metric = log.rows[-1].get("val_ce", float("nan")) if log.rows else float("nan")
    return log


# === activation statistics ===


@dataclass
class ActivationStats:
    """Per-layer histograms of per-token non-zero activation counts."""

    threshold: float
    histograms: dict[int, np.ndarray]
    tokens: int

    def summary(self) -> dict[int, dict]:
        out = {}
        for layer, hist in sorted(self.histograms.items()):
            counts = np.arange(hist.size)
            total = hist.sum()
            mean = float((counts * hist).sum() / total) if total else 0.0
            var = float((hist * (counts - mean) ** 2).sum() / total) if total else 0.0
            out[layer] = {"mean": mean, "variance": var, "tokens": int(total)}
        return out


def activation_stats(model: DenseModel, dataset, threshold: float = 1e-6,
                     split: str = "val", max_sequences: int | None = None,
                     displacement: float | None = None) -> ActivationStats:
    """Count per-token non-zero FFN activations over a dataset split.

    For gelu models a displacement may be given to count the displaced-relu
    support instead of raw |gelu| magnitudes.
    """
    seqs = dataset.split(split)
    n = seqs.shape[0] if max_sequences is None else min(max_sequences, seqs.shape[0])
    m = model.config.hidden_dim
    hists = {l: np.zeros(m + 1, dtype=np.int64) for l in range(model.config.num_layers)}
    tokens = 0
    capture = CaptureSpec(ffn_layers="all")
    for i in range(n):
        x = seqs[i][:-1] if dataset.task == "byte_lm" else seqs[i]
        res = forward(model, x, capture=capture)
        tokens += x.size
        for layer, z in res.trace.ffn_pre.items():
            if model.config.activation == "relu":
                acts = np.maximum(z.data, 0.0)
            elif displacement is not None:
                acts = np.maximum(z.data - displacement, 0.0)
            else:
                acts = ad.gelu_array(z.data)
            counts = (np.abs(acts) > threshold).sum(axis=1)
            hists[layer] += np.bincount(counts, minlength=m + 1)
    return ActivationStats(threshold=threshold, histograms=hists, tokens=tokens)


def write_histogram_csv(stats: ActivationStats, path) -> None:
    """Columns: layer, bucket_lo, bucket_hi, count — unit buckets [c, c+1)."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "bucket_lo", "bucket_hi", "count"])
        for layer, hist in sorted(stats.histograms.items()):
            for c in range(hist.size):
                if hist[c]:
                    writer.writerow([layer, c, c + 1, int(hist[c])])
