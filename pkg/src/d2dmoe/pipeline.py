"""Spec-driven experiment harness.

An experiment is a JSON spec: task, model config, per-stage configs, a gate
policy grid, and seeds.  run_pipeline executes the spec's stages in a fixed
canonical order, writing one checkpoint plus one JSON log per stage under
out_dir/seed{n}/, so any prefix of the pipeline can be resumed by rerunning
the same spec.  run_sweep then reuses the single converted checkpoint for
every grid point - changing tau or k never retrains anything.

compare_methods runs the regression-routed pipeline and the batch-max
classifier baseline from one shared base checkpoint with matched token
budgets (asserted from the stage logs, not assumed) and emits one combined
CSV.  All artifacts are deterministic byte-for-byte for a fixed spec and
seed: no timestamps, no absolute paths, sorted keys everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import slice_ffn
from .data import gen_dataset, load_dataset, save_dataset
from .errors import InputError, ValidationError
from .flops import CostRow, dense_model_flops, model_flops, write_cost_csv
from .mha_replace import DistillConfig, replace_mha
from .models import (TransformerConfig, build_model, parse_site, relufy,
                     site_ffn_weights, site_names)
from .moe import (ExecutionTrace, assemble_all, attach_router, cluster_sites,
                  convert_model, set_gate_policy)
from .routing import (GatePolicy, RouterTrainConfig, collect_moefication_dataset,
                      collect_router_dataset, train_moefication_router, train_router)
from .sparsity import SparsifyConfig, evaluate, sparsify_finetune

STAGE_ORDER = ("train", "sparsify", "relufy", "replace_mha", "cluster", "routers", "convert")
TASKS = ("byte_lm", "toy_classify")
ROUTER_KINDS = ("regression", "classifier")
METHODS = ("d2dmoe", "d2dmoe_nosparse", "moefication")

# deterministic per-stage seed offsets, shared across methods so matched
# stages draw from identically-seeded streams
STAGE_SEED = {"train": 0, "sparsify": 1, "relufy": 1, "replace_mha": 2,
              "cluster": 3, "routers": 4, "convert": 0}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:12]


def build_id(raw: dict) -> str:
    return hashlib.sha256(f"{__version__}:{spec_hash(raw)}".encode()).hexdigest()[:12]


def _take(cls, cfg: dict, context: str, **forced):
    """Build a dataclass config from a JSON dict, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = set(cfg) - known
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")
    return cls(**{**cfg, **forced})


def resolve_sites(spec_sites, config: TransformerConfig) -> list[str]:
    """Expand the site shorthands "ffn" / "attn" / "all" or validate a list."""
    every = site_names(config)
    if spec_sites in ("ffn", "attn"):
        want = "ffn" if spec_sites == "ffn" else "qkvo"
        return [s for s in every if parse_site(s)[1] in want]
    if spec_sites == "all":
        return list(every)
    if not isinstance(spec_sites, list) or not spec_sites:
        raise ValidationError(f"sites must be 'ffn', 'attn', 'all', or a non-empty list, got {spec_sites!r}")
    bad = [s for s in spec_sites if s not in every]
    if bad:
        raise ValidationError(f"unknown sites {bad}; model has {every}")
    return list(spec_sites)


@dataclass
class ExperimentSpec:
    raw: dict
    task: str
    seeds: list[int]
    out_dir: Path
    model: TransformerConfig
    data: dict
    stages: dict
    sweep: dict
    granularity: dict
    compare: dict

    @classmethod
    def from_dict(cls, raw: dict, out_dir=None) -> "ExperimentSpec":
        known = {"task", "seeds", "out_dir", "model", "data", "stages",
                 "sweep", "granularity", "compare"}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown spec keys {sorted(unknown)}")
        out = out_dir if out_dir is not None else raw.get("out_dir")
        if out is None:
            raise ValidationError("spec needs an out_dir (or pass --out)")
        spec = cls(
            raw=raw,
            task=raw.get("task", "byte_lm"),
            seeds=[int(s) for s in raw.get("seeds", [0])],
            out_dir=Path(out),
            model=TransformerConfig.from_dict(raw.get("model", {})),
            data=dict(raw.get("data", {})),
            stages=dict(raw.get("stages", {})),
            sweep=dict(raw.get("sweep", {})),
            granularity=dict(raw.get("granularity", {})),
            compare=dict(raw.get("compare", {})),
        )
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path, out_dir=None) -> "ExperimentSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f), out_dir=out_dir)

    def validate(self) -> None:
        bad = []
        if self.task not in TASKS:
            bad.append(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.seeds:
            bad.append("seeds must be non-empty")
        bad.extend(self.model.validate())
        if self.task == "toy_classify" and self.model.task_head != "classifier":
            bad.append("toy_classify needs model.task_head='classifier'")
        if self.task == "byte_lm" and self.model.task_head != "lm":
            bad.append("byte_lm needs model.task_head='lm'")
        unknown = set(self.stages) - set(STAGE_ORDER)
        if unknown:
            bad.append(f"unknown stages {sorted(unknown)}; order is {STAGE_ORDER}")
        seq_len = int(self.data.get("seq_len", 0))
        if seq_len < 2:
            bad.append("data.seq_len must be >= 2")
        elif seq_len > self.model.context_length:
            bad.append(f"data.seq_len {seq_len} exceeds context_length {self.model.context_length}")
        if int(self.data.get("num_sequences", 0)) < 4:
            bad.append("data.num_sequences must be >= 4")

        if "cluster" in self.stages:
            sites = self.stages["cluster"].get("sites", "ffn")
            try:
                resolved = resolve_sites(sites, self.model)
            except ValidationError as e:
                bad.append(str(e))
                resolved = []
            attn = [s for s in resolved if parse_site(s)[1] != "ffn"]
            if attn and "replace_mha" not in self.stages:
                bad.append(f"clustering attention sites {attn} requires a replace_mha stage first")
        for dependent, prereq in (("routers", "cluster"), ("convert", "routers")):
            if dependent in self.stages and prereq not in self.stages:
                bad.append(f"stage {dependent!r} requires stage {prereq!r}")
        if self.stages.get("routers", {}).get("kind", "regression") == "classifier":
            if self.model.activation != "relu" and "relufy" not in self.stages:
                bad.append("classifier routers need relu activations; add a relufy stage")
        if self.sweep:
            taus, ks = self.sweep.get("taus", []), self.sweep.get("ks", [])
            if not taus and not ks:
                bad.append("sweep grid is empty: provide taus and/or ks")
            if any(not 0.0 <= float(t) <= 1.0 for t in taus):
                bad.append(f"sweep taus must lie in [0, 1], got {taus}")
            if any(int(k) < 1 for k in ks):
                bad.append(f"sweep ks must be >= 1, got {ks}")
        hidden = self.model.hidden_dim
        for size in self.granularity.get("expert_sizes", []):
            if int(size) < 1 or hidden % int(size):
                bad.append(f"granularity expert size {size} must divide hidden dim {hidden}")
        methods = self.compare.get("methods", [])
        if self.compare and (len(methods) < 2 or any(m not in METHODS for m in methods)):
            bad.append(f"compare.methods needs >= 2 of {METHODS}, got {methods}")
        if bad:
            raise ValidationError("invalid experiment spec: " + "; ".join(bad))

    def hash(self) -> str:
        return spec_hash(self.raw)


def ensure_dataset(spec: ExperimentSpec):
    """Generate (or reload and re-verify) the spec's dataset under out_dir."""
    ddir = spec.out_dir / "dataset"
    if (ddir / "meta.json").exists():
        return load_dataset(ddir)
    ds = gen_dataset(spec.task, int(spec.data["num_sequences"]), int(spec.data["seq_len"]),
                     seed=int(spec.data.get("seed", 1234)))
    ddir.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, ddir)
    return ds


# === stage execution ===


def _finetune_cfg(cfg: dict, seed: int, stage: str, **forced) -> SparsifyConfig:
    cfg = dict(cfg)
    cfg.pop("sites", None)
    return _take(SparsifyConfig, cfg, f"stage {stage}", seed=seed + STAGE_SEED[stage], **forced)


def _stage_train(model, dataset, cfg, seed, spec):
    if model is None:
        model = build_model(spec.model, seed=seed)
    log = sparsify_finetune(model, dataset, _finetune_cfg(cfg, seed, "train", alpha=0.0))
    return model, {"tokens_consumed": log.tokens_consumed, "rows": log.rows,
                   "final_train_ce": log.final_train_ce}


def _stage_sparsify(model, dataset, cfg, seed, spec):
    log = sparsify_finetune(model, dataset, _finetune_cfg(cfg, seed, "sparsify"))
    return model, {"tokens_consumed": log.tokens_consumed, "rows": log.rows,
                   "degenerate_tokens": log.degenerate_tokens,
                   "final_train_ce": log.final_train_ce}


def _stage_relufy(model, dataset, cfg, seed, spec):
    changed = relufy(model)
    log = sparsify_finetune(model, dataset, _finetune_cfg(cfg, seed, "relufy", alpha=0.0))
    return model, {"relufy": changed, "tokens_consumed": log.tokens_consumed,
                   "rows": log.rows, "final_train_ce": log.final_train_ce}


def _stage_replace_mha(model, dataset, cfg, seed, spec):
    cfg = dict(cfg)
    sites = resolve_sites(cfg.pop("sites", "attn"), model.config)
    recover = cfg.pop("recover", None)
    dcfg = _take(DistillConfig, cfg, "stage replace_mha")
    reports = replace_mha(model, sites, dataset, dcfg, seed=seed + STAGE_SEED["replace_mha"])
    # distillation reuses one captured pool; data cost is the pool size
    log = {"sites": sites, "distill": reports,
           "tokens_consumed": max(r["dataset_tokens"] for r in reports.values())}
    if recover:
        rec = sparsify_finetune(model, dataset, _finetune_cfg(recover, seed, "replace_mha", alpha=0.0))
        log["recover"] = {"tokens_consumed": rec.tokens_consumed, "rows": rec.rows}
        log["tokens_consumed"] += rec.tokens_consumed
    return model, log


def _stage_cluster(model, dataset, cfg, seed, spec):
    cfg = dict(cfg)
    sites = resolve_sites(cfg.pop("sites", "ffn"), model.config)
    n_experts = cfg.pop("n_experts")
    max_iters = int(cfg.pop("max_iters", 60))
    if cfg:
        raise ValidationError(f"stage cluster: unknown keys {sorted(cfg)}")
    devs = cluster_sites(model, sites, n_experts, seed=seed + STAGE_SEED["cluster"],
                         max_iters=max_iters)
    return model, {"sites": sites, "n_experts": n_experts, "reconstruct_dev": devs}


def _stage_routers(model, dataset, cfg, seed, spec):
    cfg = dict(cfg)
    kind = cfg.pop("kind", "regression")
    if kind not in ROUTER_KINDS:
        raise ValidationError(f"router kind must be one of {ROUTER_KINDS}, got {kind!r}")
    max_tokens = int(cfg.pop("max_tokens", 8192))
    rcfg = _take(RouterTrainConfig, cfg, "stage routers")
    reports = {}
    for i, site in enumerate(sorted(model.partitions)):
        partition = model.partitions[site]
        if kind == "regression":
            data = collect_router_dataset(model, site, dataset,
                                          slice_ffn(site_ffn_weights(model, site), partition),
                                          max_tokens=max_tokens)
            router, report = train_router(rcfg, data, seed=seed + STAGE_SEED["routers"] + i)
        else:
            data, zero_rows = collect_moefication_dataset(model, site, dataset, partition,
                                                          max_tokens=max_tokens)
            router, report = train_moefication_router(rcfg, data,
                                                      seed=seed + STAGE_SEED["routers"] + i)
            report["zero_label_rows"] = zero_rows
        attach_router(model, site, router)
        report["dataset_tokens"] = int(data.inputs.shape[0])
        reports[site] = report
    return model, {"kind": kind, "sites": reports, "router_steps": rcfg.steps,
                   "dataset_tokens": {s: r["dataset_tokens"] for s, r in reports.items()},
                   "tokens_consumed": sum(r["dataset_tokens"] for r in reports.values())}


def _stage_convert(model, dataset, cfg, seed, spec):
    cfg = dict(cfg)
    sites = cfg.pop("sites", None)
    if cfg:
        raise ValidationError(f"stage convert: unknown keys {sorted(cfg)}")
    sites = sorted(model.partitions) if sites is None else resolve_sites(sites, model.config)
    convert_model(model, sites)
    return model, {"sites": sites}


_STAGE_FN = {"train": _stage_train, "sparsify": _stage_sparsify, "relufy": _stage_relufy,
             "replace_mha": _stage_replace_mha, "cluster": _stage_cluster,
             "routers": _stage_routers, "convert": _stage_convert}


@dataclass
class PipelineResult:
    run_dir: Path
    logs: dict
    model: object
    dataset: object


def run_pipeline(spec: ExperimentSpec, seed: int, *, upto: str | None = None,
                 resume: bool = True, init_from=None, subdir: str | None = None,
                 stages_override: dict | None = None) -> PipelineResult:
    """Execute the spec's stages in canonical order for one seed.

    Every stage writes {stage}.ckpt and {stage}.json; with resume=True an
    existing checkpoint is loaded instead of recomputed, so a failed or
    partial run continues from its last completed stage.  init_from seeds
    the pipeline with an existing checkpoint, and stages_override swaps in
    a different stage dict entirely (used by the method comparison, which
    derives per-method stages from one spec).
    """
    if upto is not None and upto not in STAGE_ORDER:
        raise ValidationError(f"unknown stage {upto!r}; order is {STAGE_ORDER}")
    stages = spec.stages if stages_override is None else stages_override
    run_dir = spec.out_dir / f"seed{seed}"
    if subdir:
        run_dir = run_dir / subdir
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = ensure_dataset(spec)

    model = load_checkpoint(init_from) if init_from is not None else None
    logs = {}
    for stage in STAGE_ORDER:
        if stage not in stages:
            continue
        ckpt, logf = run_dir / f"{stage}.ckpt", run_dir / f"{stage}.json"
        if resume and ckpt.exists() and logf.exists():
            model = load_checkpoint(ckpt)
            with open(logf) as f:
                logs[stage] = json.load(f)["log"]
        else:
            if model is None and stage != "train":
                raise InputError(f"stage {stage!r} needs a model; run the train stage "
                                 "or pass init_from")
            model, log = _STAGE_FN[stage](model, dataset, stages[stage], seed, spec)
            logs[stage] = log
            save_checkpoint(model, ckpt)
            with open(logf, "w") as f:
                f.write(canonical_json({"stage": stage, "seed": seed, "log": log,
                                        "spec_hash": spec.hash()}))
        if stage == upto:
            break
    if upto is not None and upto not in logs:
        raise ValidationError(f"stage {upto!r} is not part of this spec")
    return PipelineResult(run_dir=run_dir, logs=logs, model=model, dataset=dataset)


# === sweeps ===


def grid_policies(sweep: dict, kinds=("dynamic_k", "top_k")) -> list[GatePolicy]:
    policies = []
    if "dynamic_k" in kinds:
        policies += [GatePolicy(kind="dynamic_k", tau=float(t)) for t in sweep.get("taus", [])]
    if "top_k" in kinds:
        policies += [GatePolicy(kind="top_k", k=int(k)) for k in sweep.get("ks", [])]
    if not policies:
        raise ValidationError("empty policy grid")
    return policies


def run_sweep(model, policies: list[GatePolicy], dataset, *, split: str = "val",
              max_sequences: int | None = None, meta: dict | None = None) -> list[CostRow]:
    """Evaluate one converted checkpoint across the whole policy grid.

    Each point only flips the shared gate policy; nothing is retrained and
    nothing new is written to disk.  metric is mean CE per token; classifier
    accuracy rides along in the meta columns.
    """
    moe_sites = sorted(s for s, f in model.forms.items() if f == "moe")
    if not moe_sites:
        raise InputError("run_sweep needs a converted model with moe sites")
    seq_len = dataset.seq_len
    dense = dense_model_flops(model.config, seq_len)
    rows = []
    for policy in policies:
        set_gate_policy(model, policy)
        trace = ExecutionTrace()
        ev = evaluate(model, dataset, split=split, max_sequences=max_sequences,
                      exec_trace=trace)
        nominal = {s: float(policy.k) for s in moe_sites} if policy.kind == "top_k" else None
        analytic, measured, site_break = model_flops(model, trace, seq_len, nominal_k=nominal)
        mean_frac = float(np.mean([trace.mean_selected(s) / model.partitions[s].n_experts
                                   for s in moe_sites]))
        row_meta = dict(meta or {})
        row_meta.update({
            "policy_kind": policy.kind,
            "tau": repr(policy.tau) if policy.kind == "dynamic_k" else "",
            "k": policy.k if policy.kind == "top_k" else "",
            "flops_fraction": repr(analytic / dense),
            "mean_expert_fraction": repr(mean_frac),
            "sequences": ev["sequences"],
        })
        if "accuracy" in ev:
            row_meta["accuracy"] = repr(ev["accuracy"])
        rows.append(CostRow(policy=policy.label(), analytic_flops=analytic,
                            measured_flops=measured, metric=ev["ce"],
                            site_flops=site_break, meta=row_meta))
    return rows


def sweep_pipeline(spec: ExperimentSpec, seed: int, *, subdir: str | None = None,
                   kinds=("dynamic_k", "top_k"), meta: dict | None = None,
                   csv_name: str = "sweep.csv") -> list[CostRow]:
    """run_pipeline through convert, then sweep the spec's policy grid."""
    result = run_pipeline(spec, seed, subdir=subdir)
    if any(f == "moe" for f in result.model.forms.values()):
        assemble_all(result.model)
    else:
        raise ValidationError("spec has no convert stage; nothing to sweep")
    base_meta = {"seed": seed, "spec_hash": spec.hash(), "build_id": build_id(spec.raw),
                 "dataset_hash": result.dataset.content_hash[:12]}
    base_meta.update(meta or {})
    rows = run_sweep(result.model, grid_policies(spec.sweep, kinds), result.dataset,
                     split=spec.sweep.get("split", "val"),
                     max_sequences=spec.sweep.get("eval_sequences"), meta=base_meta)
    write_cost_csv(rows, result.run_dir / csv_name)
    return rows


def metric_at_flops(rows: list[CostRow], flops: float) -> float:
    """Linear interpolation of metric on the analytic-FLOPs axis, used for
    matched-compute comparisons between methods whose grids never align."""
    pts = sorted({(r.analytic_flops, r.metric) for r in rows})
    xs = np.asarray([p[0] for p in pts], dtype=np.float64)
    ys = np.asarray([p[1] for p in pts], dtype=np.float64)
    if xs.size < 2 or not xs[0] <= flops <= xs[-1]:
        raise InputError(f"flops budget {flops:.4g} outside swept range "
                         f"[{xs[0]:.4g}, {xs[-1]:.4g}]")
    return float(np.interp(flops, xs, ys))


def metric_at_fraction(rows: list[CostRow], key: str, x: float) -> float:
    """Interpolate metric against a meta fraction column (flops_fraction or
    mean_expert_fraction)."""
    pts = sorted({(float(r.meta[key]), r.metric) for r in rows})
    xs = np.asarray([p[0] for p in pts], dtype=np.float64)
    ys = np.asarray([p[1] for p in pts], dtype=np.float64)
    if xs.size < 2 or not xs[0] <= x <= xs[-1]:
        raise InputError(f"{key}={x:.4g} outside swept range [{xs[0]:.4g}, {xs[-1]:.4g}]")
    return float(np.interp(x, xs, ys))


# === method comparison ===


def _method_stages(spec: ExperimentSpec, method: str) -> dict:
    """Derive a method's stage dict from the spec with matched budgets."""
    stages = spec.stages
    if "sparsify" not in stages or "cluster" not in stages or "routers" not in stages:
        raise ValidationError("compare needs sparsify, cluster and routers stages in the spec")
    sparsify = dict(stages["sparsify"])
    routers = dict(stages["routers"])
    derived = {"cluster": dict(stages["cluster"]), "convert": dict(stages.get("convert", {}))}
    if method == "d2dmoe":
        derived["sparsify"] = sparsify
        derived["routers"] = {**routers, "kind": "regression"}
    elif method == "d2dmoe_nosparse":
        derived["sparsify"] = {**sparsify, "alpha": 0.0}
        derived["routers"] = {**routers, "kind": "regression"}
    elif method == "moefication":
        # identical adaptation budget, spent on relufication recovery
        relufy_cfg = {k: v for k, v in sparsify.items()
                      if k not in ("alpha", "ramp", "displacement")}
        derived["relufy"] = relufy_cfg
        derived["routers"] = {**routers, "kind": "classifier"}
    else:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    return derived


_METHOD_KINDS = {"d2dmoe": ("dynamic_k", "top_k"),
                 "d2dmoe_nosparse": ("dynamic_k", "top_k"),
                 "moefication": ("top_k",)}


def _adaptation_tokens(logs: dict) -> int:
    stage = "relufy" if "relufy" in logs else "sparsify"
    return int(logs[stage]["tokens_consumed"])


def compare_methods(spec: ExperimentSpec, seed: int) -> list[CostRow]:
    """Run every compare.methods entry from one shared base checkpoint.

    Asserts budget parity between methods from the written logs: identical
    adaptation token counts and identical router data/step budgets.  Emits
    the combined rows to compare.csv in the seed directory.
    """
    methods = spec.compare.get("methods", ["d2dmoe", "moefication"])
    if len(methods) < 2:
        raise ValidationError(f"compare needs >= 2 methods, got {methods}")
    if "train" not in spec.stages:
        raise ValidationError("compare needs a train stage for the shared base checkpoint")
    base = run_pipeline(spec, seed, upto="train")
    base_ckpt = base.run_dir / "train.ckpt"

    all_rows, budgets = [], {}
    for method in methods:
        stages = _method_stages(spec, method)
        result = run_pipeline(spec, seed, subdir=method, init_from=base_ckpt,
                              stages_override=stages)
        logs = result.logs
        budgets[method] = {
            "adaptation_tokens": _adaptation_tokens(logs),
            "router_tokens": sum(logs["routers"]["dataset_tokens"].values()),
            "router_steps": logs["routers"]["router_steps"],
        }
        assemble_all(result.model)
        meta = {"seed": seed, "method": method, "spec_hash": spec.hash(),
                "build_id": build_id(spec.raw),
                "dataset_hash": result.dataset.content_hash[:12]}
        rows = run_sweep(result.model, grid_policies(spec.sweep, _METHOD_KINDS[method]),
                         result.dataset, split=spec.sweep.get("split", "val"),
                         max_sequences=spec.sweep.get("eval_sequences"), meta=meta)
        write_cost_csv(rows, result.run_dir / "sweep.csv")
        all_rows.extend(rows)

    reference = budgets[methods[0]]
    for method in methods[1:]:
        if budgets[method] != reference:
            raise ValidationError(f"training budget mismatch: {methods[0]}={reference} "
                                  f"vs {method}={budgets[method]}")
    write_cost_csv(all_rows, spec.out_dir / f"seed{seed}" / "compare.csv")
    return all_rows


def run_granularity(spec: ExperimentSpec, seed: int) -> list[CostRow]:
    """Sweep expert size with everything else held fixed (router width
    included), one subdirectory per size."""
    sizes = [int(s) for s in spec.granularity.get("expert_sizes", [])]
    if not sizes:
        raise ValidationError("granularity.expert_sizes is empty")
    hidden = spec.model.hidden_dim
    prefix_stage = "sparsify" if "sparsify" in spec.stages else "train"
    prefix = run_pipeline(spec, seed, upto=prefix_stage)
    ckpt = prefix.run_dir / f"{prefix_stage}.ckpt"

    all_rows = []
    for size in sizes:
        stages = {"cluster": {**spec.stages.get("cluster", {}), "n_experts": hidden // size},
                  "routers": dict(spec.stages.get("routers", {"steps": 800})),
                  "convert": {}}
        result = run_pipeline(spec, seed, subdir=f"size{size}", init_from=ckpt,
                              stages_override=stages)
        assemble_all(result.model)
        n_experts = hidden // size
        meta = {"seed": seed, "expert_size": size, "n_experts": n_experts,
                "spec_hash": spec.hash(), "build_id": build_id(spec.raw),
                "dataset_hash": result.dataset.content_hash[:12]}
        # a fixed top-k grid cannot carry across sizes: k is capped by the
        # expert count, so clamp the grid per size
        sweep = dict(spec.sweep)
        sweep["ks"] = [k for k in sweep.get("ks", []) if int(k) <= n_experts]
        rows = run_sweep(result.model, grid_policies(sweep), result.dataset,
                         split=spec.sweep.get("split", "val"),
                         max_sequences=spec.sweep.get("eval_sequences"), meta=meta)
        write_cost_csv(rows, result.run_dir / "sweep.csv")
        all_rows.extend(rows)
    write_cost_csv(all_rows, spec.out_dir / f"seed{seed}" / "granularity.csv")
    return all_rows
