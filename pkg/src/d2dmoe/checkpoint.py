"""Single-file checkpoint format.

Layout: magic "D2DMOE\\x00\\x01", u64-LE header length, UTF-8 JSON header,
then raw little-endian float32 tensor blobs.  The header records the model
config, per-site module forms (with expert partitions for split sites), and
a tensor table of {dtype, shape, offset, byte_len} entries with offsets
relative to the data section.  The header is space-padded so the data
section starts 64-byte aligned, and every tensor offset is 64-byte aligned.

Loading is fail-closed: any inconsistency raises FormatError before any
model object is constructed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError
from .models import DenseModel, TransformerConfig, site_names

MAGIC = b"D2DMOE\x00\x01"
ALIGN = 64
_HEADER_LEN_FMT = "<Q"
_MAX_HEADER = 1 << 26  # 64 MiB of JSON is already absurd for desk scale


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _partition_to_json(partition) -> dict:
    return {
        "layer": int(partition.layer),
        "n_experts": int(partition.n_experts),
        "expert_size": int(partition.expert_size),
        "assignment": [int(a) for a in partition.assignment],
    }


def save_checkpoint(model: DenseModel, path) -> None:
    path = Path(path)
    tensors = {}
    offset = 0
    names = sorted(model.params)
    for name in names:
        data = model.params[name].data
        if data.dtype != np.float32:
            raise FormatError(f"checkpoint stores float32 only; {name!r} is {data.dtype}")
        byte_len = data.size * 4
        tensors[name] = {
            "dtype": "f32",
            "shape": list(data.shape),
            "offset": offset,
            "byte_len": byte_len,
        }
        offset = _align(offset + byte_len)

    module_form = {}
    for site, form in sorted(model.forms.items()):
        entry = {"form": form}
        if site in model.partitions:
            entry["partition"] = _partition_to_json(model.partitions[site])
        if site in model.router_outputs:
            entry["router_output"] = model.router_outputs[site]
        module_form[site] = entry

    header = {
        "config": model.config.to_dict(),
        "module_form": module_form,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = len(MAGIC) + struct.calcsize(_HEADER_LEN_FMT)
    padded = _align(prefix + len(blob)) - prefix
    blob = blob + b" " * (padded - len(blob))

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(_HEADER_LEN_FMT, len(blob)))
        f.write(blob)
        pos = 0
        for name in names:
            info = tensors[name]
            if info["offset"] > pos:
                f.write(b"\x00" * (info["offset"] - pos))
                pos = info["offset"]
            raw = np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes()
            f.write(raw)
            pos += len(raw)


def _fail(path, msg: str):
    raise FormatError(f"{path}: {msg}")


def load_checkpoint(path) -> DenseModel:
    path = Path(path)
    raw = path.read_bytes()
    prefix = len(MAGIC) + struct.calcsize(_HEADER_LEN_FMT)
    if len(raw) < prefix:
        _fail(path, f"truncated at {len(raw)} bytes, need at least {prefix}")
    if raw[: len(MAGIC)] != MAGIC:
        _fail(path, f"bad magic at offset 0: {raw[:len(MAGIC)]!r}")
    (header_len,) = struct.unpack_from(_HEADER_LEN_FMT, raw, len(MAGIC))
    if header_len > _MAX_HEADER or prefix + header_len > len(raw):
        _fail(path, f"header length {header_len} at offset {len(MAGIC)} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        _fail(path, f"unparseable header at offset {prefix}: {e}")
    for key in ("config", "module_form", "tensors"):
        if key not in header:
            _fail(path, f"header missing {key!r}")

    data_start = prefix + header_len
    if data_start % ALIGN:
        _fail(path, f"data section at offset {data_start} is not {ALIGN}-byte aligned")
    data_len = len(raw) - data_start

    tensors = header["tensors"]
    end = 0
    for name in sorted(tensors):
        info = tensors[name]
        try:
            dtype, shape = info["dtype"], tuple(int(s) for s in info["shape"])
            offset, byte_len = int(info["offset"]), int(info["byte_len"])
        except (KeyError, TypeError, ValueError):
            _fail(path, f"malformed tensor entry for {name!r}")
        if dtype != "f32":
            _fail(path, f"tensor {name!r}: unsupported dtype {dtype!r}")
        want = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if byte_len != want:
            _fail(path, f"tensor {name!r}: byte_len {byte_len} does not match shape {shape}")
        if offset % ALIGN or offset < 0 or offset + byte_len > data_len:
            _fail(path, f"tensor {name!r}: range [{offset}, {offset + byte_len}) outside data section of {data_len} bytes")
        end = max(end, offset + byte_len)

    try:
        config = TransformerConfig.from_dict(header["config"])
    except Exception as e:
        _fail(path, f"bad config: {e}")
    bad = config.validate()
    if bad:
        _fail(path, "invalid config: " + "; ".join(bad))

    module_form = header["module_form"]
    expected_sites = set(site_names(config))
    if set(module_form) != expected_sites:
        _fail(path, f"module_form sites {sorted(module_form)} do not match config sites")

    params = {}
    for name in sorted(tensors):
        info = tensors[name]
        start = data_start + int(info["offset"])
        arr = np.frombuffer(raw, dtype="<f4", count=int(info["byte_len"]) // 4, offset=start)
        params[name] = ad.parameter(arr.reshape(tuple(info["shape"])).copy())

    from .clustering import ExpertPartition  # late import; clustering builds on models

    forms, partitions, router_outputs = {}, {}, {}
    for site, entry in module_form.items():
        form = entry.get("form")
        if form not in ("dense", "replaced-mha", "replaced-mha-mirrored", "moe"):
            _fail(path, f"site {site}: unknown form {form!r}")
        forms[site] = form
        ro = entry.get("router_output")
        if ro is not None:
            if ro not in ("abs", "sigmoid"):
                _fail(path, f"site {site}: unknown router output {ro!r}")
            router_outputs[site] = ro
        pj = entry.get("partition")
        if pj is not None:
            try:
                partitions[site] = ExpertPartition.from_assignment(
                    int(pj["layer"]), np.asarray(pj["assignment"], dtype=np.int64), int(pj["n_experts"])
                )
            except Exception as e:
                _fail(path, f"site {site}: bad partition: {e}")
            if partitions[site].expert_size != int(pj["expert_size"]):
                _fail(path, f"site {site}: expert_size {pj['expert_size']} inconsistent with assignment")
        if form == "moe" and pj is None:
            _fail(path, f"site {site}: moe form requires a partition")

    return DenseModel(config=config, params=params, forms=forms, partitions=partitions,
                      router_outputs=router_outputs)
