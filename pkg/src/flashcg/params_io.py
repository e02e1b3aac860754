"""FLCG binary container: parameters, quantized parameters, checkpoints.

Layout (all little-endian):
  magic "FLCG" | u32 version | u32 kind
  kind 0 (parameters): u32 x6 config ints | f64 cutoff
  kind 1 (checkpoint): u64 step | u64 seed | u32 replicas | u32 beads
  u32 tensor count, then per tensor:
    u16 name length | name utf-8
    u8 precision tag (0 fp32, 1 fp64, 2 fp16+scale) | u8 rank | u32 dims
    tag 2 only: f32 per-output-channel scales (dims[0] of them)
    row-major payload

Full-precision parameters are stored as fp32 and round-trip bit exactly;
quantized weight tensors carry their per-channel scales inline.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import BlockParams, ModelConfig, ModelParams, RbfSpec
from .quantize import QuantizedLinear, QuantizedMlp, QuantizedParams

MAGIC = b"FLCG"
VERSION = 1
KIND_PARAMS = 0
KIND_CHECKPOINT = 1

_TAG_F32, _TAG_F64, _TAG_F16S = 0, 1, 2
_TAG_DTYPE = {_TAG_F32: np.float32, _TAG_F64: np.float64, _TAG_F16S: np.float16}


class FileFormatError(ValueError):
    """Malformed container or tensor mismatch; message names the tensor."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(f"truncated file while reading {what}")
    return buf


def _write_tensor(f, name: str, arr: np.ndarray, scales: np.ndarray | None = None):
    raw = name.encode("utf-8")
    tag = _TAG_F16S if scales is not None else (
        _TAG_F64 if arr.dtype == np.float64 else _TAG_F32)
    if scales is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
        tag = _TAG_F32
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", tag, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    if scales is not None:
        f.write(np.ascontiguousarray(scales, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(arr, dtype="<f2").tobytes())
    else:
        f.write(np.ascontiguousarray(arr).astype(f"<f{arr.dtype.itemsize}").tobytes())


def _read_tensor(f):
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(f, 2, f"tensor header of {name}"))
    if tag not in _TAG_DTYPE:
        raise FileFormatError(f"unknown precision tag {tag} on tensor {name}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}"))
    scales = None
    if tag == _TAG_F16S:
        scales = np.frombuffer(
            _read_exact(f, 4 * dims[0], f"scales of {name}"), dtype="<f4").copy()
    dtype = _TAG_DTYPE[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, count * np.dtype(dtype).itemsize, f"payload of {name}")
    arr = np.frombuffer(payload, dtype=f"<f{np.dtype(dtype).itemsize}").copy().reshape(dims)
    return name, arr.astype(dtype, copy=False), scales


def _expected_shapes(config: ModelConfig) -> dict:
    d, dr = config.hidden_dim, config.rbf_dim
    fh, rh = config.filter_hidden_dim, config.readout_hidden_dim
    shapes = {"embedding": (config.num_atom_types, d)}
    for t in range(config.num_blocks):
        shapes[f"block{t}.pre.W"] = (d, d)
        shapes[f"block{t}.pre.b"] = (d,)
        shapes[f"block{t}.filter0.W"] = (fh, dr)
        shapes[f"block{t}.filter0.b"] = (fh,)
        shapes[f"block{t}.filter1.W"] = (d, fh)
        shapes[f"block{t}.filter1.b"] = (d,)
        for j in range(2):
            shapes[f"block{t}.post{j}.W"] = (d, d)
            shapes[f"block{t}.post{j}.b"] = (d,)
    shapes["readout0.W"] = (rh, d)
    shapes["readout0.b"] = (rh,)
    shapes["readout1.W"] = (1, rh)
    shapes["readout1.b"] = (1,)
    return shapes


def save_params(params, path) -> None:
    """Write full-precision or quantized parameters; fp32 container precision."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, KIND_PARAMS))
        f.write(struct.pack("<6I", cfg.hidden_dim, cfg.rbf_dim, cfg.num_blocks,
                            cfg.num_atom_types, cfg.filter_hidden_dim,
                            cfg.readout_hidden_dim))
        f.write(struct.pack("<d", cfg.cutoff))

        records = []
        if isinstance(params, QuantizedParams):
            records.append(("embedding", params.embedding.astype(np.float32), None))
            for t, bp in enumerate(params.blocks):
                records.append((f"block{t}.pre.W", bp.pre_linear.weight, bp.pre_linear.scale))
                records.append((f"block{t}.pre.b", bp.pre_linear.bias, None))
                for label, mlp in (("filter", bp.filter_mlp), ("post", bp.post_mlp)):
                    for j, lin in enumerate(mlp.layers):
                        records.append((f"block{t}.{label}{j}.W", lin.weight, lin.scale))
                        records.append((f"block{t}.{label}{j}.b", lin.bias, None))
            for j, lin in enumerate(params.readout.layers):
                records.append((f"readout{j}.W", lin.weight, lin.scale))
                records.append((f"readout{j}.b", lin.bias, None))
        else:
            for name, arr in params.astype(np.float32).named_tensors():
                records.append((name, arr, None))

        f.write(struct.pack("<I", len(records)))
        for name, arr, scales in records:
            _write_tensor(f, name, arr, scales)


def _check_header(f, path, expect_kind: int):
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FileFormatError(f"{path}: not an FLCG container")
    version, kind = struct.unpack("<II", _read_exact(f, 8, "version/kind"))
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported container version {version}")
    if kind != expect_kind:
        raise FileFormatError(f"{path}: container kind {kind}, expected {expect_kind}")


def load_params(path, dtype=np.float32):
    """Read a parameter container, full precision or quantized.

    Every expected tensor is checked against the embedded configuration; a
    mismatch raises FileFormatError naming the offending tensor.
    """
    with open(path, "rb") as f:
        _check_header(f, path, KIND_PARAMS)
        ints = struct.unpack("<6I", _read_exact(f, 24, "model configuration"))
        (cutoff,) = struct.unpack("<d", _read_exact(f, 8, "cutoff"))
        config = ModelConfig(hidden_dim=ints[0], rbf_dim=ints[1], num_blocks=ints[2],
                             cutoff=cutoff, num_atom_types=ints[3],
                             filter_hidden_dim=ints[4], readout_hidden_dim=ints[5])
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors, scales = {}, {}
        for _ in range(count):
            name, arr, sc = _read_tensor(f)
            tensors[name] = arr
            if sc is not None:
                scales[name] = sc

    expected = _expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise FileFormatError(f"missing tensor {name}")
        if tensors[name].shape != shape:
            raise FileFormatError(
                f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    quantized = any(n in scales for n in expected if n.endswith(".W"))

    def linear(prefix):
        w, b = tensors[f"{prefix}.W"], tensors[f"{prefix}.b"]
        if quantized:
            if f"{prefix}.W" not in scales:
                raise FileFormatError(f"tensor {prefix}.W lacks quantization scales")
            return QuantizedLinear(weight=w.astype(np.float16),
                                   scale=scales[f"{prefix}.W"],
                                   bias=b.astype(np.float32))
        return (w.astype(dtype), b.astype(dtype))

    blocks = []
    for t in range(config.num_blocks):
        filt = tuple(linear(f"block{t}.filter{j}") for j in range(2))
        post = tuple(linear(f"block{t}.post{j}") for j in range(2))
        if quantized:
            filt, post = QuantizedMlp(filt), QuantizedMlp(post)
        blocks.append(BlockParams(pre_linear=linear(f"block{t}.pre"),
                                  filter_mlp=filt, post_mlp=post))
    readout = tuple(linear(f"readout{j}") for j in range(2))

    if quantized:
        return QuantizedParams(config=config,
                               embedding=tensors["embedding"].astype(np.float32),
                               blocks=tuple(blocks), readout=QuantizedMlp(readout),
                               rbf=RbfSpec.for_config(config))
    return ModelParams(config=config, embedding=tensors["embedding"].astype(dtype),
                       blocks=tuple(blocks), readout=readout)


def save_checkpoint(path, positions, velocities, masses, step: int, seed: int) -> None:
    positions = np.asarray(positions)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, KIND_CHECKPOINT))
        f.write(struct.pack("<QQII", step, seed, positions.shape[0], positions.shape[1]))
        f.write(struct.pack("<I", 3))
        _write_tensor(f, "positions", positions)
        _write_tensor(f, "velocities", np.asarray(velocities))
        _write_tensor(f, "masses", np.asarray(masses))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        _check_header(f, path, KIND_CHECKPOINT)
        step, seed, n_rep, n_beads = struct.unpack(
            "<QQII", _read_exact(f, 24, "checkpoint header"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            name, arr, _ = _read_tensor(f)
            tensors[name] = arr
    for name in ("positions", "velocities", "masses"):
        if name not in tensors:
            raise FileFormatError(f"missing tensor {name}")
    if tensors["positions"].shape[:2] != (n_rep, n_beads):
        raise FileFormatError("tensor positions does not match the checkpoint header")
    return {"step": step, "seed": seed, **tensors}
