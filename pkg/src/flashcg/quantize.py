"""Channel-wise 16-bit quantization of every MLP submodule.

"16-bit" means IEEE half precision for stored weights and inter-layer
activations; dot products accumulate in full precision and the final
output of every module stays full precision, as do positions, distances,
energy accumulation and forces.

Each output channel gets its own scale, chosen by searching a geometric
grid around an absmax seed for the scale minimizing the reconstruction
error against a calibration set. The shared-tensor grid is always part of
every channel's search space, so per-channel error never exceeds the best
single-tensor-scale error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    BlockParams,
    ModelConfig,
    ModelParams,
    RbfSpec,
    mlp_forward,
    rbf_expand,
    shifted_softplus,
    shifted_softplus_grad,
)

SCALE_GRID_SIZE = 33
SCALE_GRID_SPAN = 8.0
MIN_CALIBRATION_SAMPLES = 32


@dataclass(frozen=True)
class CalibrationSet:
    """Representative inputs for one linear layer."""

    samples: np.ndarray  # count x in_features

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] < MIN_CALIBRATION_SAMPLES:
            raise ValueError(
                f"calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, "
                f"got shape {s.shape}")

    @property
    def count(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class QuantizedLinear:
    weight: np.ndarray  # float16, out x in, stored as original / scale
    scale: np.ndarray   # float32[out], strictly positive
    bias: np.ndarray    # float32[out]

    def __post_init__(self):
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0):
            raise ValueError("scales must be finite and strictly positive")

    def dequant(self) -> np.ndarray:
        return self.scale[:, None] * self.weight.astype(np.float32)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Half-precision input activation, full-precision accumulation."""
        x16 = x.astype(np.float16)
        return x16.astype(np.float32) @ self.dequant().T + self.bias


@dataclass(frozen=True)
class QuantizedMlp:
    layers: tuple  # QuantizedLinear per layer

    def forward(self, x: np.ndarray):
        preacts = []
        a = x
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            z = lin.apply(a)
            if i < last:
                preacts.append(z)
                a = shifted_softplus(z).astype(np.float16).astype(np.float32)
            else:
                a = z
        return a, (self, x, preacts)

    def backward_input(self, cache, grad_out: np.ndarray) -> np.ndarray:
        _, _, preacts = cache
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g = g @ self.layers[i].dequant()
            if i > 0:
                g = g * shifted_softplus_grad(preacts[i - 1])
        return g


def quantized_mlp_forward(qlayers, x: np.ndarray) -> np.ndarray:
    qmlp = qlayers if isinstance(qlayers, QuantizedMlp) else QuantizedMlp(tuple(qlayers))
    out, _ = qmlp.forward(x)
    return out


@dataclass(frozen=True)
class QuantizedParams:
    """ModelParams with every linear layer replaced by a QuantizedLinear.

    Embedding stays full precision; pipelines consume this through the same
    block/readout structure as full-precision parameters.
    """

    config: ModelConfig
    embedding: np.ndarray
    blocks: tuple
    readout: QuantizedMlp
    rbf: RbfSpec

    @property
    def dtype(self):
        return self.embedding.dtype


_BASE_GRID = np.geomspace(1.0 / SCALE_GRID_SPAN, SCALE_GRID_SPAN, SCALE_GRID_SIZE)


def _candidate_matrix(seeds: np.ndarray, tensor_grid: np.ndarray) -> np.ndarray:
    """Per-channel candidate scales, sorted ascending within each row.

    Every row contains the shared-tensor grid and 1.0 in addition to its
    own absmax-seeded grid; ascending order makes argmin tie-break toward
    the smaller scale.
    """
    k = seeds.size
    chan = seeds[:, None] * _BASE_GRID[None, :]
    shared = np.broadcast_to(np.concatenate([tensor_grid, [1.0]]),
                             (k, tensor_grid.size + 1))
    return np.sort(np.concatenate([chan, shared], axis=1), axis=1)


def _grid_errors(w: np.ndarray, cands: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """err[k, s] = dw' G dw with dw = s*half(w_k/s) - w_k.

    Candidates mapping any element outside the half-precision range are
    penalized with a huge finite error so they are never selected.
    """
    stored = (w[:, None, :] / cands[:, :, None]).astype(np.float16)
    dw = stored.astype(np.float64) * cands[:, :, None] - w[:, None, :]
    dw = np.where(np.isfinite(dw), dw, 1e30)
    flat = dw.reshape(-1, w.shape[1])
    return np.einsum("si,si->s", flat @ gram, flat).reshape(cands.shape)


def quantize_layer(weight: np.ndarray, bias: np.ndarray,
                   calib: CalibrationSet) -> QuantizedLinear:
    """Per-output-channel scale search on a geometric grid.

    A zero row degenerates to scale 1 with zero stored weights.
    """
    w = np.asarray(weight, dtype=np.float64)
    gram = calib.samples.astype(np.float64).T @ calib.samples.astype(np.float64)
    absmax = np.abs(w).max(axis=1)
    zero_rows = absmax == 0.0
    seeds = np.where(zero_rows, 1.0, absmax)
    tensor_seed = float(np.abs(w).max()) or 1.0
    tensor_grid = tensor_seed * _BASE_GRID

    cands = _candidate_matrix(seeds, tensor_grid)
    errs = _grid_errors(w, cands, gram)
    best = np.argmin(errs, axis=1)
    scales = cands[np.arange(w.shape[0]), best]
    scales[zero_rows] = 1.0
    stored = (w / scales[:, None]).astype(np.float16)
    stored[zero_rows] = 0.0
    return QuantizedLinear(weight=stored, scale=scales.astype(np.float32),
                           bias=np.asarray(bias, dtype=np.float32))


def quantize_layer_per_tensor(weight: np.ndarray, bias: np.ndarray,
                              calib: CalibrationSet) -> QuantizedLinear:
    """Best single shared scale over the same grid; the comparison baseline."""
    w = np.asarray(weight, dtype=np.float64)
    gram = calib.samples.astype(np.float64).T @ calib.samples.astype(np.float64)
    tensor_seed = float(np.abs(w).max()) or 1.0
    cands = np.sort(np.concatenate([tensor_seed * _BASE_GRID, [1.0]]))
    totals = np.empty(cands.size)
    for s_idx, s in enumerate(cands):
        stored = (w / s).astype(np.float16)
        dw = stored.astype(np.float64) * s - w
        dw = np.where(np.isfinite(dw), dw, 1e30)
        totals[s_idx] = float(np.einsum("ki,ki->", dw @ gram, dw))
    s = float(cands[int(np.argmin(totals))])
    return QuantizedLinear(weight=(w / s).astype(np.float16),
                           scale=np.full(w.shape[0], s, dtype=np.float32),
                           bias=np.asarray(bias, dtype=np.float32))


def calibration_error(qlin: QuantizedLinear, weight: np.ndarray,
                      calib: CalibrationSet) -> float:
    """Total squared output error of the quantized weights on the samples."""
    dw = qlin.dequant().astype(np.float64) - np.asarray(weight, dtype=np.float64)
    return float(np.sum((calib.samples.astype(np.float64) @ dw.T) ** 2))


def _quantize_mlp(layers, module_input: np.ndarray, errors: list | None = None,
                  names_prefix: str = "") -> QuantizedMlp:
    """Quantize an MLP layer by layer, propagating calibration activations."""
    a = module_input
    qlayers = []
    for i, (w, b) in enumerate(layers):
        calib = CalibrationSet(a)
        q = quantize_layer(w, b, calib)
        if errors is not None:
            errors.append((f"{names_prefix}{i}", calibration_error(q, w, calib)))
        z = a @ np.asarray(w, dtype=np.float64).T + b
        if i < len(layers) - 1:
            a = shifted_softplus(z)
        qlayers.append(q)
    return QuantizedMlp(tuple(qlayers))


def _collect_feature_calibration(params: ModelParams, seed: int, n_states: int = 4,
                                 n_beads: int = 48):
    """Node-feature samples from forward passes on random states.

    Returns per-block pre-linear inputs, per-block update-network inputs and
    readout inputs, each stacked over states.
    """
    from .neighbors import build_neighbors_bruteforce  # local to avoid cycles

    rng = np.random.default_rng(seed)
    cfg = params.config
    box = 0.6 * cfg.cutoff * max(1.0, n_beads ** (1.0 / 3.0))
    pre_in = [[] for _ in params.blocks]
    post_in = [[] for _ in params.blocks]
    readout_in = []
    p64 = params.astype(np.float64)
    for _ in range(n_states):
        positions = rng.uniform(0.0, box, size=(n_beads, 3))
        types = rng.integers(0, cfg.num_atom_types, size=n_beads)
        nl = build_neighbors_bruteforce(positions, cfg.cutoff)
        d = np.sqrt(np.einsum("ij,ij->i",
                              positions[nl.dst] - positions[nl.src],
                              positions[nl.dst] - positions[nl.src]))
        X = p64.embedding[types]
        for t, bp in enumerate(p64.blocks):
            pre_in[t].append(X)
            wpre, bpre = bp.pre_linear
            P = X @ wpre.T + bpre
            B = rbf_expand(d, p64.rbf)
            W, _ = mlp_forward(bp.filter_mlp, B)
            H = np.zeros_like(X)
            np.add.at(H, nl.dst, P[nl.src] * W)
            post_in[t].append(H)
            U, _ = mlp_forward(bp.post_mlp, H)
            X = X + U
        readout_in.append(X)
    stack = lambda parts: np.concatenate(parts, axis=0)
    return [stack(p) for p in pre_in], [stack(p) for p in post_in], stack(readout_in)


def quantize_model(params: ModelParams, seed: int = 0, n_rbf_samples: int = 256,
                   errors: list | None = None) -> QuantizedParams:
    """Replace every linear layer in filter, update and readout MLPs.

    Filter layers calibrate on basis expansions of uniformly random
    distances in (0, cutoff); update and readout layers calibrate on node
    features recorded from forward passes on random states. When given,
    ``errors`` is filled with (layer name, calibrated squared error) rows.
    """
    rng = np.random.default_rng(seed)
    cfg = params.config
    d_samples = rng.uniform(0.0, cfg.cutoff, size=n_rbf_samples)
    rbf_calib = rbf_expand(d_samples.astype(np.float64), params.rbf)
    pre_in, post_in, readout_in = _collect_feature_calibration(params, seed + 1)

    qblocks = []
    for t, bp in enumerate(params.blocks):
        pre_calib = CalibrationSet(pre_in[t])
        qpre = quantize_layer(bp.pre_linear[0], bp.pre_linear[1], pre_calib)
        if errors is not None:
            errors.append((f"block{t}.pre",
                           calibration_error(qpre, bp.pre_linear[0], pre_calib)))
        qfilter = _quantize_mlp(bp.filter_mlp, rbf_calib, errors,
                                names_prefix=f"block{t}.filter")
        qpost = _quantize_mlp(bp.post_mlp, post_in[t], errors,
                              names_prefix=f"block{t}.post")
        qblocks.append(BlockParams(pre_linear=qpre, filter_mlp=qfilter, post_mlp=qpost))

    qreadout = _quantize_mlp(params.readout, readout_in, errors, names_prefix="readout")
    return QuantizedParams(
        config=cfg,
        embedding=params.embedding.astype(np.float32),
        blocks=tuple(qblocks),
        readout=qreadout,
        rbf=params.rbf,
    )
