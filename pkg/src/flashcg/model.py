"""Model core: configuration, radial basis, activation and MLP primitives.

Everything here is a pure function of its inputs and is generic over 32-bit
and 64-bit floats; gradient checks run in float64, production in float32.
Parameters are immutable after construction and safe to share across
replicas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LN2 = math.log(2.0)

# Desk-scale default hyperparameters, all overridable through ModelConfig.
DEFAULT_HIDDEN_DIM = 128
DEFAULT_RBF_DIM = 64
DEFAULT_NUM_BLOCKS = 3
DEFAULT_CUTOFF = 1.5  # nm
DEFAULT_NUM_ATOM_TYPES = 32
DEFAULT_FILTER_HIDDEN = 128
DEFAULT_READOUT_HIDDEN = 64


class ConfigError(ValueError):
    """Invalid model configuration or mismatched shapes."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    rbf_dim: int = DEFAULT_RBF_DIM
    num_blocks: int = DEFAULT_NUM_BLOCKS
    cutoff: float = DEFAULT_CUTOFF
    num_atom_types: int = DEFAULT_NUM_ATOM_TYPES
    filter_hidden_dim: int = DEFAULT_FILTER_HIDDEN
    readout_hidden_dim: int = DEFAULT_READOUT_HIDDEN

    def __post_init__(self):
        for name in ("hidden_dim", "rbf_dim", "num_blocks", "num_atom_types",
                     "filter_hidden_dim", "readout_hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.cutoff > 0):
            raise ConfigError(f"cutoff must be > 0, got {self.cutoff}")


@dataclass(frozen=True)
class RbfSpec:
    """Gaussian centers with shared width and a cosine cutoff envelope."""

    centers: np.ndarray  # strictly increasing, centers[0] = 0, centers[-1] = cutoff
    gamma: float         # inverse squared length, > 0
    cutoff: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise ConfigError("centers must be a 1-d array with at least one entry")
        if not (self.gamma > 0):
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if c.size >= 2:
            if np.any(np.diff(c) <= 0):
                raise ConfigError("centers must be strictly increasing")
            if c[0] != 0.0 or not np.isclose(c[-1], self.cutoff):
                raise ConfigError("centers must span [0, cutoff]")

    @property
    def dim(self) -> int:
        return int(self.centers.size)

    @classmethod
    def uniform(cls, rbf_dim: int, cutoff: float) -> "RbfSpec":
        """Centers uniformly spaced on [0, cutoff], width 1/(2*spacing^2)."""
        if rbf_dim >= 2:
            centers = np.linspace(0.0, cutoff, rbf_dim)
            spacing = cutoff / (rbf_dim - 1)
            gamma = 1.0 / (2.0 * spacing * spacing)
        else:
            # single-center fallback; the spanning invariant is vacuous here
            centers = np.zeros(1)
            gamma = 1.0 / (2.0 * cutoff * cutoff)
        return cls(centers=centers, gamma=gamma, cutoff=float(cutoff))

    @classmethod
    def for_config(cls, config: ModelConfig) -> "RbfSpec":
        return cls.uniform(config.rbf_dim, config.cutoff)


def shifted_softplus(x):
    """ln(0.5 * e^x + 0.5), evaluated overflow-safely; zero at the origin.

    max(x, 0) + log1p(e^-|x|) - ln 2 never overflows and saturates
    gracefully for large |x|.
    """
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))) - x.dtype.type(LN2)


def shifted_softplus_grad(x):
    """Derivative of the shifted softplus, the logistic sigmoid."""
    x = np.asarray(x)
    half = x.dtype.type(0.5)
    return half * (1.0 + np.tanh(half * x))


def cutoff_envelope(d, cutoff: float):
    """0.5*(cos(pi*d/cutoff)+1) below the cutoff, 0 at and beyond it."""
    d = np.asarray(d)
    inside = d < cutoff
    return np.where(inside, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0).astype(d.dtype, copy=False)


def cutoff_envelope_grad(d, cutoff: float):
    d = np.asarray(d)
    inside = d < cutoff
    return np.where(inside, -0.5 * np.pi / cutoff * np.sin(np.pi * d / cutoff), 0.0).astype(d.dtype, copy=False)


def rbf_expand(d, spec: RbfSpec):
    """Envelope-modulated Gaussian expansion, shape (..., dim).

    Each component is exp(-gamma*(d-mu_k)^2) * C(d); components lie in
    [0, 1] for any d >= 0 and vanish identically at and beyond the cutoff.
    """
    d = np.asarray(d)
    centers = spec.centers.astype(d.dtype, copy=False)
    delta = d[..., None] - centers
    gauss = np.exp(-d.dtype.type(spec.gamma) * delta * delta)
    return gauss * cutoff_envelope(d, spec.cutoff)[..., None]


def rbf_grad(d, spec: RbfSpec):
    """Derivative of rbf_expand with respect to d (product rule)."""
    d = np.asarray(d)
    centers = spec.centers.astype(d.dtype, copy=False)
    gamma = d.dtype.type(spec.gamma)
    delta = d[..., None] - centers
    gauss = np.exp(-gamma * delta * delta)
    env = cutoff_envelope(d, spec.cutoff)[..., None]
    denv = cutoff_envelope_grad(d, spec.cutoff)[..., None]
    return gauss * (-2.0 * gamma * delta * env + denv)


def rbf_expand_and_grad(d, spec: RbfSpec):
    """Basis and its d-derivative in one pass, sharing the Gaussian factor."""
    d = np.asarray(d)
    centers = spec.centers.astype(d.dtype, copy=False)
    gamma = d.dtype.type(spec.gamma)
    delta = d[..., None] - centers
    gauss = np.exp(-gamma * delta * delta)
    env = cutoff_envelope(d, spec.cutoff)[..., None]
    denv = cutoff_envelope_grad(d, spec.cutoff)[..., None]
    return gauss * env, gauss * (-2.0 * gamma * delta * env + denv)


# An MLP is a tuple of (weight, bias) pairs with weight shaped (out, in).
# The shifted softplus is applied after every layer except the last.
MlpLayers = tuple


def mlp_forward(layers: MlpLayers, x: np.ndarray):
    """Run the MLP, returning the output and the cache backward needs.

    The cache stores the original input plus each hidden pre-activation;
    no weight gradients are ever formed.
    """
    if x.shape[-1] != layers[0][0].shape[1]:
        raise ConfigError(
            f"mlp input width {x.shape[-1]} does not match first layer "
            f"width {layers[0][0].shape[1]}"
        )
    preacts = []
    a = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if i < last:
            preacts.append(z)
            a = shifted_softplus(z)
        else:
            a = z
    return a, (layers, x, preacts)


def mlp_backward_input(cache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of (grad_out . output) with respect to the MLP input."""
    layers, x, preacts = cache
    if grad_out.shape[-1] != layers[-1][0].shape[0]:
        raise ConfigError("grad_out width does not match the MLP output width")
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        g = g @ w
        if i > 0:
            g = g * shifted_softplus_grad(preacts[i - 1])
    return g


# Both backends accept either plain (weight, bias) layer tuples or quantized
# modules exposing forward / backward_input / apply / dequant; these shims
# dispatch on that.

def net_forward(net, x):
    if isinstance(net, tuple):
        return mlp_forward(net, x)
    return net.forward(x)


def net_backward_input(net, cache, grad_out):
    if isinstance(net, tuple):
        return mlp_backward_input(cache, grad_out)
    return net.backward_input(cache, grad_out)


def linear_apply(lin, x):
    if isinstance(lin, tuple):
        w, b = lin
        return x @ w.T + b
    return lin.apply(x)


def linear_input_matrix(lin):
    """Matrix M with grad_input = grad_output @ M for the linear layer."""
    if isinstance(lin, tuple):
        return lin[0]
    return lin.dequant()


@dataclass(frozen=True)
class BlockParams:
    pre_linear: tuple            # single (W, b), D -> D
    filter_mlp: MlpLayers        # D_r -> filter_hidden -> D
    post_mlp: MlpLayers          # D -> D -> D


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray        # num_atom_types x D
    blocks: tuple                # BlockParams per interaction block
    readout: MlpLayers           # D -> readout_hidden -> 1
    rbf: RbfSpec = field(default=None)

    def __post_init__(self):
        if self.rbf is None:
            object.__setattr__(self, "rbf", RbfSpec.for_config(self.config))

    @property
    def dtype(self):
        return self.embedding.dtype

    def astype(self, dtype) -> "ModelParams":
        cast_mlp = lambda layers: tuple((w.astype(dtype), b.astype(dtype)) for w, b in layers)
        blocks = tuple(
            BlockParams(
                pre_linear=(bp.pre_linear[0].astype(dtype), bp.pre_linear[1].astype(dtype)),
                filter_mlp=cast_mlp(bp.filter_mlp),
                post_mlp=cast_mlp(bp.post_mlp),
            )
            for bp in self.blocks
        )
        return ModelParams(
            config=self.config,
            embedding=self.embedding.astype(dtype),
            blocks=blocks,
            readout=cast_mlp(self.readout),
            rbf=self.rbf,
        )

    def named_tensors(self):
        """Deterministic (name, array) listing used by the container format."""
        out = [("embedding", self.embedding)]
        for t, bp in enumerate(self.blocks):
            out.append((f"block{t}.pre.W", bp.pre_linear[0]))
            out.append((f"block{t}.pre.b", bp.pre_linear[1]))
            for j, (w, b) in enumerate(bp.filter_mlp):
                out.append((f"block{t}.filter{j}.W", w))
                out.append((f"block{t}.filter{j}.b", b))
            for j, (w, b) in enumerate(bp.post_mlp):
                out.append((f"block{t}.post{j}.W", w))
                out.append((f"block{t}.post{j}.b", b))
        for j, (w, b) in enumerate(self.readout):
            out.append((f"readout{j}.W", w))
            out.append((f"readout{j}.b", b))
        return out


def _glorot(rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _linear(rng, fan_out, fan_in):
    return (_glorot(rng, fan_out, fan_in), np.zeros(fan_out))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Variance-scaled uniform init, bit-deterministic for a fixed seed.

    Weights are drawn in float64 then stored as float32, the container
    precision; use .astype(np.float64) for the 64-bit evaluation mode.
    """
    rng = np.random.default_rng(seed)
    d, dr = config.hidden_dim, config.rbf_dim
    fh, rh = config.filter_hidden_dim, config.readout_hidden_dim

    embedding = rng.uniform(-1.0, 1.0, size=(config.num_atom_types, d)) / math.sqrt(d)
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(BlockParams(
            pre_linear=_linear(rng, d, d),
            filter_mlp=(_linear(rng, fh, dr), _linear(rng, d, fh)),
            post_mlp=(_linear(rng, d, d), _linear(rng, d, d)),
        ))
    readout = (_linear(rng, rh, d), _linear(rng, 1, rh))

    params = ModelParams(
        config=config,
        embedding=embedding,
        blocks=tuple(blocks),
        readout=readout,
    )
    return params.astype(np.float32)
