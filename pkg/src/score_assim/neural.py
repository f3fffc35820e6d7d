"""Two-hidden-layer tanh network with hand-written gradients and Adam.

The network maps ``[z, tau]`` (state plus pseudo-time) to a vector of the
state's dimension. All parameters live in one flat float64 vector so the
optimizer, the checkpoint format and the compiled kernels share one layout:
``W1, b1, W2, b2, W3, b3`` with row-major ``(fan_in, fan_out)`` weights.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, TrainingError

CHECKPOINT_MAGIC = b"SFNN"
CHECKPOINT_VERSION = 1


def _layer_shapes(dims):
    n_in, h1, h2, n_out = dims
    return [(n_in, h1), (h1,), (h1, h2), (h2,), (h2, n_out), (n_out,)]


def _param_count(dims):
    return sum(int(np.prod(s)) for s in _layer_shapes(dims))


@dataclass
class NetParams:
    """Flat parameter vector plus the layer widths ``(in, H, H, out)``."""

    dims: tuple
    flat: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ConfigError(f"network dims must be 4 positive ints, got {self.dims}")
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (_param_count(self.dims),):
            raise ConfigError(
                f"flat vector has shape {self.flat.shape}, dims {self.dims} "
                f"need ({_param_count(self.dims)},)"
            )

    @classmethod
    def zeros(cls, state_dim, width):
        dims = (state_dim + 1, width, width, state_dim)
        return cls(dims, np.zeros(_param_count(dims)))

    @property
    def state_dim(self):
        return self.dims[3]

    @property
    def width(self):
        return self.dims[1]

    def layers(self):
        """Views ``[W1, b1, W2, b2, W3, b3]`` into the flat vector."""
        out, i = [], 0
        for shape in _layer_shapes(self.dims):
            n = int(np.prod(shape))
            out.append(self.flat[i:i + n].reshape(shape))
            i += n
        return out

    def copy(self):
        return NetParams(self.dims, self.flat.copy())

    def like(self, flat):
        return NetParams(self.dims, flat)


def init_params(state_dim, width, rng):
    """Glorot-uniform weights and zero biases for a ``d+1 -> H -> H -> d`` net."""
    params = NetParams.zeros(state_dim, width)
    for arr in params.layers()[0::2]:
        fan_in, fan_out = arr.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arr[...] = rng.uniform(-limit, limit, size=arr.shape)
    return params


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != params.dims[0]:
        raise ConfigError(f"input of shape {x.shape} does not fit network input dim {params.dims[0]}")
    return x2, single


def net_forward(params, x):
    """Evaluate the network on one input vector or a batch of rows."""
    x2, single = _as_batch(params, x)
    out = kernels.mlp_forward(params.flat, params.dims, x2)
    return out[0] if single else out


def net_param_grad(params, x, upstream):
    """Gradient of ``sum(upstream * net_forward(params, x))`` w.r.t. the parameters.

    ``x`` and ``upstream`` are either single vectors or batches with matching
    row counts; batch gradients are summed over rows. Returns a ``NetParams``
    holding the gradient.
    """
    x2, single = _as_batch(params, x)
    up = np.asarray(upstream, dtype=np.float64)
    up = up.reshape(1, -1) if single else up
    if up.shape != (x2.shape[0], params.dims[3]):
        raise ConfigError(f"upstream shape {up.shape} does not match output {(x2.shape[0], params.dims[3])}")
    _, a1, a2 = kernels.mlp_forward_cache(params.flat, params.dims, x2)
    return params.like(kernels.mlp_backward(params.flat, params.dims, x2, a1, a2, up))


def forward_backward(params, x, upstream_fn):
    """One fused pass: returns ``(output, grad)`` where the upstream is ``upstream_fn(output)``."""
    out, a1, a2 = kernels.mlp_forward_cache(params.flat, params.dims, x)
    up = upstream_fn(out)
    return out, kernels.mlp_backward(params.flat, params.dims, x, a1, a2, up)


@dataclass
class AdamState:
    """First/second moment accumulators for Adam over a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        n = params.flat.shape[0]
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def opt_step(params, grads, state):
    """Apply one Adam update in place and return ``(params, state)``."""
    g = grads.flat if isinstance(grads, NetParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ConfigError(f"gradient shape {g.shape} does not match parameters {params.flat.shape}")
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def save_checkpoint(params, path):
    """Write ``SFNN`` header, version, layer dims (all u32 LE) and f64 LE parameters."""
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(params.dims))
    header += struct.pack(f"<{len(params.dims)}I", *params.dims)
    path.write_bytes(header + params.flat.astype("<f8").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a network checkpoint (bad magic)")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{n_dims}I", data, 12)
    offset = 12 + 4 * n_dims
    flat = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
    return NetParams(dims, flat)
