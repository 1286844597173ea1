from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import ConfigError, NumericalError, StructuralError, UsageError


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor: [z, time embedding, condition] -> hidden -> hidden -> D.

    Hidden units use SiLU, ``x * sigmoid(x)``. The condition block is
    multiplied by ``cond_scale`` before the first layer, which gives each
    concept's input row more leverage than the shared weights.
    """

    data_dim: int = 2
    time_dim: int = 16
    cond_dim: int = 17
    hidden: tuple = (256, 256)
    cond_scale: float = 4.0

    def __post_init__(self):
        if len(self.hidden) != 2:
            raise ConfigError("architecture needs exactly two hidden widths")
        if self.time_dim % 2:
            raise ConfigError(f"time embedding dim must be even, got {self.time_dim}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not (np.isfinite(self.cond_scale) and self.cond_scale > 0):
            raise ConfigError(f"cond_scale must be positive, got {self.cond_scale}")

    @property
    def n_in(self):
        return self.data_dim + self.time_dim + self.cond_dim

    def layout(self):
        """Offset map ``name -> (slice, shape)`` of the flat parameter vector."""
        h1, h2 = self.hidden
        shapes = [
            ("W1", (self.n_in, h1)), ("b1", (h1,)),
            ("W2", (h1, h2)), ("b2", (h2,)),
            ("W3", (h2, self.data_dim)), ("b3", (self.data_dim,)),
        ]
        out, o = {}, 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            out[name] = (slice(o, o + n), shape)
            o += n
        return out

    @property
    def n_params(self):
        return self.layout()["b3"][0].stop

    def to_dict(self):
        return {"data_dim": self.data_dim, "time_dim": self.time_dim,
                "cond_dim": self.cond_dim, "hidden": list(self.hidden),
                "cond_scale": float(self.cond_scale)}


def _frozen(values):
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DenoiserNet:
    arch: Architecture
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = _frozen(self.params)
        if p.ndim != 1 or p.shape[0] != self.arch.n_params:
            raise StructuralError(
                f"parameter vector has length {p.size}, architecture needs {self.arch.n_params}")
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite parameter at index {int(np.argmin(np.isfinite(p)))}")
        object.__setattr__(self, "params", p)

    def with_params(self, params):
        return DenoiserNet(self.arch, params)

    def unpack(self):
        return {k: self.params[s].reshape(shape) for k, (s, shape) in self.arch.layout().items()}


def init_params(arch, rng, out_scale=1e-2):
    """He-style init for hidden layers; small output layer so the initial
    prediction is close to a constant."""
    theta = np.zeros(arch.n_params)
    lay = arch.layout()
    for name, fan_in in (("W1", arch.n_in), ("W2", arch.hidden[0]), ("W3", arch.hidden[1])):
        s, shape = lay[name]
        scale = np.sqrt(2.0 / fan_in)
        if name == "W3":
            scale *= out_scale
        theta[s] = rng.normal(0.0, scale, size=int(np.prod(shape)))
    return theta


def time_embed(t, dim, max_period=10000.0):
    """Sinusoidal timestep embedding: ``[sin(t/w_k)..., cos(t/w_k)...]`` with
    ``w_k = max_period**(k/half)``. Accepts a scalar or an integer array."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"time embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


_TABLE_T = 4096


@lru_cache(maxsize=16)
def _embed_table(T, dim):
    tab = time_embed(np.arange(T + 1), dim)
    tab.setflags(write=False)
    return tab


def build_inputs(arch, z, t, cond):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    B = z.shape[0]
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(B, int(t))
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (B, cond.shape[0]))
    if z.shape[1] != arch.data_dim:
        raise StructuralError(f"z has dim {z.shape[1]}, expected {arch.data_dim}")
    if cond.shape != (B, arch.cond_dim):
        raise StructuralError(f"condition shape {cond.shape}, expected ({B}, {arch.cond_dim})")
    if t.shape != (B,):
        raise StructuralError(f"timestep shape {t.shape}, expected ({B},)")
    if np.issubdtype(t.dtype, np.integer) and (B == 0 or (t.min() >= 0 and t.max() <= _TABLE_T)):
        temb = _embed_table(_TABLE_T, arch.time_dim)[t]
    else:
        temb = time_embed(t, arch.time_dim)
    return np.concatenate([z, temb, arch.cond_scale * cond], axis=1)


def forward(net, z, t, cond):
    """Noise prediction for one input (D-vector) or a batch (B x D)."""
    from . import kernels

    single = np.ndim(z) == 1
    X = build_inputs(net.arch, z, t, cond)
    h1, h2 = net.arch.hidden
    y = kernels.mlp_forward(net.params, X, h1, h2, net.arch.data_dim)
    return y[0] if single else y


def loss_and_grad(net, z, t, cond, target):
    """Batch mean of ``||target - eps_theta(z, t, cond)||^2`` and its exact gradient."""
    from . import kernels

    X = build_inputs(net.arch, z, t, cond)
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if X.shape[0] == 0:
        raise UsageError("loss_and_grad needs a non-empty batch")
    if target.shape != (X.shape[0], net.arch.data_dim):
        raise StructuralError(f"target shape {target.shape} does not match batch")
    h1, h2 = net.arch.hidden
    loss, grad = kernels.mlp_mse_grad(net.params, X, target, h1, h2, net.arch.data_dim)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        bad = int(np.argmin(np.isfinite(grad))) if np.all(np.isfinite(loss)) else -1
        raise NumericalError(f"non-finite loss/gradient (first bad gradient index {bad})",
                             {"index": bad, "loss": loss})
    return loss, grad


def param_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
