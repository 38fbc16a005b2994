"""Neural building blocks over :mod:`sdtc.tensor`.

Layers hold only parameter *names* and static configuration; the tensors live
in a :class:`ParamStore`. Applying a layer is a pure function of
``(input, store)``, so the same layer objects can run against a float64 copy
of the store for gradient checks.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DimensionError, Tensor

LN_EPS = 1e-5


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    @classmethod
    def view(cls, tensors: dict[str, Tensor], dtype=np.float64) -> ParamStore:
        """A store over existing tensors (no copies), e.g. for finite-difference probes."""
        out = cls(dtype=dtype)
        out._params = dict(tensors)
        return out

    def add(self, name: str, value) -> str:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        self._params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def names(self) -> list[str]:
        return sorted(self._params)

    def tensors(self) -> list[Tensor]:
        return [self._params[k] for k in sorted(self._params)]

    def set(self, name: str, value: np.ndarray) -> None:
        old = self._params[name]
        if value.shape != old.shape:
            raise DimensionError(f"{name}: expected shape {old.shape}, got {value.shape}")
        self._params[name] = Tensor(np.asarray(value, dtype=old.dtype), requires_grad=True)

    def astype(self, dtype) -> ParamStore:
        out = ParamStore(dtype=dtype)
        for k, v in self.items():
            out.add(k, v.data.astype(dtype))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self._params.values())

    # -- initialisers -------------------------------------------------------
    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name, shape, std=0.02):
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))


# ---------------------------------------------------------------------------
# functional ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis; ``w`` is ``(C_in, C_out)``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects last extent {w.shape[0]}, got input {x.shape}")
    y = tn.matmul(x, w) if x.ndim >= 2 else tn.matmul(x.reshape(1, -1), w).reshape(w.shape[1])
    return y if b is None else y + b


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return tn.conv2d(x, w, b)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel map on ``(..., C_in, N)`` with ``w`` of shape ``(C_out, C_in)``."""
    y = tn.matmul(w, x)
    return y if b is None else y + b.reshape(-1, 1)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs at least 2 channels")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc * tn.power(var + LN_EPS, -0.5)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def spatial_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel normalisation over positions of ``(..., C, N)`` with learned affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc * tn.power(var + LN_EPS, -0.5)
    return y * gamma.reshape(-1, 1) + beta.reshape(-1, 1)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the second-to-last axis. Returns (out, weights)."""
    weights = tn.softmax(tn.matmul(q, k.T) * scale, axis=-1)
    return tn.matmul(weights, v), weights


def mhsa(x: Tensor, p: dict[str, Tensor], heads: int, return_weights: bool = False):
    """Multi-head self-attention over the token axis of ``(..., N, C)``.

    ``p`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors.
    """
    c = x.shape[-1]
    if c % heads:
        raise ContractError(f"channels {c} not divisible by {heads} heads")
    d = c // heads
    lead, n = x.shape[:-2], x.shape[-2]

    def split(t):
        return t.reshape(*lead, n, heads, d).transpose(
            *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2
        )

    q = split(linear(x, p["wq"], p["bq"]))
    k = split(linear(x, p["wk"], p["bk"]))
    v = split(linear(x, p["wv"], p["bv"]))
    out, weights = attention(q, k, v, 1.0 / math.sqrt(d))
    out = out.transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)
    out = linear(out.reshape(*lead, n, c), p["wo"], p["bo"])
    return (out, weights) if return_weights else out


def ffn(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return linear(tn.gelu(linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def sincos_1d(positions: np.ndarray, channels: int) -> np.ndarray:
    if channels % 2:
        raise ContractError(f"sin-cos encoding needs an even channel count, got {channels}")
    half = channels // 2
    freqs = 1.0 / 10000 ** (np.arange(half) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_spatial(grid: tuple[int, int], channels: int, factorized: bool = True) -> np.ndarray:
    """Fixed ``L x C`` table for a row-major ``grid`` of patches.

    Factorised: first ``C/2`` channels encode the patch row, the rest the column,
    each as ``[sin(pos * f_i), cos(pos * f_i)]`` over a base-10000 frequency ladder.
    """
    if channels % 2:
        raise ContractError(f"sin-cos encoding needs an even channel count, got {channels}")
    gh, gw = grid
    if not factorized:
        return sincos_1d(np.arange(gh * gw), channels)
    if channels % 4:
        raise ContractError(f"factorised 2D encoding needs C divisible by 4, got {channels}")
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return np.concatenate(
        [sincos_1d(rows, channels // 2), sincos_1d(cols, channels // 2)], axis=1
    )


def add_positional(tokens: Tensor, spatial: Tensor | None, temporal: Tensor | None) -> Tensor:
    """``tokens[..., t, l, :] + spatial[l] + temporal[t]``; either table may be ``None``."""
    t = tokens.shape[-3]
    out = tokens
    if spatial is not None:
        out = out + spatial
    if temporal is not None:
        if t > temporal.shape[0]:
            raise ContractError(f"sequence length {t} exceeds temporal table size {temporal.shape[0]}")
        table = temporal if temporal.shape[0] == t else temporal[:t]
        out = out + table.reshape(t, 1, -1)
    return out


def patchify(frames: Tensor, patch: int) -> Tensor:
    """``(..., 3, H, W)`` -> ``(..., L, 3*p*p)`` non-overlapping row-major patches."""
    *lead, ch, h, w = frames.shape
    if h % patch or w % patch:
        raise ContractError(f"patch size {patch} must divide frame size {h}x{w}")
    gh, gw = h // patch, w // patch
    nl = len(lead)
    x = frames.reshape(*lead, ch, gh, patch, gw, patch)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, gh * gw, ch * patch * patch)


def patch_embed(frames: Tensor, w: Tensor, b: Tensor, patch: int) -> Tensor:
    return linear(patchify(frames, patch), w, b)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1D interpolation matrix with half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize ``(..., H, W)`` to ``size`` with separable bilinear interpolation."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    uh = Tensor(bilinear_matrix(size[0], h), dtype=x.dtype)
    uw = Tensor(bilinear_matrix(size[1], w).T, dtype=x.dtype)
    return tn.matmul(tn.matmul(uh, x), uw)


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, ps: ParamStore, name: str, c_in: int, c_out: int, bias: bool = True):
        self.w = ps.uniform(f"{name}.w", (c_in, c_out), c_in)
        self.b = ps.zeros(f"{name}.b", (c_out,)) if bias else None

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return linear(x, ps[self.w], ps[self.b] if self.b else None)


class Conv:
    """``k x k`` same-size convolution on ``(..., C, H, W)``."""

    def __init__(self, ps: ParamStore, name: str, c_in: int, c_out: int, k: int = 3):
        if k % 2 == 0:
            raise ContractError(f"conv kernel size must be odd, got {k}")
        self.w = ps.uniform(f"{name}.w", (c_out, c_in, k, k), c_in * k * k)
        self.b = ps.zeros(f"{name}.b", (c_out,))

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return tn.conv2d(x, ps[self.w], ps[self.b])


class Conv1x1:
    """Pointwise channel map on ``(..., C, N)``."""

    def __init__(self, ps: ParamStore, name: str, c_in: int, c_out: int):
        self.w = ps.uniform(f"{name}.w", (c_out, c_in), c_in)
        self.b = ps.zeros(f"{name}.b", (c_out,))

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return conv1x1(x, ps[self.w], ps[self.b])


class LayerNorm:
    def __init__(self, ps: ParamStore, name: str, c: int):
        self.g = ps.ones(f"{name}.g", (c,))
        self.b = ps.zeros(f"{name}.b", (c,))

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return layer_norm(x, ps[self.g], ps[self.b])


class SpatialNorm:
    def __init__(self, ps: ParamStore, name: str, c: int):
        self.g = ps.ones(f"{name}.g", (c,))
        self.b = ps.zeros(f"{name}.b", (c,))

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return spatial_norm(x, ps[self.g], ps[self.b])


class MHSA:
    def __init__(self, ps: ParamStore, name: str, c: int, heads: int):
        if c % heads:
            raise ContractError(f"channels {c} not divisible by {heads} heads")
        self.heads = heads
        self.names = {}
        for proj in ("q", "k", "v", "o"):
            self.names[f"w{proj}"] = ps.uniform(f"{name}.w{proj}", (c, c), c)
            self.names[f"b{proj}"] = ps.zeros(f"{name}.b{proj}", (c,))

    def params(self, ps: ParamStore) -> dict[str, Tensor]:
        return {k: ps[v] for k, v in self.names.items()}

    def __call__(self, x: Tensor, ps: ParamStore, return_weights: bool = False):
        return mhsa(x, self.params(ps), self.heads, return_weights)


class FFN:
    def __init__(self, ps: ParamStore, name: str, c: int, expansion: int = 4):
        hidden = c * expansion
        self.names = {
            "w1": ps.uniform(f"{name}.w1", (c, hidden), c),
            "b1": ps.zeros(f"{name}.b1", (hidden,)),
            "w2": ps.uniform(f"{name}.w2", (hidden, c), hidden),
            "b2": ps.zeros(f"{name}.b2", (c,)),
        }

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        return ffn(x, {k: ps[v] for k, v in self.names.items()})


class TransformerBlock:
    """Pre-norm block: ``x + attn(norm(x))`` then ``x + ffn(norm(x))``."""

    def __init__(self, ps: ParamStore, name: str, c: int, heads: int, expansion: int = 4):
        self.norm1 = LayerNorm(ps, f"{name}.norm1", c)
        self.attn = MHSA(ps, f"{name}.attn", c, heads)
        self.norm2 = LayerNorm(ps, f"{name}.norm2", c)
        self.ffn = FFN(ps, f"{name}.ffn", c, expansion)

    def __call__(self, x: Tensor, ps: ParamStore) -> Tensor:
        x = x + self.attn(self.norm1(x, ps), ps)
        return x + self.ffn(self.norm2(x, ps), ps)


class PatchEmbed:
    def __init__(self, ps: ParamStore, name: str, patch: int, c: int, in_ch: int = 3):
        self.patch = patch
        self.proj = Linear(ps, f"{name}.proj", in_ch * patch * patch, c)

    def __call__(self, frames: Tensor, ps: ParamStore) -> Tensor:
        return self.proj(patchify(frames, self.patch), ps)


class PositionalEncodings:
    """Fixed sin-cos spatial table plus a learnable temporal table, each toggleable."""

    def __init__(self, ps: ParamStore, name: str, grid: tuple[int, int], c: int, t_max: int,
                 use_spatial: bool = True, use_temporal: bool = True, factorized: bool = True):
        self.spatial = sincos_spatial(grid, c, factorized)
        self.use_spatial = use_spatial
        self.use_temporal = use_temporal
        self.temporal = ps.normal(f"{name}.temporal", (t_max, c)) if use_temporal else None

    def __call__(self, tokens: Tensor, ps: ParamStore) -> Tensor:
        spatial = Tensor(self.spatial, dtype=tokens.dtype) if self.use_spatial else None
        temporal = ps[self.temporal] if self.use_temporal else None
        return add_positional(tokens, spatial, temporal)
