"""Per-line building blocks: SFE, NAF block, upsampler, bilinear base.

Everything here is stateless: parameters in, features out. All forwards
accept either one line (W, channels) or a whole stack of lines
(H, W, channels); the line axis is always -2 and channels are last.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LN_EPS = 1e-6


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def attention_hidden(features, reduction):
    """Width of the channel-attention bottleneck (never below 1)."""
    return max(1, features // reduction)


@dataclass
class SfeParams:
    """Shallow feature extraction: conv3 C->F, layer norm, SiLU, channel attention."""

    conv_w: Tensor   # (F, C, 3)
    conv_b: Tensor   # (F,)
    ln_gamma: Tensor
    ln_beta: Tensor
    att_w1: Tensor   # (hidden, F) shared MLP, avg and max descriptors
    att_b1: Tensor
    att_w2: Tensor   # (F, hidden)
    att_b2: Tensor

    @classmethod
    def init(cls, bands, features, reduction, rng, dtype=np.float32):
        hidden = attention_hidden(features, reduction)
        return cls(
            conv_w=_uniform(rng, (features, bands, 3), bands * 3, dtype),
            conv_b=_zeros((features,), dtype),
            ln_gamma=_ones((features,), dtype),
            ln_beta=_zeros((features,), dtype),
            att_w1=_uniform(rng, (hidden, features), features, dtype),
            att_b1=_zeros((hidden,), dtype),
            att_w2=_uniform(rng, (features, hidden), hidden, dtype),
            att_b2=_zeros((features,), dtype),
        )

    @classmethod
    def zeros(cls, bands, features, reduction, dtype=np.float32):
        hidden = attention_hidden(features, reduction)
        return cls(
            conv_w=_zeros((features, bands, 3), dtype),
            conv_b=_zeros((features,), dtype),
            ln_gamma=_zeros((features,), dtype),
            ln_beta=_zeros((features,), dtype),
            att_w1=_zeros((hidden, features), dtype),
            att_b1=_zeros((hidden,), dtype),
            att_w2=_zeros((features, hidden), dtype),
            att_b2=_zeros((features,), dtype),
        )

    def named_tensors(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in
                ("conv_w", "conv_b", "ln_gamma", "ln_beta",
                 "att_w1", "att_b1", "att_w2", "att_b2")]


def _attention_mlp(pooled, p):
    return T.linear(T.relu(T.linear(pooled, p.att_w1, p.att_b1)), p.att_w2, p.att_b2)


def sfe_forward(x, p):
    """(.., W, C) spectral line -> (.., W, F) shallow features."""
    if x.shape[-1] != p.conv_w.shape[1]:
        raise ShapeError(
            f"sfe_forward: line has {x.shape[-1]} bands, params expect {p.conv_w.shape[1]}")
    h = T.conv1d(x, p.conv_w, p.conv_b)
    h = T.layer_norm(h, p.ln_gamma, p.ln_beta, eps=LN_EPS)
    h = T.silu(h)
    avg = T.reduce_mean(h, axis=-2, keepdims=True)
    mx = T.reduce_max(h, axis=-2, keepdims=True)
    att = T.sigmoid(T.add(_attention_mlp(avg, p), _attention_mlp(mx, p)))
    return T.mul(h, att)


@dataclass
class NafParams:
    """Two residual sub-blocks: gated separable-conv mixer, then a gated MLP."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    pw1_w: Tensor    # (2F, F)
    pw1_b: Tensor
    dw_w: Tensor     # (2F, 3) depthwise across-track
    dw_b: Tensor
    sca_w: Tensor    # (F, F) pointwise on the mean-pooled descriptor
    sca_b: Tensor
    pw2_w: Tensor    # (F, F)
    pw2_b: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn1_w: Tensor   # (2F, F)
    ffn1_b: Tensor
    ffn2_w: Tensor   # (F, F)
    ffn2_b: Tensor

    @classmethod
    def init(cls, features, rng, dtype=np.float32):
        f = features
        return cls(
            ln1_gamma=_ones((f,), dtype), ln1_beta=_zeros((f,), dtype),
            pw1_w=_uniform(rng, (2 * f, f), f, dtype), pw1_b=_zeros((2 * f,), dtype),
            dw_w=_uniform(rng, (2 * f, 3), 3, dtype), dw_b=_zeros((2 * f,), dtype),
            sca_w=_uniform(rng, (f, f), f, dtype), sca_b=_zeros((f,), dtype),
            pw2_w=_uniform(rng, (f, f), f, dtype), pw2_b=_zeros((f,), dtype),
            ln2_gamma=_ones((f,), dtype), ln2_beta=_zeros((f,), dtype),
            ffn1_w=_uniform(rng, (2 * f, f), f, dtype), ffn1_b=_zeros((2 * f,), dtype),
            ffn2_w=_uniform(rng, (f, f), f, dtype), ffn2_b=_zeros((f,), dtype),
        )

    @classmethod
    def zeros(cls, features, dtype=np.float32):
        f = features
        return cls(
            ln1_gamma=_zeros((f,), dtype), ln1_beta=_zeros((f,), dtype),
            pw1_w=_zeros((2 * f, f), dtype), pw1_b=_zeros((2 * f,), dtype),
            dw_w=_zeros((2 * f, 3), dtype), dw_b=_zeros((2 * f,), dtype),
            sca_w=_zeros((f, f), dtype), sca_b=_zeros((f,), dtype),
            pw2_w=_zeros((f, f), dtype), pw2_b=_zeros((f,), dtype),
            ln2_gamma=_zeros((f,), dtype), ln2_beta=_zeros((f,), dtype),
            ffn1_w=_zeros((2 * f, f), dtype), ffn1_b=_zeros((2 * f,), dtype),
            ffn2_w=_zeros((f, f), dtype), ffn2_b=_zeros((f,), dtype),
        )

    def named_tensors(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in
                ("ln1_gamma", "ln1_beta", "pw1_w", "pw1_b", "dw_w", "dw_b",
                 "sca_w", "sca_b", "pw2_w", "pw2_b", "ln2_gamma", "ln2_beta",
                 "ffn1_w", "ffn1_b", "ffn2_w", "ffn2_b")]


def simple_gate(x):
    """Halve the channels and multiply the halves (no parameters)."""
    a, b = T.split_half(x)
    return T.mul(a, b)


def naf_forward(z, p):
    """(.., W, F) -> (.., W, F), two residual sub-blocks."""
    t = T.layer_norm(z, p.ln1_gamma, p.ln1_beta, eps=LN_EPS)
    t = T.linear(t, p.pw1_w, p.pw1_b)
    t = T.depthwise_conv1d(t, p.dw_w, p.dw_b)
    t = simple_gate(t)
    pooled = T.reduce_mean(t, axis=-2, keepdims=True)
    t = T.mul(t, T.linear(pooled, p.sca_w, p.sca_b))
    t = T.linear(t, p.pw2_w, p.pw2_b)
    y = T.add(z, t)

    u = T.layer_norm(y, p.ln2_gamma, p.ln2_beta, eps=LN_EPS)
    u = T.linear(u, p.ffn1_w, p.ffn1_b)
    u = simple_gate(u)
    u = T.linear(u, p.ffn2_w, p.ffn2_b)
    return T.add(y, u)


@dataclass
class UpsamplerParams:
    """Channel expansion to f*r^2, 1D pixel shuffle, per-line restore conv."""

    expand_w: Tensor   # (f*r^2, F, 3)
    expand_b: Tensor
    restore_w: Tensor  # (C, f, 3)
    restore_b: Tensor
    scale: int
    up_features: int

    @classmethod
    def init(cls, features, up_features, scale, bands, rng, dtype=np.float32):
        fr2 = up_features * scale * scale
        return cls(
            expand_w=_uniform(rng, (fr2, features, 3), features * 3, dtype),
            expand_b=_zeros((fr2,), dtype),
            restore_w=_uniform(rng, (bands, up_features, 3), up_features * 3, dtype),
            restore_b=_zeros((bands,), dtype),
            scale=scale,
            up_features=up_features,
        )

    @classmethod
    def zeros(cls, features, up_features, scale, bands, dtype=np.float32):
        fr2 = up_features * scale * scale
        return cls(
            expand_w=_zeros((fr2, features, 3), dtype),
            expand_b=_zeros((fr2,), dtype),
            restore_w=_zeros((bands, up_features, 3), dtype),
            restore_b=_zeros((bands,), dtype),
            scale=scale,
            up_features=up_features,
        )

    def named_tensors(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in
                ("expand_w", "expand_b", "restore_w", "restore_b")]


def pixel_shuffle_line(x, scale, up_features):
    """Rearrange (.., W, f*r^2) -> (.., r, r*W, f).

    Channel q = (a*r + b)*f + c at low-res column j lands on output line a,
    output column j*r + b, feature c. This ordering is frozen; the model
    container format depends on it.
    """
    r, f = scale, up_features
    w = x.shape[-2]
    lead = x.shape[:-2]
    n = len(lead)
    t = T.reshape(x, lead + (w, r, r, f))            # (.., j, a, b, c)
    perm = tuple(range(n)) + (n + 1, n, n + 2, n + 3)
    t = T.transpose(t, perm)                         # (.., a, j, b, c)
    return T.reshape(t, lead + (r, w * r, f))


def upsample_line(x, p):
    """(.., W, F) line features -> (.., r, r*W, C) super-resolved residual."""
    t = T.conv1d(x, p.expand_w, p.expand_b)
    t = pixel_shuffle_line(t, p.scale, p.up_features)
    return T.conv1d(t, p.restore_w, p.restore_b)


def bilinear_two_line(prev, curr, scale):
    """Bilinear base between two adjacent low-res lines.

    Output line k of r sits at fraction k/r of the way from `prev` to
    `curr`; across-track position i interpolates low-res columns floor(i/r)
    and floor(i/r)+1, clamping at the right edge. Returns an (r, r*W, C)
    ndarray; this path carries no gradient.
    """
    prev = np.asarray(prev)
    curr = np.asarray(curr)
    if prev.shape != curr.shape:
        raise ShapeError(f"bilinear: line shapes differ {prev.shape} vs {curr.shape}")
    r = int(scale)
    w = prev.shape[0]
    i = np.arange(w * r, dtype=prev.dtype)
    pos = i / r
    j0 = np.floor(pos).astype(np.int64)
    frac = (pos - j0).astype(prev.dtype)
    j1 = np.minimum(j0 + 1, w - 1)
    out = np.empty((r, w * r, prev.shape[1]), dtype=prev.dtype)
    for k in range(r):
        a = np.asarray(k / r, dtype=prev.dtype)
        line = (1 - a) * prev + a * curr
        out[k] = (1 - frac)[:, None] * line[j0] + frac[:, None] * line[j1]
    return out
