"""Full network: SFE -> CLFF blocks -> upsampler, residual over bilinear.

Consuming low-res line y (0-based, y >= 1) emits the r high-res lines
r*(y-1) .. r*(y-1)+r-1, i.e. the gap between the previous line and the one
just acquired. The first call only primes the recurrent state; the last r
high-res grid lines of an H-line image are never produced, so an H-line
input yields (H-1)*r output lines.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import ssm, tensor as T
from .blocks import (NafParams, SfeParams, UpsamplerParams, bilinear_two_line,
                     naf_forward, sfe_forward, upsample_line)
from .errors import ContractError, FormatError, NumericError
from .tensor import Tensor

MEMORY_KINDS = ("mamba", "causalconv")
MAGIC = b"DPSRW001"


@dataclass(frozen=True)
class DpsrConfig:
    """Architecture hyperparameters; defaults follow the full-size model."""

    bands: int                 # input spectral channels
    features: int = 280        # working feature width
    expand: int = 1            # memory-block expansion factor
    state_size: int = 16       # SSM latent length per feature
    kernel_lines: int = 4      # causal-conv receptive field in lines
    up_features: int = 64      # reduced features kept through pixel shuffle
    scale: int = 4             # super-resolution factor
    n_clff: int = 2            # number of CLFF blocks
    memory_kind: str = "mamba"
    ca_reduction: int = 16     # channel-attention bottleneck ratio

    def __post_init__(self):
        for name in ("bands", "features", "expand", "state_size",
                     "kernel_lines", "up_features", "scale", "n_clff",
                     "ca_reduction"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ContractError(f"config field {name} must be a positive int, got {v!r}")
        if self.features % 2 != 0:
            raise ContractError("features must be even (gated blocks halve channels)")
        if self.memory_kind not in MEMORY_KINDS:
            raise ContractError(f"memory_kind must be one of {MEMORY_KINDS}")

    @property
    def inner(self):
        return self.expand * self.features


def _mem_init(cfg, rng, dtype):
    if cfg.memory_kind == "mamba":
        return ssm.MambaParams.init(cfg.features, cfg.expand, cfg.state_size,
                                    cfg.kernel_lines, rng, dtype)
    return ssm.CausalConvParams.init(cfg.features, cfg.expand,
                                     cfg.kernel_lines, rng, dtype)


def _mem_zeros(cfg, dtype):
    if cfg.memory_kind == "mamba":
        return ssm.MambaParams.zeros(cfg.features, cfg.expand, cfg.state_size,
                                     cfg.kernel_lines, dtype)
    return ssm.CausalConvParams.zeros(cfg.features, cfg.expand,
                                      cfg.kernel_lines, dtype)


@dataclass
class DpsrParams:
    config: DpsrConfig
    sfe: SfeParams
    clff: list            # [(NafParams, memory params), ...]
    upsampler: UpsamplerParams

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        return cls(
            config=config,
            sfe=SfeParams.init(config.bands, config.features,
                               config.ca_reduction, rng, dtype),
            clff=[(NafParams.init(config.features, rng, dtype),
                   _mem_init(config, rng, dtype))
                  for _ in range(config.n_clff)],
            upsampler=UpsamplerParams.init(config.features, config.up_features,
                                           config.scale, config.bands, rng, dtype),
        )

    @classmethod
    def zeros(cls, config, dtype=np.float32):
        return cls(
            config=config,
            sfe=SfeParams.zeros(config.bands, config.features,
                                config.ca_reduction, dtype),
            clff=[(NafParams.zeros(config.features, dtype), _mem_zeros(config, dtype))
                  for _ in range(config.n_clff)],
            upsampler=UpsamplerParams.zeros(config.features, config.up_features,
                                            config.scale, config.bands, dtype),
        )

    def named_tensors(self):
        """All parameter tensors in the frozen serialization order."""
        out = self.sfe.named_tensors("sfe.")
        for i, (naf, mem) in enumerate(self.clff):
            out += naf.named_tensors(f"clff{i}.naf.")
            out += mem.named_tensors(f"clff{i}.mem.")
        out += self.upsampler.named_tensors("up.")
        return out

    def scalar_count(self):
        return sum(t.size for _, t in self.named_tensors())

    def astype(self, dtype):
        """Copy with every tensor cast to `dtype` (for gradient-check mode)."""
        clone = DpsrParams.zeros(self.config, dtype=dtype)
        for (_, dst), (_, src) in zip(clone.named_tensors(), self.named_tensors()):
            dst.data[...] = src.data.astype(dtype)
        return clone


@dataclass
class StreamState:
    """Everything the streaming model remembers between lines."""

    mem: list                     # per-CLFF ssm.MambaState / CausalConvState
    prev_line: np.ndarray | None = None
    lines_consumed: int = 0

    @property
    def width(self):
        return self.mem[0].width

    def element_count(self):
        n = sum(m.element_count() for m in self.mem)
        if self.prev_line is not None:
            n += self.prev_line.size
        return n

    def nbytes(self):
        n = sum(m.nbytes() for m in self.mem)
        if self.prev_line is not None:
            n += self.prev_line.nbytes
        return n


def init_stream(params, width, dtype=np.float32):
    cfg = params.config
    if cfg.memory_kind == "mamba":
        states = [ssm.MambaState.fresh(mem, width, dtype) for _, mem in params.clff]
    else:
        states = [ssm.CausalConvState.fresh(mem, width, dtype) for _, mem in params.clff]
    return StreamState(mem=states)


def _mem_step(z, mem_params, state, kind):
    if kind == "mamba":
        return ssm.mamba_step(z, mem_params, state)
    return ssm.causalconv_step(z, mem_params, state)


def _mem_scan(z, mem_params, kind):
    if kind == "mamba":
        return ssm.mamba_scan(z, mem_params)
    return ssm.causalconv_scan(z, mem_params)


def dpsr_step(line, params, state):
    """Feed one low-res line; returns (r, r*W, C) output or None, plus state.

    The first line primes the recurrent state and produces no output (there
    is no previous line to interpolate from).
    """
    cfg = params.config
    line = np.asarray(line)
    if line.ndim != 2 or line.shape[1] != cfg.bands:
        raise ContractError(
            f"dpsr_step: expected a (W, {cfg.bands}) line, got {line.shape}")
    if state is None:
        state = init_stream(params, line.shape[0], dtype=line.dtype)
    if line.shape[0] != state.width:
        raise ContractError(
            f"dpsr_step: line width {line.shape[0]} vs stream width {state.width}")

    z = sfe_forward(Tensor(line), params.sfe)
    new_mem = []
    for (naf, mem), mstate in zip(params.clff, state.mem):
        z = naf_forward(z, naf)
        z, mstate = _mem_step(z, mem, mstate, cfg.memory_kind)
        new_mem.append(mstate)
    residual = upsample_line(z, params.upsampler)

    out = None
    if state.prev_line is not None:
        out = residual.data + bilinear_two_line(state.prev_line, line, cfg.scale)
        if not np.all(np.isfinite(out)):
            raise NumericError("dpsr_step produced non-finite output")
    next_state = StreamState(mem=new_mem, prev_line=line.copy(),
                             lines_consumed=state.lines_consumed + 1)
    return out, next_state


def dpsr_forward_image(cube_lr, params):
    """Whole-image forward: (H, W, C) -> Tensor ((H-1)*r, r*W, C).

    Same math as folding dpsr_step over the lines; this is the training
    path, so the result participates in the tape.
    """
    cfg = params.config
    x = T.as_tensor(cube_lr)
    if x.data.ndim != 3 or x.shape[2] != cfg.bands:
        raise ContractError(
            f"forward_image: expected (H, W, {cfg.bands}), got {x.shape}")
    h_lines, width = x.shape[0], x.shape[1]
    if h_lines < 2:
        raise ContractError("forward_image needs at least 2 lines")

    z = sfe_forward(x, params.sfe)
    for naf, mem in params.clff:
        z = naf_forward(z, naf)
        z = _mem_scan(z, mem, cfg.memory_kind)
    up = upsample_line(z, params.upsampler)        # (H, r, rW, C)
    net = T.slice_axis(up, 0, 1, h_lines)          # drop the priming line
    net = T.reshape(net, ((h_lines - 1) * cfg.scale, width * cfg.scale, cfg.bands))

    base = np.concatenate(
        [bilinear_two_line(x.data[y - 1], x.data[y], cfg.scale)
         for y in range(1, h_lines)], axis=0)
    return T.add(net, Tensor(base))


# ---------------------------------------------------------------------------
# parameter container format


def _write_tensor(fh, arr):
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def save_params(params, path):
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(
            "<10I", cfg.bands, cfg.features, cfg.expand, cfg.state_size,
            cfg.kernel_lines, cfg.up_features, cfg.scale, cfg.n_clff,
            MEMORY_KINDS.index(cfg.memory_kind), cfg.ca_reduction))
        for _, t in params.named_tensors():
            _write_tensor(fh, t.data)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated parameter file while reading {what}")
    return buf


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fh = io.BytesIO(data)
    magic = _read_exact(fh, len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a model container")
    fields = struct.unpack("<10I", _read_exact(fh, 40, "config header"))
    kind_idx = fields[8]
    if kind_idx >= len(MEMORY_KINDS):
        raise FormatError(f"unknown memory kind index {kind_idx}")
    try:
        cfg = DpsrConfig(bands=fields[0], features=fields[1], expand=fields[2],
                         state_size=fields[3], kernel_lines=fields[4],
                         up_features=fields[5], scale=fields[6], n_clff=fields[7],
                         memory_kind=MEMORY_KINDS[kind_idx], ca_reduction=fields[9])
    except ContractError as e:
        raise FormatError(f"invalid config header: {e}") from e
    params = DpsrParams.zeros(cfg)
    for name, t in params.named_tensors():
        ndim, = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
        if ndim != t.data.ndim:
            raise FormatError(f"{name}: rank {ndim} does not match config shape")
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"{name} shape"))
        if shape != t.data.shape:
            raise FormatError(
                f"{name}: stored shape {shape} does not match config shape {t.data.shape}")
        raw = _read_exact(fh, 4 * t.data.size, f"{name} payload")
        t.data[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if fh.read(1):
        raise FormatError("trailing bytes after the last tensor")
    return params
