"""Hyperspectral cube container, bicubic degradation, synthetic scenes.

Cubes are (H, W, C) float32 in [0, 1] with a per-band validity mask. On
disk they are stored band-interleaved-by-line (BIL): for each line, for
each band, W samples — one acquisition line is one contiguous record, the
natural unit for a pushbroom stream.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

CUBE_MAGIC = b"HSC1"
CUBE_VERSION = 1
_FLAG_MASK = 0x01


@dataclass
class HsiCube:
    data: np.ndarray                    # (H, W, C) float32
    band_valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ContractError(f"cube must be (H, W, C), got {self.data.shape}")
        if self.band_valid is None:
            self.band_valid = np.ones(self.data.shape[2], dtype=bool)
        else:
            self.band_valid = np.asarray(self.band_valid, dtype=bool)
            if self.band_valid.shape != (self.data.shape[2],):
                raise ContractError("band_valid length must equal the band count")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    def line(self, y):
        """One acquisition line as a contiguous (W, C) view."""
        return self.data[y]


def write_cube(cube, path):
    h, w, c = cube.data.shape
    flags = _FLAG_MASK if not cube.band_valid.all() else 0
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<H", CUBE_VERSION))
        fh.write(struct.pack("<3I", h, w, c))
        fh.write(struct.pack("<B", flags))
        if flags & _FLAG_MASK:
            fh.write(cube.band_valid.astype(np.uint8).tobytes())
        # BIL: per line, per band, W samples
        fh.write(cube.data.transpose(0, 2, 1).astype("<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated cube file while reading {what}")
    return buf


def read_cube(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CUBE_MAGIC:
            raise FormatError(f"bad magic {magic!r}; not a cube file")
        version, = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CUBE_VERSION:
            raise FormatError(f"unsupported cube version {version}")
        h, w, c = struct.unpack("<3I", _read_exact(fh, 12, "extents"))
        flags, = struct.unpack("<B", _read_exact(fh, 1, "flags"))
        band_valid = np.ones(c, dtype=bool)
        if flags & _FLAG_MASK:
            band_valid = np.frombuffer(_read_exact(fh, c, "band mask"),
                                       dtype=np.uint8).astype(bool)
        payload = _read_exact(fh, 4 * h * w * c, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after the payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, c, w).transpose(0, 2, 1)
    return HsiCube(data=data, band_valid=band_valid)


def import_raw(raw_path, header_path):
    """Ingest a flat float32 raw cube with a plain-text sidecar header.

    The header carries `height`, `width`, `bands` and `interleave`
    (bil or bsq), one key=value per line.
    """
    keys = {}
    with open(header_path, "r", encoding="utf-8") as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise FormatError(f"sidecar header line not key=value: {ln!r}")
            k, v = ln.split("=", 1)
            keys[k.strip()] = v.strip()
    try:
        h, w, c = int(keys["height"]), int(keys["width"]), int(keys["bands"])
        interleave = keys["interleave"].lower()
    except KeyError as e:
        raise FormatError(f"sidecar header missing key {e}") from e
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != h * w * c:
        raise FormatError(
            f"raw payload has {raw.size} floats, header implies {h * w * c}")
    if interleave == "bil":
        data = raw.reshape(h, c, w).transpose(0, 2, 1)
    elif interleave == "bsq":
        data = raw.reshape(c, h, w).transpose(1, 2, 0)
    else:
        raise FormatError(f"unknown interleave {interleave!r} (expected bil or bsq)")
    return HsiCube(data=data)


# ---------------------------------------------------------------------------
# bicubic resampling (Catmull-Rom, a = -0.5, half-pixel phase)


def catmull_rom(t):
    """Catmull-Rom cubic kernel (a = -0.5), support (-2, 2)."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (1.5 * t[near] - 2.5) * t[near] * t[near] + 1.0
    out[far] = ((-0.5 * t[far] + 2.5) * t[far] - 4.0) * t[far] + 2.0
    return out


def _reflect_index(i, n):
    """Half-sample symmetric reflection into [0, n)."""
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i >= n, period - 1 - i, i)


def resample_matrix(n_in, factor, down):
    """Dense 1D resampling operator (n_out, n_in) for one axis.

    Output sample o is taken at input coordinate (o+0.5)*factor-0.5 when
    downsampling (kernel stretched by the factor, weights renormalized:
    the standard antialiased convention) and (o+0.5)/factor-0.5 when
    upsampling (plain kernel). Boundaries reflect symmetrically.
    """
    r = int(factor)
    if down:
        n_out = n_in // r
        centers = (np.arange(n_out) + 0.5) * r - 0.5
        radius, scale = 2 * r, r
    else:
        n_out = n_in * r
        centers = (np.arange(n_out) + 0.5) / r - 0.5
        radius, scale = 2, 1
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o, x in enumerate(centers):
        lo = int(np.ceil(x - radius))
        taps = np.arange(lo, int(np.floor(x + radius)) + 1)
        wts = catmull_rom((x - taps) / scale)
        wts = wts / wts.sum()
        np.add.at(mat[o], _reflect_index(taps, n_in), wts)
    return mat


def _resample_cube(cube, r, down):
    h, w, _ = cube.data.shape
    my = resample_matrix(h, r, down)
    mx = resample_matrix(w, r, down)
    out = np.einsum("yh,hwc,xw->yxc", my, cube.data.astype(np.float64), mx,
                    optimize=True)
    return HsiCube(data=np.clip(out, 0.0, 1.0).astype(np.float32),
                   band_valid=cube.band_valid.copy())


def bicubic_downsample(cube, r):
    """Antialiased bicubic decimation by an integer factor, per band."""
    r = int(r)
    if cube.height % r or cube.width % r:
        raise ContractError(
            f"extents {cube.height}x{cube.width} not divisible by factor {r}")
    return _resample_cube(cube, r, down=True)


def bicubic_upsample(cube, r):
    """Bicubic interpolation by an integer factor, per band."""
    return _resample_cube(cube, int(r), down=False)


# ---------------------------------------------------------------------------
# synthetic scenes


def _band_limited_field(rng, h, w, smoothness):
    """Zero-mean Gaussian random field, low-passed in the Fourier domain."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    lowpass = np.exp(-2.0 * (np.pi * smoothness) ** 2 * (fy ** 2 + fx ** 2))
    fld = np.fft.ifft2(np.fft.fft2(noise) * lowpass).real
    sd = fld.std()
    return fld / sd if sd > 0 else fld


def _endmember_spectra(rng, rank, bands):
    """Smooth positive spectra in [0.1, 0.9], one per endmember."""
    c = np.linspace(0.0, 1.0, bands)
    spectra = np.empty((rank, bands))
    for e in range(rank):
        amp = rng.uniform(0.3, 1.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        freq = rng.uniform(0.5, 2.5, size=3)
        curve = sum(a * np.sin(2 * np.pi * f * c + p)
                    for a, f, p in zip(amp, freq, phase))
        lo, hi = curve.min(), curve.max()
        span = hi - lo if hi > lo else 1.0
        spectra[e] = 0.1 + 0.8 * (curve - lo) / span
    return spectra


def make_synthetic(seed, height, width, bands, smoothness=3.0, rank=3,
                   contrast=2.0):
    """Deterministic synthetic scene: low-rank endmember mixing over
    band-limited abundance fields, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    spectra = _endmember_spectra(rng, rank, bands)
    fields = np.stack([_band_limited_field(rng, height, width, smoothness)
                       for _ in range(rank)])
    logits = contrast * fields
    logits -= logits.max(axis=0, keepdims=True)
    ab = np.exp(logits)
    ab /= ab.sum(axis=0, keepdims=True)
    cube = np.einsum("ehw,ec->hwc", ab, spectra, optimize=True)
    return HsiCube(data=np.clip(cube, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# patches and augmentation


def augment8(cube):
    """4 spatial rotations x 2 horizontal flips; spectra untouched."""
    if cube.height != cube.width:
        raise ContractError(
            f"augment8 needs a square patch, got {cube.height}x{cube.width}")
    out = []
    for flip in (False, True):
        base = np.flip(cube.data, axis=1) if flip else cube.data
        for k in range(4):
            arr = np.rot90(base, k, axes=(0, 1))
            out.append(HsiCube(data=np.ascontiguousarray(arr),
                               band_valid=cube.band_valid.copy()))
    return out


def extract_patches(cube, size, stride=None):
    """Non-overlapping (or strided) square spatial patches."""
    stride = stride or size
    out = []
    for y in range(0, cube.height - size + 1, stride):
        for x in range(0, cube.width - size + 1, stride):
            out.append(HsiCube(data=cube.data[y:y + size, x:x + size].copy(),
                               band_valid=cube.band_valid.copy()))
    return out
