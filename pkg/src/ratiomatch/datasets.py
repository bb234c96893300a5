"""Toy 2-D densities, Gray-code discretisation, Ising data and the dataset file format."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .energy import IsingEnergy, check_bits
from .samplers import gibbs_sample_set, steps_to_sweeps

LO, HI = -4.0, 4.0

# ---------------------------------------------------------------- 2-D generators
#
# Constants are fixed here and copied into every dataset manifest.

GENERATOR_NOTES = {
    "2spirals": "t=sqrt(u), r=3t, angle=3*pi*t, mirrored arms, noise 0.1",
    "8gaussians": "centres radius 2 at multiples of pi/4, std 0.2",
    "circles": "radii 3 and 1.5, equal mass, noise 0.1",
    "moons": "two interleaved half circles, centred, scale 2, noise 0.1",
    "pinwheel": "5 blades, radial std 0.3, tangential std 0.1, rate 0.25, scale 2",
    "swissroll": "t=1.5pi(1+2u), (t cos t, t sin t)/5, noise 0.1",
    "checkerboard": "uniform on unit squares of [-2,2]^2 with even floor(x)+floor(y)",
}
SUPPORTED = tuple(GENERATOR_NOTES)


def _2spirals(n, rng):
    t = np.sqrt(rng.random(n))
    r, ang = 3.0 * t, 3.0 * np.pi * t
    pts = np.stack([-np.cos(ang) * r, np.sin(ang) * r], axis=1)
    arm = rng.random(n) < 0.5
    pts[arm] *= -1.0
    return pts + 0.1 * rng.standard_normal((n, 2))


def _8gaussians(n, rng):
    ang = np.pi / 4 * rng.integers(0, 8, n)
    centres = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centres + 0.2 * rng.standard_normal((n, 2))


def _circles(n, rng):
    r = np.where(rng.random(n) < 0.5, 3.0, 1.5)
    ang = 2 * np.pi * rng.random(n)
    return r[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1) + 0.1 * rng.standard_normal((n, 2))


def _moons(n, rng):
    ang = np.pi * rng.random(n)
    upper = rng.random(n) < 0.5
    x = np.where(upper, np.cos(ang), 1.0 - np.cos(ang))
    y = np.where(upper, np.sin(ang), 0.5 - np.sin(ang))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 2.0
    return pts + 0.1 * rng.standard_normal((n, 2))


def _pinwheel(n, rng):
    blades, radial, tangential, rate = 5, 0.3, 0.1, 0.25
    rads = np.linspace(0, 2 * np.pi, blades, endpoint=False)
    feats = rng.standard_normal((n, 2)) * np.array([radial, tangential])
    feats[:, 0] += 1.0
    labels = rng.integers(0, blades, n)
    ang = rads[labels] + rate * np.exp(feats[:, 0])
    rot = np.stack([np.cos(ang), -np.sin(ang), np.sin(ang), np.cos(ang)], axis=1).reshape(n, 2, 2)
    return 2.0 * np.einsum("ti,tij->tj", feats, rot)


def _swissroll(n, rng):
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 5.0
    return pts + 0.1 * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    x = rng.uniform(-2.0, 2.0, n)
    y = rng.uniform(0.0, 1.0, n) + 2.0 * rng.integers(-1, 1, n)  # in [-2,-1) or [0,1)
    # shift y by one square whenever floor(x) is odd so floor(x)+floor(y) stays even
    y = y + (np.floor(x) % 2)
    return np.stack([x, y], axis=1)


_GENERATORS = {
    "2spirals": _2spirals, "8gaussians": _8gaussians, "circles": _circles, "moons": _moons,
    "pinwheel": _pinwheel, "swissroll": _swissroll, "checkerboard": _checkerboard,
}


def sample_2d(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. points from a named toy density, clipped to [-4, 4]^2."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown distribution {name!r}; choose from {', '.join(SUPPORTED)}")
    if n < 0:
        raise ValueError("n must be non-negative")
    return np.clip(_GENERATORS[name](int(n), rng), LO, HI)


# ---------------------------------------------------------------- Gray codes

@dataclass(frozen=True)
class GrayCodec:
    """k-bit binary-reflected Gray code of a uniform grid on [lo, hi]."""

    k: int
    lo: float = LO
    hi: float = HI

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("lo must be below hi")

    @property
    def levels(self) -> int:
        return (1 << self.k) - 1

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.levels

    # small k: vectorised uint64; large k: exact Python integers
    @property
    def _exact(self) -> bool:
        return self.k > 52

    def quantize(self, v) -> np.ndarray:
        """Grid index of each value, rounding half away from zero."""
        v = np.clip(np.asarray(v, dtype=np.float64), self.lo, self.hi)
        if self._exact:
            span = Fraction(self.hi) - Fraction(self.lo)
            out = np.empty(v.shape, dtype=object)
            for pos, x in np.ndenumerate(v):
                q = (Fraction(float(x)) - Fraction(self.lo)) * self.levels / span
                out[pos] = int(q + Fraction(1, 2))  # q >= 0, so floor(q + 1/2) is half-away
            return out
        q = (v - self.lo) / (self.hi - self.lo) * self.levels
        return np.minimum(np.floor(q + 0.5), self.levels).astype(np.uint64)

    def index_to_bits(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self._exact:
            flat = [int(i) ^ (int(i) >> 1) for i in idx.reshape(-1)]
            bits = np.array([[int(c) for c in format(g, f"0{self.k}b")] for g in flat], dtype=np.uint8)
            return bits.reshape(idx.shape + (self.k,))
        g = idx.astype(np.uint64)
        g = g ^ (g >> np.uint64(1))
        shifts = np.arange(self.k - 1, -1, -1, dtype=np.uint64)
        return ((g[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)

    def bits_to_index(self, bits) -> np.ndarray:
        bits = np.asarray(bits)
        if bits.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} bits, got {bits.shape[-1]}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("bits must be 0 or 1")
        # prefix XOR from the most significant bit gives the binary digits
        binary = np.bitwise_xor.accumulate(bits.astype(np.uint8), axis=-1)
        if self._exact:
            flat = binary.reshape(-1, self.k)
            out = np.array([int("".join(map(str, row)), 2) for row in flat], dtype=object)
            return out.reshape(bits.shape[:-1])
        weights = np.uint64(1) << np.arange(self.k - 1, -1, -1, dtype=np.uint64)
        return (binary.astype(np.uint64) * weights).sum(axis=-1, dtype=np.uint64)

    def index_to_value(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self._exact:
            span = Fraction(self.hi) - Fraction(self.lo)
            f = [float(Fraction(self.lo) + Fraction(int(i), self.levels) * span) for i in idx.reshape(-1)]
            return np.array(f, dtype=np.float64).reshape(idx.shape)
        return self.lo + idx.astype(np.float64) / self.levels * (self.hi - self.lo)

    def manifest(self) -> dict:
        return {"k": str(self.k), "lo": repr(float(self.lo)), "hi": repr(float(self.hi)),
                "rounding": "half-away-from-zero", "code": "binary-reflected-gray-msb-first"}


def float_to_gray(codec: GrayCodec, v) -> np.ndarray:
    """Gray bits (MSB first) of v; a scalar gives shape ``(k,)``, an array gets a trailing k axis."""
    return codec.index_to_bits(codec.quantize(v))


def gray_to_float(codec: GrayCodec, bits) -> np.ndarray | float:
    out = codec.index_to_value(codec.bits_to_index(bits))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- datasets

@dataclass
class BitDataset:
    bits: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.ascontiguousarray(check_bits(self.bits).astype(np.uint8))
        self.manifest = {str(k): str(v) for k, v in self.manifest.items()}

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def d(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class Synthetic2DSpec:
    name: str
    n: int
    codec: GrayCodec

    def __post_init__(self):
        if self.name not in _GENERATORS:
            raise ValueError(f"unknown distribution {self.name!r}")


def encode_points(codec: GrayCodec, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.concatenate([float_to_gray(codec, pts[:, 0]), float_to_gray(codec, pts[:, 1])], axis=1)


def decode_points(codec: GrayCodec, bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits)
    k = codec.k
    if bits.shape[-1] != 2 * k:
        raise ValueError(f"expected {2 * k} bits per row")
    return np.stack([codec.index_to_value(codec.bits_to_index(bits[..., :k])),
                     codec.index_to_value(codec.bits_to_index(bits[..., k:]))], axis=-1)


def encode_dataset(spec: Synthetic2DSpec, rng: np.random.Generator, seed: int | None = None) -> BitDataset:
    """Sample ``spec.n`` points and concatenate the Gray codes of both coordinates."""
    pts = sample_2d(spec.name, spec.n, rng)
    manifest = {"source": "synthetic-2d", "generator": spec.name, "generator_notes": GENERATOR_NOTES[spec.name],
                "n": str(spec.n), **{f"codec_{k}": v for k, v in spec.codec.manifest().items()}}
    if seed is not None:
        manifest["seed"] = str(seed)
    return BitDataset(encode_points(spec.codec, pts), manifest)


def codec_from_manifest(manifest: dict) -> GrayCodec:
    try:
        return GrayCodec(int(manifest["codec_k"]), float(manifest["codec_lo"]), float(manifest["codec_hi"]))
    except KeyError as e:
        raise ValueError("dataset manifest carries no Gray codec") from e


def gen_ising_data(true_model: IsingEnergy, n: int, steps: int, rng: np.random.Generator,
                   seed: int | None = None) -> BitDataset:
    """``n`` independent chains run for ``steps`` single-site updates each; final states are the data."""
    if true_model.learnable:
        raise ValueError("data must come from a fixed true model")
    sweeps = steps_to_sweeps(steps, true_model.d)
    X = gibbs_sample_set(true_model, n, chains=n, burn_in=sweeps, thin=1, rng=rng)
    manifest = {"source": "ising", "n": str(n), "steps": str(steps), "sweeps": str(sweeps),
                **{f"model_{k}": str(v) for k, v in true_model.architecture().items()}}
    if seed is not None:
        manifest["seed"] = str(seed)
    return BitDataset(X, manifest)


# ---------------------------------------------------------------- file format

MAGIC = b"RMBITDS\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_LEN = struct.Struct("<Q")


class DatasetFormatError(ValueError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


def _manifest_text(manifest: dict) -> bytes:
    lines = []
    for k, v in manifest.items():
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"manifest entry {k!r} cannot be stored as key=value text")
        lines.append(f"{k}={v}")
    return ("\n".join(lines)).encode("utf-8")


def _parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: BitDataset, path) -> None:
    packed = np.packbits(ds.bits, axis=1)
    text = _manifest_text(ds.manifest)
    payload = _HEADER.pack(MAGIC, VERSION, ds.d, ds.n) + packed.tobytes() + _LEN.pack(len(text)) + text
    atomic_write(path, payload)


def load_dataset(path) -> BitDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated dataset header")
    magic, version, d, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError("not a bit dataset file (bad magic)")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    row = (d + 7) // 8
    off = _HEADER.size
    end = off + row * n
    if len(raw) < end + _LEN.size:
        raise DatasetFormatError("truncated bit matrix")
    packed = np.frombuffer(raw, dtype=np.uint8, count=row * n, offset=off).reshape(n, row)
    (mlen,) = _LEN.unpack_from(raw, end)
    text = raw[end + _LEN.size:]
    if len(text) != mlen:
        raise DatasetFormatError("truncated or oversized manifest")
    bits = np.unpackbits(packed, axis=1, count=d) if n else np.zeros((0, d), np.uint8)
    return BitDataset(bits, _parse_manifest(text.decode("utf-8")))
