"""MX block floating-point formats and the block quantizer.

An MX format quantizes tensors in blocks of 32 elements along the innermost
axis. Each block carries one shared power-of-two scale (a UE8M0 exponent)
and 32 element codes drawn from a small floating-point value grid.

Scale rule (OCP convention): the block exponent is
``floor(log2(max|v|)) - emax`` clamped to [-127, 127], where emax is the
largest element exponent of the format. An all-zero block gets exponent 0.

Element rule: each value is divided by the scale and mapped to the nearest
magnitude in the format's value set, ties on exact midpoints going to the
even code index. Magnitudes above the largest grid value saturate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NonFiniteError, ShapeError

BLOCK = _kernels.BLOCK


@dataclass(frozen=True)
class MxFormat:
    """An MX element format: bit layout plus its representable magnitudes.

    value_set is the ascending array of non-negative representable
    magnitudes, starting with 0.0. Every entry is exactly representable in
    binary floating point. Codes are ``sign_bit << (bits-1) | index`` with
    index pointing into value_set.
    """

    name: str
    exp_bits: int
    mantissa_bits: int
    emax: int
    value_set: np.ndarray
    sign_bits: int = 1

    def __post_init__(self):
        vs = np.ascontiguousarray(self.value_set, dtype=np.float64)
        vs.setflags(write=False)
        object.__setattr__(self, "value_set", vs)
        if vs[0] != 0.0 or np.any(np.diff(vs) <= 0):
            raise ValueError("value_set must start at 0 and increase strictly")
        if len(vs) > 1 << (self.bits - 1):
            raise ValueError("value_set does not fit the code space")

    @property
    def bits(self) -> int:
        return self.sign_bits + self.exp_bits + self.mantissa_bits

    @property
    def sign_shift(self) -> int:
        return self.bits - 1

    @property
    def max_value(self) -> float:
        return float(self.value_set[-1])

    def __repr__(self):
        return f"MxFormat({self.name})"


def _e4m3_value_set() -> np.ndarray:
    # 1 sign / 4 exponent / 3 mantissa, bias 7. Exponent field 1111 with
    # mantissa 111 is NaN and is excluded, so the top binade has 7 entries.
    vals = [0.0]
    vals += [m * 2.0**-9 for m in range(1, 8)]  # subnormals: m/8 * 2^-6
    for e in range(1, 15):
        vals += [(1.0 + m / 8.0) * 2.0 ** (e - 7) for m in range(8)]
    vals += [(1.0 + m / 8.0) * 2.0**8 for m in range(7)]
    return np.array(vals)


E2M1 = MxFormat("e2m1", 2, 1, 2, np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]))
E4M3 = MxFormat("e4m3", 4, 3, 8, _e4m3_value_set())

FORMATS = {"e2m1": E2M1, "e4m3": E4M3}


def format_for_bits(bits: int) -> MxFormat | None:
    """Map a site bit-width to its element format; 16 disables quantization."""
    if bits == 4:
        return E2M1
    if bits == 8:
        return E4M3
    if bits == 16:
        return None
    raise ValueError(f"unsupported bit-width {bits}; expected 4, 8 or 16")


def _bits_of(fmt: MxFormat | None) -> int:
    return 16 if fmt is None else fmt.bits


@dataclass(frozen=True)
class FormatConfig:
    """Per-site element formats; None means the site stays unquantized."""

    weights: MxFormat | None
    activations: MxFormat | None
    kv: MxFormat | None = None

    @classmethod
    def from_name(cls, name: str) -> "FormatConfig":
        """Parse a W{bits}A{bits}KV{bits} configuration name, e.g. W4A4KV16."""
        import re

        m = re.fullmatch(r"W(\d+)A(\d+)KV(\d+)", name.strip(), re.IGNORECASE)
        if m is None:
            raise ValueError(f"bad format name {name!r}; expected W<b>A<b>KV<b>")
        w, a, kv = (int(x) for x in m.groups())
        return cls(format_for_bits(w), format_for_bits(a), format_for_bits(kv))

    @property
    def name(self) -> str:
        return f"W{_bits_of(self.weights)}A{_bits_of(self.activations)}KV{_bits_of(self.kv)}"


@dataclass
class MxBlock:
    """One quantized block: a UE8M0 scale exponent plus 32 element codes."""

    scale_exp: int
    codes: np.ndarray  # uint8, shape (32,)


@dataclass
class MxTensor:
    """A block-quantized tensor.

    Blocks run along the innermost axis in row-major order: block b covers
    flat elements [32*b, 32*(b+1)).
    """

    shape: tuple[int, ...]
    fmt: MxFormat
    scale_exps: np.ndarray  # int8, shape (n_blocks,)
    codes: np.ndarray  # uint8, shape (n_blocks, 32)

    @property
    def n_blocks(self) -> int:
        return self.scale_exps.shape[0]

    def to_dense(self) -> np.ndarray:
        """Decode to float64. Exact: a value-set lookup scaled by ldexp."""
        flat = _kernels.decode_blocks(
            self.scale_exps, self.codes, self.fmt.value_set, self.fmt.sign_shift
        )
        return flat.reshape(self.shape)


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite values in quantizer input; calibration data is invalid")


def _block_view(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] % BLOCK != 0:
        raise ShapeError(
            f"innermost dimension {x.shape[-1] if x.ndim else 0} of shape {x.shape} "
            f"is not a multiple of {BLOCK}"
        )
    return np.ascontiguousarray(x).reshape(-1, BLOCK)


def quantize_block(values, fmt: MxFormat) -> MxBlock:
    """Quantize exactly 32 finite values to one MX block."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.shape != (BLOCK,):
        raise ShapeError(f"a block holds exactly {BLOCK} elements, got shape {v.shape}")
    _check_finite(v)
    se, codes = _kernels.encode_blocks(
        v.reshape(1, BLOCK), fmt.value_set, fmt.emax, fmt.sign_shift
    )
    return MxBlock(int(se[0]), codes[0])


def dequantize_block(block: MxBlock, fmt: MxFormat) -> np.ndarray:
    """Decode one block to 32 float64 values."""
    se = np.array([block.scale_exp], dtype=np.int8)
    return _kernels.decode_blocks(
        se, block.codes.reshape(1, BLOCK), fmt.value_set, fmt.sign_shift
    )[0]


def quantize_tensor(x, fmt: MxFormat) -> MxTensor:
    """Quantize a dense tensor block-wise along its innermost axis."""
    xb = _block_view(x)
    _check_finite(xb)
    se, codes = _kernels.encode_blocks(xb, fmt.value_set, fmt.emax, fmt.sign_shift)
    return MxTensor(tuple(np.asarray(x).shape), fmt, se, codes)


def dequantize_tensor(t: MxTensor) -> np.ndarray:
    return t.to_dense()


def quantize_dequantize(x, fmt: MxFormat | None) -> np.ndarray:
    """Round-trip through the format (the RTN simulation). None is identity."""
    if fmt is None:
        return np.asarray(x, dtype=np.float64)
    y, _ = quantize_dequantize_with_mask(x, fmt)
    return y


def quantize_dequantize_with_mask(x, fmt: MxFormat):
    """Round-trip plus the in-range mask used by the straight-through pass.

    mask is False exactly where |v| / scale exceeds the largest grid value,
    i.e. where the element saturated.
    """
    x = np.asarray(x, dtype=np.float64)
    xb = _block_view(x)
    _check_finite(xb)
    y, mask = _kernels.qdq_blocks(xb, fmt.value_set, fmt.emax)
    return y.reshape(x.shape), mask.reshape(x.shape)
