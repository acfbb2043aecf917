"""Fixed-point encoding of signed reals for homomorphic arithmetic.

Additively homomorphic schemes operate on integers modulo n, so every real
value is scaled by 2**frac_bits and rounded. Negative values wrap into the
upper half of the plaintext space, two's-complement style: residues in
(n/2, n) decode as negative. Every encrypted intermediate carries an explicit
fractional-bit counter; multiplying two f-bit quantities yields a 2f-bit one,
and the single rescale happens after decryption (rescaling under encryption
is impossible additively).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DEFAULT_FRAC_BITS = 40
# Wire format spends one byte on the counter; deep encrypted backprop chains
# must keep their accumulated fraction below this.
MAX_FRAC_BITS = 255


class EncodingOverflowError(ValueError):
    """Value does not fit the plaintext space at the requested precision."""


@dataclass(frozen=True)
class FixedPoint:
    """A signed real stored as raw = round(value * 2**frac_bits)."""

    raw: int
    frac_bits: int

    def decode(self) -> float:
        return decode_raw(self.raw, self.frac_bits)


def encode(value: float, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedPoint:
    """Round value to the nearest multiple of 2**-frac_bits."""
    if not 0 <= frac_bits <= MAX_FRAC_BITS:
        raise EncodingOverflowError(f"frac_bits {frac_bits} outside [0, {MAX_FRAC_BITS}]")
    value = float(value)
    if not math.isfinite(value):
        raise EncodingOverflowError(f"cannot encode non-finite value {value!r}")
    # Scaling by a power of two is exact in binary floating point, so the
    # only rounding here is the final half-even round to integer.
    return FixedPoint(round(value * (1 << frac_bits)), frac_bits)


def decode_raw(raw: int, frac_bits: int) -> float:
    # Big-int / big-int true division is correctly rounded in CPython even
    # when raw exceeds the float mantissa.
    return raw / (1 << frac_bits)


def to_residue(raw: int, modulus: int) -> int:
    """Map a signed raw integer into [0, modulus), wrapping negatives high."""
    bound = modulus // 2
    if raw > bound or raw < -bound:
        raise EncodingOverflowError(
            f"raw magnitude {raw.bit_length()} bits exceeds plaintext budget "
            f"of modulus ({modulus.bit_length()} bits)"
        )
    return raw % modulus


def from_residue(residue: int, modulus: int) -> int:
    """Invert to_residue: residues above modulus/2 are negative."""
    if not 0 <= residue < modulus:
        raise EncodingOverflowError("residue outside [0, modulus)")
    if residue > modulus // 2:
        return residue - modulus
    return residue
