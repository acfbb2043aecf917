"""Paillier additively homomorphic encryption with fraction-bit bookkeeping.

Implements keygen / encrypt / decrypt plus the two homomorphic operations the
protocol needs: ciphertext addition and plaintext-scalar multiplication.
Ciphertexts carry the fractional-bit counter of their fixed-point plaintext so
mismatched additions fail loudly instead of corrupting silently.

Uses the g = n + 1 variant: Enc(m) = (1 + m*n) * r^n mod n^2, which avoids a
full modular exponentiation for the generator term.

This is a research implementation: keys default to 1024 bits and randomness
may come from a seeded PRNG for reproducible protocol transcripts. Do not use
it to protect real data.
"""

from __future__ import annotations

import hashlib
import math
import random
import secrets
from dataclasses import dataclass, field

from .encoding import (
    DEFAULT_FRAC_BITS,
    MAX_FRAC_BITS,
    EncodingOverflowError,
    FixedPoint,
    decode_raw,
    encode,
    from_residue,
    to_residue,
)

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)


class KeyMismatchError(ValueError):
    """Operation mixed ciphertexts or keys that do not belong together."""


class CiphertextFormatError(ValueError):
    """Serialized ciphertext bytes are malformed."""


def _is_probable_prime(n: int, rng: random.Random, rounds: int = 40) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        # Top two bits forced so the product of two such primes has exactly
        # 2*bits bits; low bit forced for oddness.
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if _is_probable_prime(candidate, rng):
            return candidate


@dataclass(frozen=True)
class PublicKey:
    modulus: int
    generator: int
    n_squared: int = field(init=False, repr=False)
    fingerprint: bytes = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "n_squared", self.modulus * self.modulus)
        n_bytes = self.modulus.to_bytes((self.modulus.bit_length() + 7) // 8, "big")
        object.__setattr__(self, "fingerprint", hashlib.sha256(n_bytes).digest()[:8])

    @property
    def value_width(self) -> int:
        """Serialized width of a ciphertext value: enough bytes for n^2."""
        return (2 * self.modulus.bit_length() + 7) // 8

    def encrypt_residue(self, residue: int, rng: random.Random | None = None) -> int:
        if not 0 <= residue < self.modulus:
            raise EncodingOverflowError("plaintext residue outside [0, n)")
        n, nsq = self.modulus, self.n_squared
        if rng is not None:
            r = rng.randrange(1, n)
        else:
            r = secrets.randbelow(n - 1) + 1
        return (1 + residue * n) % nsq * pow(r, n, nsq) % nsq

    def encrypt_raw(self, raw: int, frac_bits: int, rng: random.Random | None = None) -> "Ciphertext":
        """Encrypt a signed fixed-point raw integer at the given precision."""
        if not 0 <= frac_bits <= MAX_FRAC_BITS:
            raise EncodingOverflowError(f"frac_bits {frac_bits} outside [0, {MAX_FRAC_BITS}]")
        value = self.encrypt_residue(to_residue(raw, self.modulus), rng)
        return Ciphertext(value, frac_bits, self)

    def encrypt(self, value: float, frac_bits: int = DEFAULT_FRAC_BITS,
                rng: random.Random | None = None) -> "Ciphertext":
        return self.encrypt_raw(encode(value, frac_bits).raw, frac_bits, rng)


@dataclass(frozen=True)
class PrivateKey:
    public: PublicKey
    lam: int
    mu: int

    def decrypt_residue(self, value: int) -> int:
        n, nsq = self.public.modulus, self.public.n_squared
        u = pow(value, self.lam, nsq)
        return (u - 1) // n * self.mu % n

    def decrypt_raw(self, ct: "Ciphertext") -> int:
        """Decrypt to the signed fixed-point raw integer."""
        if ct.public_key.fingerprint != self.public.fingerprint:
            raise KeyMismatchError("ciphertext was encrypted under a different key")
        return from_residue(self.decrypt_residue(ct.value), self.public.modulus)

    def decrypt(self, ct: "Ciphertext") -> float:
        return decode_raw(self.decrypt_raw(ct), ct.frac_bits)


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey


def keygen(bits: int = 1024, rng: random.Random | None = None) -> KeyPair:
    """Generate a key pair whose modulus has exactly `bits` bits."""
    if bits < 512 or bits % 2:
        raise ValueError("key size must be an even number of bits, at least 512")
    prime_rng = rng if rng is not None else random.Random(secrets.randbits(256))
    half = bits // 2
    p = _random_prime(half, prime_rng)
    while True:
        q = _random_prime(half, prime_rng)
        if q != p:
            break
    n = p * q
    public = PublicKey(n, n + 1)
    lam = (p - 1) * (q - 1)
    mu = pow(lam % n, -1, n)
    return KeyPair(public, PrivateKey(public, lam, mu))


@dataclass(frozen=True)
class Ciphertext:
    """An encrypted fixed-point number: value in [0, n^2), frac-bit counter."""

    value: int
    frac_bits: int
    public_key: PublicKey

    def _require_same_key(self, other: "Ciphertext"):
        if self.public_key.fingerprint != other.public_key.fingerprint:
            raise KeyMismatchError("cannot combine ciphertexts under different keys")

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        self._require_same_key(other)
        if self.frac_bits != other.frac_bits:
            raise EncodingOverflowError(
                f"fraction-bit mismatch in addition: {self.frac_bits} vs {other.frac_bits}"
            )
        value = self.value * other.value % self.public_key.n_squared
        return Ciphertext(value, self.frac_bits, self.public_key)

    def add_raw(self, raw: int) -> "Ciphertext":
        """Add a plaintext signed raw integer at this ciphertext's precision."""
        n, nsq = self.public_key.modulus, self.public_key.n_squared
        residue = to_residue(raw, n)
        value = self.value * (1 + residue * n) % nsq
        return Ciphertext(value, self.frac_bits, self.public_key)

    def mul_int(self, k: int) -> "Ciphertext":
        """Multiply the plaintext by an exact signed integer; precision unchanged."""
        nsq = self.public_key.n_squared
        if k >= 0:
            value = pow(self.value, k, nsq)
        else:
            # c^k = (c^-k)^-1; one modular inverse beats a near-n exponent.
            value = pow(pow(self.value, -k, nsq), -1, nsq)
        return Ciphertext(value, self.frac_bits, self.public_key)

    def mul_encoded(self, x: float, frac_bits: int = DEFAULT_FRAC_BITS) -> "Ciphertext":
        """Multiply by a real scalar encoded at frac_bits; precision adds."""
        out_frac = self.frac_bits + frac_bits
        if out_frac > MAX_FRAC_BITS:
            raise EncodingOverflowError(f"fraction bits {out_frac} exceed {MAX_FRAC_BITS}")
        ct = self.mul_int(encode(x, frac_bits).raw)
        return Ciphertext(ct.value, out_frac, self.public_key)

    def lift(self, delta: int) -> "Ciphertext":
        """Raise the fraction-bit counter by delta (multiply raw by 2**delta)."""
        if delta < 0:
            raise EncodingOverflowError("cannot lower precision under encryption")
        if self.frac_bits + delta > MAX_FRAC_BITS:
            raise EncodingOverflowError(f"fraction bits {self.frac_bits + delta} exceed {MAX_FRAC_BITS}")
        ct = self.mul_int(1 << delta)
        return Ciphertext(ct.value, self.frac_bits + delta, self.public_key)


def add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition: decrypts to the sum of plaintexts mod n."""
    return c1 + c2


def scalar_mul(k: int, ct: Ciphertext) -> Ciphertext:
    """Homomorphic scalar multiply by a plaintext residue k in [0, n)."""
    if not 0 <= k < ct.public_key.modulus:
        raise EncodingOverflowError("scalar outside [0, n)")
    return Ciphertext(pow(ct.value, k, ct.public_key.n_squared), ct.frac_bits, ct.public_key)


def enc_dot(plain_vec: list[FixedPoint], enc_vec: list[Ciphertext]) -> Ciphertext:
    """Dot product of a plaintext vector with an encrypted vector.

    The result's precision is the sum of the two operands' fraction bits
    (2f when both sides carry f); the decrypting party performs the rescale.
    """
    if len(plain_vec) != len(enc_vec):
        raise ValueError(f"length mismatch: {len(plain_vec)} vs {len(enc_vec)}")
    if not enc_vec:
        raise ValueError("empty vectors")
    plain_frac = plain_vec[0].frac_bits
    acc = None
    for p, c in zip(plain_vec, enc_vec):
        if p.frac_bits != plain_frac:
            raise EncodingOverflowError("plaintext vector has mixed fraction bits")
        term = c.mul_int(p.raw)
        acc = term if acc is None else acc + term
    return Ciphertext(acc.value, acc.frac_bits + plain_frac, acc.public_key)


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    """8-byte key fingerprint, 1-byte frac counter, 4-byte length, value bytes.

    The value is padded to the key's fixed width so every ciphertext under a
    given key serializes to the same number of bytes.
    """
    width = ct.public_key.value_width
    return (
        ct.public_key.fingerprint
        + ct.frac_bits.to_bytes(1, "big")
        + width.to_bytes(4, "big")
        + ct.value.to_bytes(width, "big")
    )


def ciphertext_wire_size(key_bits: int) -> int:
    """Serialized size in bytes of one ciphertext under a key_bits modulus."""
    return 8 + 1 + 4 + (2 * key_bits + 7) // 8


def deserialize_ciphertext(buf: bytes, keys: dict[bytes, PublicKey],
                           offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse one ciphertext from buf at offset; returns (ciphertext, next offset)."""
    if len(buf) - offset < 13:
        raise CiphertextFormatError("truncated ciphertext header")
    fingerprint = buf[offset:offset + 8]
    key = keys.get(fingerprint)
    if key is None:
        raise KeyMismatchError(f"unknown key fingerprint {fingerprint.hex()}")
    frac_bits = buf[offset + 8]
    length = int.from_bytes(buf[offset + 9:offset + 13], "big")
    end = offset + 13 + length
    if length != key.value_width or len(buf) < end:
        raise CiphertextFormatError("ciphertext value length does not match key width")
    value = int.from_bytes(buf[offset + 13:end], "big")
    if value >= key.n_squared:
        raise CiphertextFormatError("ciphertext value outside [0, n^2)")
    return Ciphertext(value, frac_bits, key), end


def fixed_point_vector(values, frac_bits: int = DEFAULT_FRAC_BITS) -> list[FixedPoint]:
    """Encode an iterable of reals at a common precision, for enc_dot."""
    return [encode(float(v), frac_bits) for v in values]
