"""Public-key BFV over :mod:`hebnn.ring`.

Only what the interactive protocol needs: encryption, decryption,
ciphertext + ciphertext and ciphertext x plaintext. There is no
relinearization or modulus switching; every round is re-encrypted by the
client so one plaintext multiplication is the maximum depth.

Messages are scaled by ``q/t`` with rounding (``round(q*m/t)``, i.e.
``delta_q*m`` plus a correction of at most ``q mod t``), which keeps the
plaintext product exact even when ``m*p`` overflows ``t``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .ring import (
    COEFF,
    RingElement,
    RingError,
    RingParams,
    addmod,
    centered,
    discrete_gaussian,
    intt_array,
    mulmod,
    ntt_array,
    sample_noise,
    sample_secret,
    sample_uniform,
    submod,
)

FRESH = 0
MULTIPLIED = 1

WIRE_VERSION = 1
_HEADER = struct.Struct("<4sBBIQQ")  # magic, version, level, N, q, t
MAGIC_CT = b"BFVC"
MAGIC_PK = b"BFVP"
MAGIC_SK = b"BFVS"


class BFVError(ValueError):
    pass


class SerializationError(BFVError):
    """Malformed, truncated or mismatched wire data."""


class LevelError(BFVError):
    """A second plaintext multiplication was requested."""


@dataclass(frozen=True, eq=False)
class SecretKey:
    s: RingElement

    @property
    def params(self) -> RingParams:
        return self.s.params


@dataclass(frozen=True, eq=False)
class PublicKey:
    p0: RingElement
    p1: RingElement

    @property
    def params(self) -> RingParams:
        return self.p0.params

    def __eq__(self, other):
        return isinstance(other, PublicKey) and self.p0 == other.p0 and self.p1 == other.p1

    @property
    def ntt(self):
        # cached NTT images of (p0, p1) for encryption
        cache = self.__dict__.get("_ntt")
        if cache is None:
            cache = ntt_array(self.params, np.stack((self.p0.coeffs, self.p1.coeffs)))
            object.__setattr__(self, "_ntt", cache)
        return cache


@dataclass(frozen=True, eq=False)
class Plaintext:
    """Residues mod t stored in a ring element (coefficients in ``[0, t)``)."""

    poly: RingElement

    def __post_init__(self):
        if self.poly.domain != COEFF:
            raise BFVError("plaintexts live in the coefficient domain")
        if self.poly.coeffs.max(initial=0) >= self.poly.params.t:
            raise BFVError("plaintext coefficient >= t")

    @classmethod
    def from_array(cls, params: RingParams, values) -> "Plaintext":
        vals = np.zeros(params.N, dtype=np.int64)
        src = np.asarray(values, dtype=np.int64)
        if src.size > params.N:
            raise BFVError("too many plaintext coefficients")
        vals[:src.size] = np.mod(src, params.t)
        return cls(RingElement(params, vals))

    @property
    def params(self) -> RingParams:
        return self.poly.params

    @property
    def coeffs(self) -> np.ndarray:
        return self.poly.coeffs

    def __eq__(self, other):
        return isinstance(other, Plaintext) and self.poly == other.poly


@dataclass(frozen=True, eq=False)
class Ciphertext:
    c0: RingElement
    c1: RingElement
    level: int = FRESH

    @property
    def params(self) -> RingParams:
        return self.c0.params

    def __eq__(self, other):
        return (isinstance(other, Ciphertext) and self.level == other.level
                and self.c0 == other.c0 and self.c1 == other.c1)

    def to_array(self) -> np.ndarray:
        return np.stack((self.c0.coeffs, self.c1.coeffs))

    @classmethod
    def from_array(cls, params: RingParams, arr, level: int = FRESH) -> "Ciphertext":
        return cls(RingElement(params, arr[0]), RingElement(params, arr[1]), level)


# -- scaling helpers ----------------------------------------------------------

def round_div(x, num: int, den: int) -> np.ndarray:
    """Exact ``round(num * x / den)`` (half rounds up) for non-negative int64 ``x``.

    Works whenever ``num * x / den`` is below 2**55; the float estimate is
    corrected with an exact wrapped-int64 residual.
    """
    x = np.asarray(x, dtype=np.int64)
    num64, den64 = np.int64(num), np.int64(den)
    k = np.floor(x.astype(np.float64) * (num / den) + 0.5).astype(np.int64)
    # residual = 2*num*x + den - 2*den*k  lies in [0, 2*den) for the right k
    r = 2 * num64 * x + den64 - 2 * den64 * k
    for _ in range(16):
        low, high = r < 0, r >= 2 * den64
        if not (low.any() or high.any()):
            return k
        k = k - low + high
        r = r + 2 * den64 * low - 2 * den64 * high
    raise ArithmeticError("round_div failed to converge")


def scale_message(params: RingParams, m) -> np.ndarray:
    """``round(q * m / t) mod q`` for residues ``m`` in ``[0, t)``."""
    return round_div(m, params.q, params.t) % params.q


def _lift_plain(params: RingParams, m) -> np.ndarray:
    """Centered lift of residues mod t into Z_q (keeps ``||p||`` small)."""
    return centered(m, params.t) % params.q


# -- key generation, encryption, decryption -----------------------------------

def keygen(params: RingParams, rng) -> tuple[PublicKey, SecretKey]:
    s = sample_secret(params, rng)
    a = sample_uniform(params, rng)
    e = sample_noise(params, rng)
    p0 = -(a * s + e)
    return PublicKey(p0, a), SecretKey(s)


def encrypt_array(pk: PublicKey, messages, rng) -> np.ndarray:
    """Encrypt a batch of plaintext coefficient rows; returns shape ``(R, 2, N)``."""
    params = pk.params
    q, n = params.q, params.N
    m = np.atleast_2d(np.asarray(messages, dtype=np.int64))
    if m.shape[-1] != n:
        raise BFVError(f"messages must have {n} coefficients")
    if m.size and (m.min() < 0 or m.max() >= params.t):
        raise BFVError("plaintext coefficient outside [0, t)")
    rows = m.shape[0]
    u = rng.integers(-1, 2, size=(rows, n)) % q
    e = discrete_gaussian(rng, params.sigma_noise, (rows, 2, n)) % q
    u_hat = ntt_array(params, u)
    pu = intt_array(params, mulmod(u_hat[:, None, :], pk.ntt[None, :, :], q))
    out = addmod(pu, e, q)
    out[:, 0, :] = addmod(out[:, 0, :], scale_message(params, m), q)
    return out


def decrypt_array(sk: SecretKey, cts) -> np.ndarray:
    """Decrypt a ``(R, 2, N)`` batch; returns residues mod t, shape ``(R, N)``."""
    params = sk.params
    q = params.q
    cts = np.asarray(cts, dtype=np.int64)
    s_hat = ntt_array(params, sk.s.coeffs)
    c1s = intt_array(params, mulmod(ntt_array(params, cts[:, 1, :]), s_hat, q))
    x = addmod(cts[:, 0, :], c1s, q)
    return round_div(x, params.t, q) % params.t


def encrypt(m: Plaintext, pk: PublicKey, rng) -> Ciphertext:
    if m.params != pk.params:
        raise BFVError("plaintext and key use different parameters")
    return Ciphertext.from_array(pk.params, encrypt_array(pk, m.coeffs[None, :], rng)[0])


def decrypt(ct: Ciphertext, sk: SecretKey) -> Plaintext:
    if ct.params != sk.params:
        raise BFVError("ciphertext and key use different parameters")
    return Plaintext(RingElement(ct.params, decrypt_array(sk, ct.to_array()[None])[0]))


def ct_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.params != b.params:
        raise BFVError("ciphertexts use different parameters")
    return Ciphertext(a.c0 + b.c0, a.c1 + b.c1, max(a.level, b.level))


def ct_pt_mul(a: Ciphertext, p: Plaintext) -> Ciphertext:
    if a.params != p.params:
        raise BFVError("ciphertext and plaintext use different parameters")
    if a.level != FRESH:
        raise LevelError("ciphertext was already multiplied by a plaintext")
    lifted = RingElement(a.params, _lift_plain(a.params, p.coeffs))
    return Ciphertext(a.c0 * lifted, a.c1 * lifted, MULTIPLIED)


def noise_infinity_norm(ct: Ciphertext, sk: SecretKey) -> int:
    """Diagnostic: ``||c0 + c1*s - round(q*m/t)||_inf`` for the decrypted m.

    Decryption is correct while this stays below roughly ``q / (2t)``.
    """
    params = sk.params
    x = (ct.c0 + ct.c1 * sk.s).coeffs
    m = decrypt(ct, sk).coeffs
    diff = submod(x, scale_message(params, m), params.q)
    return int(np.abs(centered(diff, params.q)).max())


def noise_budget_bits(ct: Ciphertext, sk: SecretKey) -> float:
    """log2 of the remaining headroom ``(q/2t) / noise``; negative means failure."""
    params = sk.params
    noise = max(noise_infinity_norm(ct, sk), 1)
    return float(np.log2(params.q / (2 * params.t) / noise))


# -- serialization --------------------------------------------------------------

def _header(magic: bytes, params: RingParams, level: int = 0) -> bytes:
    return _HEADER.pack(magic, WIRE_VERSION, level, params.N, params.q, params.t)


def _parse(data: bytes, magic: bytes, params: RingParams, n_polys: int):
    if len(data) < _HEADER.size:
        raise SerializationError("truncated header")
    got, version, level, n, q, t = _HEADER.unpack_from(data)
    if got != magic:
        raise SerializationError(f"bad magic {got!r}, expected {magic!r}")
    if version != WIRE_VERSION:
        raise SerializationError(f"unsupported wire version {version}")
    if params is not None and (n, q, t) != (params.N, params.q, params.t):
        raise SerializationError(
            f"parameters (N={n}, q={q}, t={t}) do not match session ({params.N}, {params.q}, {params.t})")
    expected = _HEADER.size + n_polys * n * 8
    if len(data) != expected:
        raise SerializationError(f"payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).astype(np.int64)
    if arr.max(initial=0) >= q:
        raise SerializationError("coefficient out of range")
    return level, arr.reshape(n_polys, n)


def ciphertext_size(params: RingParams) -> int:
    return _HEADER.size + 2 * params.N * 8


def packed_ciphertext_size(params: RingParams) -> int:
    """Theoretical size with coefficients bit-packed to ceil(log2 q) bits."""
    return _HEADER.size + (2 * params.N * params.q.bit_length() + 7) // 8


def serialize(ct: Ciphertext) -> bytes:
    return _header(MAGIC_CT, ct.params, ct.level) + ct.to_array().astype("<u8").tobytes()


def serialize_array(params: RingParams, arr, level: int = FRESH) -> bytes:
    return _header(MAGIC_CT, params, level) + np.asarray(arr).astype("<u8").tobytes()


def deserialize(data: bytes, params: RingParams) -> Ciphertext:
    level, arr = _parse(data, MAGIC_CT, params, 2)
    if level not in (FRESH, MULTIPLIED):
        raise SerializationError(f"bad level flag {level}")
    return Ciphertext.from_array(params, arr, level)


def serialize_public_key(pk: PublicKey) -> bytes:
    return (_header(MAGIC_PK, pk.params)
            + np.stack((pk.p0.coeffs, pk.p1.coeffs)).astype("<u8").tobytes())


def deserialize_public_key(data: bytes, params: RingParams) -> PublicKey:
    _, arr = _parse(data, MAGIC_PK, params, 2)
    return PublicKey(RingElement(params, arr[0]), RingElement(params, arr[1]))


def serialize_secret_key(sk: SecretKey) -> bytes:
    return _header(MAGIC_SK, sk.params) + sk.s.coeffs.astype("<u8").tobytes()


def deserialize_secret_key(data: bytes, params: RingParams) -> SecretKey:
    _, arr = _parse(data, MAGIC_SK, params, 1)
    return SecretKey(RingElement(params, arr[0]))


def read_params(data: bytes) -> tuple[int, int, int]:
    """``(N, q, t)`` from any serialized ciphertext or key header."""
    if len(data) < _HEADER.size:
        raise SerializationError("truncated header")
    _, _, _, n, q, t = _HEADER.unpack_from(data)
    return n, q, t


__all__ = [
    "BFVError", "Ciphertext", "FRESH", "LevelError", "MULTIPLIED", "Plaintext",
    "PublicKey", "RingError", "SecretKey", "SerializationError", "ciphertext_size",
    "ct_add", "ct_pt_mul", "decrypt", "decrypt_array", "deserialize",
    "deserialize_public_key", "deserialize_secret_key", "encrypt", "encrypt_array",
    "keygen", "noise_budget_bits", "noise_infinity_norm", "packed_ciphertext_size",
    "read_params", "round_div", "scale_message", "serialize", "serialize_array",
    "serialize_public_key", "serialize_secret_key",
]
