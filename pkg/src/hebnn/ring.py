"""Exact arithmetic in the negacyclic ring Z_q[X]/(X^N + 1).

Coefficients are stored as ``int64`` numpy arrays with values in ``[0, q)``.
Products of two residues do not fit in 64 bits, so :func:`mulmod` estimates
the quotient in floating point and recovers the exact remainder with
wrapping integer arithmetic. This is exact as long as ``q < 2**55``.

The array-level helpers (``mulmod``, ``ntt_array``, ``intt_array``) operate on
the last axis and are what the encryption layer uses for batched work;
:class:`RingElement` and the ``poly_*`` functions are the checked public
surface.
"""

from __future__ import annotations

import functools
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

MAX_MODULUS_BITS = 55


class RingError(ValueError):
    """Parameter or domain mismatch between ring operands."""


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    # deterministic for n < 3.3e24
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _bit_reverse(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


def _primitive_root_2n(n: int, q: int) -> int:
    """Smallest psi with psi^n == -1 (mod q), i.e. a primitive 2n-th root of unity."""
    exp = (q - 1) // (2 * n)
    for g in range(2, q):
        psi = pow(g, exp, q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise RingError(f"no primitive {2 * n}-th root of unity mod {q}")


@dataclass(frozen=True)
class RingParams:
    """Ring degree, moduli and noise width shared by every element of a session.

    ``N`` must be a power of two, ``q`` a prime with ``q = 1 (mod 2N)`` and
    ``t`` a prime plaintext modulus below ``q``.
    """

    N: int
    q: int
    t: int
    sigma_noise: float = 4.0
    name: str = "custom"

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1):
            raise RingError(f"N must be a power of two, got {self.N}")
        if not _is_prime(self.q):
            raise RingError(f"q={self.q} is not prime")
        if self.q.bit_length() > MAX_MODULUS_BITS:
            raise RingError(f"q must fit in {MAX_MODULUS_BITS} bits")
        if (self.q - 1) % (2 * self.N):
            raise RingError("q must be 1 mod 2N for the negacyclic NTT")
        if not _is_prime(self.t) or self.t >= self.q:
            raise RingError(f"t={self.t} must be a prime below q")
        if self.q // self.t < 2:
            raise RingError("delta_q = floor(q/t) must be at least 2")
        if self.sigma_noise <= 0:
            raise RingError("sigma_noise must be positive")

    @property
    def delta_q(self) -> int:
        return self.q // self.t

    @property
    def log_n(self) -> int:
        return self.N.bit_length() - 1

    @functools.cached_property
    def psi(self) -> int:
        return _primitive_root_2n(self.N, self.q)

    @functools.cached_property
    def _tables(self):
        n, q, bits = self.N, self.q, self.log_n
        psi_inv = pow(self.psi, q - 2, q)
        fwd = np.empty(n, dtype=np.int64)
        inv = np.empty(n, dtype=np.int64)
        for i in range(n):
            r = _bit_reverse(i, bits)
            fwd[i] = pow(self.psi, r, q)
            inv[i] = pow(psi_inv, r, q)
        for arr in (fwd, inv):
            arr.setflags(write=False)
        return fwd, inv, pow(n, q - 2, q)

    @property
    def psi_rev(self) -> np.ndarray:
        """Powers of psi in bit-reversed order (forward twiddles)."""
        return self._tables[0]

    @property
    def psi_inv_rev(self) -> np.ndarray:
        return self._tables[1]

    @property
    def n_inv(self) -> int:
        return self._tables[2]

    def describe(self) -> dict:
        return {"name": self.name, "N": self.N, "q": self.q, "t": self.t,
                "sigma_noise": self.sigma_noise}


def smallest_ntt_prime(lower: int, n: int) -> int:
    """Smallest prime above ``lower`` that is congruent to 1 mod 2n."""
    step = 2 * n
    p = lower + 1
    p += (1 - p) % step
    while not _is_prime(p):
        p += step
    return p


#: q used by common 128-bit parameter tables for N = 2048 (2^54 - 2^24 + 1).
DEFAULT_Q = 0x3FFFFFFF000001
DEFAULT_T = smallest_ntt_prime(2**19, 2048)

PRESETS = {
    "default": RingParams(N=2048, q=DEFAULT_Q, t=DEFAULT_T, sigma_noise=4.0, name="default"),
    # small ring for fast tests and demos; not secure
    "toy": RingParams(N=64, q=smallest_ntt_prime(2**53, 64), t=smallest_ntt_prime(2**16, 64),
                      sigma_noise=3.2, name="toy"),
}


def get_preset(name: str) -> RingParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise RingError(f"unknown ring preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- array kernels ------------------------------------------------------------

def mulmod(a, b, q: int, b_over_q=None) -> np.ndarray:
    """Exact ``a * b mod q`` for int64 arrays with entries in ``[0, q)``.

    The float quotient estimate is off by at most a few units, so the wrapped
    int64 remainder ``a*b - k*q`` is the true (small) value.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if b_over_q is None:
        b_over_q = b.astype(np.float64) / q
    k = np.floor(a.astype(np.float64) * b_over_q).astype(np.int64)
    r = a * b - k * np.int64(q)
    return r % q


def addmod(a, b, q: int) -> np.ndarray:
    r = np.add(a, b, dtype=np.int64)
    r -= q
    r += (r >> 63) & q
    return r


def submod(a, b, q: int) -> np.ndarray:
    r = np.subtract(a, b, dtype=np.int64)
    r += (r >> 63) & q
    return r


def ntt_array(params: RingParams, a) -> np.ndarray:
    """Negacyclic forward NTT along the last axis (natural in, bit-reversed out)."""
    n, q = params.N, params.q
    x = np.array(a, dtype=np.int64, copy=True)
    lead = x.shape[:-1]
    tw = params.psi_rev
    tw_q = tw.astype(np.float64) / q
    m, half = 1, n
    while m < n:
        half //= 2
        x = x.reshape(*lead, m, 2, half)
        w = tw[m:2 * m, None]
        wq = tw_q[m:2 * m, None]
        u = x[..., 0, :]
        v = mulmod(x[..., 1, :], w, q, wq)
        x = np.stack((addmod(u, v, q), submod(u, v, q)), axis=-2)
        m *= 2
    return x.reshape(*lead, n)


def intt_array(params: RingParams, a) -> np.ndarray:
    """Inverse of :func:`ntt_array` (bit-reversed in, natural out)."""
    n, q = params.N, params.q
    x = np.array(a, dtype=np.int64, copy=True)
    lead = x.shape[:-1]
    tw = params.psi_inv_rev
    tw_q = tw.astype(np.float64) / q
    m, span = n, 1
    while m > 1:
        h = m // 2
        x = x.reshape(*lead, h, 2, span)
        w = tw[h:2 * h, None]
        wq = tw_q[h:2 * h, None]
        u = x[..., 0, :]
        v = x[..., 1, :]
        x = np.stack((addmod(u, v, q), mulmod(submod(u, v, q), w, q, wq)), axis=-2)
        span *= 2
        m = h
    x = x.reshape(*lead, n)
    return mulmod(x, np.int64(params.n_inv), q)


def negacyclic_mul_array(params: RingParams, a, b) -> np.ndarray:
    """Coefficient-domain ring product via NTT; broadcasts over leading axes."""
    fa, fb = ntt_array(params, a), ntt_array(params, b)
    return intt_array(params, mulmod(fa, fb, params.q))


def centered(a, modulus: int) -> np.ndarray:
    """Map residues in ``[0, modulus)`` to ``[-modulus/2, modulus/2)``."""
    a = np.asarray(a, dtype=np.int64)
    return np.where(a >= (modulus + 1) // 2, a - modulus, a)


# -- ring elements ------------------------------------------------------------

COEFF = "coeff"
NTT = "ntt"


class RingElement:
    """An element of Z_q[X]/(X^N+1) in coefficient or NTT representation."""

    __slots__ = ("params", "coeffs", "domain")

    def __init__(self, params: RingParams, coeffs, domain: str = COEFF):
        arr = np.asarray(coeffs, dtype=np.int64)
        if arr.shape != (params.N,):
            raise RingError(f"expected {params.N} coefficients, got shape {arr.shape}")
        if domain not in (COEFF, NTT):
            raise RingError(f"unknown domain {domain!r}")
        if arr.size and (arr.min() < 0 or arr.max() >= params.q):
            arr = arr % params.q
        arr = arr.copy()
        arr.setflags(write=False)
        self.params = params
        self.coeffs = arr
        self.domain = domain

    @classmethod
    def from_ints(cls, params: RingParams, values) -> "RingElement":
        """Build from arbitrary (possibly negative or short) integer coefficients."""
        vals = [int(v) % params.q for v in values]
        if len(vals) > params.N:
            raise RingError("too many coefficients")
        vals += [0] * (params.N - len(vals))
        return cls(params, np.array(vals, dtype=np.int64))

    @classmethod
    def zero(cls, params: RingParams) -> "RingElement":
        return cls(params, np.zeros(params.N, dtype=np.int64))

    @classmethod
    def monomial(cls, params: RingParams, degree: int, coeff: int = 1) -> "RingElement":
        c = np.zeros(params.N, dtype=np.int64)
        sign = -1 if (degree // params.N) % 2 else 1
        c[degree % params.N] = (sign * coeff) % params.q
        return cls(params, c)

    def __eq__(self, other):
        if not isinstance(other, RingElement):
            return NotImplemented
        return (self.params == other.params and self.domain == other.domain
                and np.array_equal(self.coeffs, other.coeffs))

    def __hash__(self):
        return hash((self.params, self.domain, self.coeffs.tobytes()))

    def __repr__(self):
        head = ", ".join(str(int(c)) for c in self.coeffs[:4])
        return f"RingElement(N={self.params.N}, {self.domain}, [{head}, ...])"

    def __add__(self, other):
        return poly_add(self, other)

    def __sub__(self, other):
        return poly_sub(self, other)

    def __neg__(self):
        return poly_neg(self)

    def __mul__(self, other):
        return poly_mul(self, other)

    def to_bytes(self) -> bytes:
        """``<N:u32><q:u64><domain:u8>`` followed by N little-endian u64 coefficients."""
        flag = 1 if self.domain == NTT else 0
        return (struct.pack("<IQB", self.params.N, self.params.q, flag)
                + self.coeffs.astype("<u8").tobytes())

    @classmethod
    def from_bytes(cls, params: RingParams, data: bytes) -> "RingElement":
        head = struct.calcsize("<IQB")
        if len(data) < head:
            raise RingError("truncated ring element header")
        n, q, flag = struct.unpack_from("<IQB", data)
        if (n, q) != (params.N, params.q):
            raise RingError(f"ring element is for (N={n}, q={q}), expected ({params.N}, {params.q})")
        if flag not in (0, 1):
            raise RingError(f"bad domain flag {flag}")
        if len(data) != head + 8 * n:
            raise RingError(f"ring element payload has {len(data) - head} bytes, expected {8 * n}")
        coeffs = np.frombuffer(data, dtype="<u8", offset=head).astype(np.int64)
        if coeffs.max(initial=0) >= q:
            raise RingError("coefficient out of range")
        return cls(params, coeffs, NTT if flag else COEFF)


def _check_pair(a: RingElement, b: RingElement):
    if a.params != b.params:
        raise RingError("operands belong to different rings")
    if a.domain != b.domain:
        raise RingError(f"cannot mix {a.domain} and {b.domain} operands")


def poly_add(a: RingElement, b: RingElement) -> RingElement:
    _check_pair(a, b)
    return RingElement(a.params, addmod(a.coeffs, b.coeffs, a.params.q), a.domain)


def poly_sub(a: RingElement, b: RingElement) -> RingElement:
    _check_pair(a, b)
    return RingElement(a.params, submod(a.coeffs, b.coeffs, a.params.q), a.domain)


def poly_neg(a: RingElement) -> RingElement:
    return RingElement(a.params, submod(np.zeros_like(a.coeffs), a.coeffs, a.params.q), a.domain)


def poly_scalar_mul(a: RingElement, c: int) -> RingElement:
    q = a.params.q
    return RingElement(a.params, mulmod(a.coeffs, np.int64(int(c) % q), q), a.domain)


def poly_mul(a: RingElement, b: RingElement) -> RingElement:
    """Ring product. Coefficient-domain inputs go through the NTT and come back;
    NTT-domain inputs are multiplied pointwise and stay in the NTT domain."""
    _check_pair(a, b)
    p = a.params
    if a.domain == NTT:
        return RingElement(p, mulmod(a.coeffs, b.coeffs, p.q), NTT)
    return RingElement(p, negacyclic_mul_array(p, a.coeffs, b.coeffs))


def ntt_forward(a: RingElement) -> RingElement:
    if a.domain != COEFF:
        raise RingError("ntt_forward expects a coefficient-domain element")
    return RingElement(a.params, ntt_array(a.params, a.coeffs), NTT)


def ntt_inverse(a: RingElement) -> RingElement:
    if a.domain != NTT:
        raise RingError("ntt_inverse expects an NTT-domain element")
    return RingElement(a.params, intt_array(a.params, a.coeffs), COEFF)


# -- randomness ---------------------------------------------------------------

class SecureRng:
    """OS-entropy backed generator exposing the subset of the numpy Generator
    API the samplers use (``integers``, ``random`` and ``standard_normal``)."""

    def _u64(self, count: int) -> np.ndarray:
        return np.frombuffer(os.urandom(8 * count), dtype="<u8").astype(np.uint64)

    def integers(self, low, high=None, size=None):
        if high is None:
            low, high = 0, low
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError("high must exceed low")
        count = 1 if size is None else int(np.prod(size))
        bits = (span - 1).bit_length()
        mask = np.uint64((1 << bits) - 1) if bits < 64 else np.uint64(2**64 - 1)
        out = np.empty(0, dtype=np.uint64)
        while out.size < count:
            draw = self._u64(max(2 * (count - out.size), 16)) & mask
            out = np.concatenate((out, draw[draw < np.uint64(span)]))
        vals = out[:count].astype(np.int64) + int(low)
        return int(vals[0]) if size is None else vals.reshape(size)

    def random(self, size=None):
        count = 1 if size is None else int(np.prod(size))
        vals = (self._u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(vals[0]) if size is None else vals.reshape(size)

    def standard_normal(self, size=None):
        """Inverse-CDF transform of open-interval uniforms."""
        count = 1 if size is None else int(np.prod(size))
        u = ((self._u64(count) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        vals = ndtri(u)
        return float(vals[0]) if size is None else vals.reshape(size)


def make_rng(seed=None):
    """Deterministic numpy generator when seeded, OS-entropy generator otherwise."""
    if seed is None:
        return SecureRng()
    return np.random.default_rng(seed)


@functools.lru_cache(maxsize=16)
def _gaussian_cdt(sigma: float):
    bound = int(np.ceil(12 * sigma))
    k = np.arange(-bound, bound + 1)
    w = np.exp(-(k.astype(np.float64) ** 2) / (2 * sigma * sigma))
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    return k, cdf


def discrete_gaussian(rng, sigma: float, size) -> np.ndarray:
    """Centered discrete Gaussian samples (table inversion, tail cut at 12 sigma)."""
    k, cdf = _gaussian_cdt(float(sigma))
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return k[np.minimum(idx, k.size - 1)]


def sample_uniform(params: RingParams, rng) -> RingElement:
    return RingElement(params, rng.integers(0, params.q, size=params.N))


def sample_noise(params: RingParams, rng) -> RingElement:
    e = discrete_gaussian(rng, params.sigma_noise, params.N)
    return RingElement(params, e % params.q)


def sample_secret(params: RingParams, rng) -> RingElement:
    s = rng.integers(-1, 2, size=params.N)
    return RingElement(params, s % params.q)
