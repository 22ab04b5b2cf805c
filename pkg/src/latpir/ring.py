"""Exact negacyclic polynomial arithmetic over a residue number system.

Everything downstream computes in R_Q = Z_Q[X]/(X^n + 1) where Q is a product
of small NTT-friendly primes q_i (q_i = 1 mod 2n).  A polynomial is stored as
k limbs: limb i is the length-n vector of its coefficients reduced mod q_i.
The forward transform maps limb i to the evaluations of the polynomial at the
odd powers of a primitive 2n-th root of unity psi_i, in natural order:

    ntt(a)[j] = a(psi_i ** (2j + 1))   for j in [0, n)

so that point-wise products in the transformed domain correspond to negacyclic
convolution of coefficients.  All residues are kept canonical in [0, q_i).

Array-level kernels (``ntt_raw`` etc.) operate on uint64 arrays of shape
(..., k, n) so callers can batch many polynomials into one call; ``RnsPoly``
is the single-polynomial value type used at module boundaries.
"""
from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, InvalidState

U64 = np.uint64
_MASK16 = np.uint64(0xFFFF)

# Optional JIT fast path for the transforms.  The numpy implementation stays
# as the reference; both are exercised by the tests and must agree bit-exactly.
if os.environ.get("LATPIR_NO_NUMBA"):
    _numba = None
else:
    try:
        import numba as _numba
    except ImportError:  # pragma: no cover - environment without numba
        _numba = None


class Domain(Enum):
    COEFF = "coeff"
    NTT = "ntt"


# ---------------------------------------------------------------------------
# primes and roots


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for anything we generate (< 2**64)."""
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_two_n_root(q: int, two_n: int) -> int:
    """Smallest generator-derived element of exact multiplicative order 2n mod q."""
    if (q - 1) % two_n != 0:
        raise InvalidArgument(f"q={q} is not 1 mod {two_n}")
    cofactor = (q - 1) // two_n
    for g in range(2, q):
        r = pow(g, cofactor, q)
        # order divides 2n (a power of two); r**n == -1 forces order exactly 2n
        if pow(r, two_n // 2, q) == q - 1:
            return r
    raise InvalidArgument(f"no 2n-th root found mod {q}")


@dataclass(frozen=True)
class Modulus:
    """One RNS prime together with its primitive 2n-th root of unity.

    Reduction constants beyond the root are not needed: arithmetic is done in
    64-bit numpy lanes where a plain ``%`` is exact for q < 2**31.
    """

    q: int
    two_n_root: int


def _int_to_u16_words(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (16 * w)) & 0xFFFF for w in range(width)], dtype=U64)


def _int_to_u64_pair(value: int) -> tuple[np.uint64, np.uint64]:
    return np.uint64(value & 0xFFFFFFFFFFFFFFFF), np.uint64(value >> 64)


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class RnsBasis:
    """An ordered set of RNS primes for ring degree n, with transform tables.

    Tables are stacked across limbs so the array kernels below vectorize over
    the limb axis; they are read-only after construction.
    """

    def __init__(self, n: int, moduli: Sequence[Modulus]):
        if n < 2 or n & (n - 1):
            raise InvalidArgument(f"ring degree must be a power of two >= 2, got {n}")
        if not moduli:
            raise InvalidArgument("need at least one modulus")
        qs = [m.q for m in moduli]
        if len(set(qs)) != len(qs):
            raise InvalidArgument("RNS primes must be pairwise distinct")
        for m in moduli:
            if not is_prime(m.q):
                raise InvalidArgument(f"{m.q} is not prime")
            if m.q.bit_length() > 31:
                raise InvalidArgument(f"{m.q} does not fit the 32-bit limb contract")
            if (m.q - 1) % (2 * n) != 0:
                raise InvalidArgument(f"{m.q} is not NTT-friendly for n={n}")
            if pow(m.two_n_root, n, m.q) != m.q - 1 or pow(m.two_n_root, 2 * n, m.q) != 1:
                raise InvalidArgument(f"root {m.two_n_root} does not have order {2*n} mod {m.q}")

        self.n = n
        self.moduli = tuple(moduli)
        self.k = len(moduli)
        self.big_q = math.prod(qs)
        if (self.k * self.big_q).bit_length() > 128:
            # CRT reconstruction keeps coefficients in two 64-bit words
            raise InvalidArgument("k * Q must fit 128 bits")
        self.q_arr = np.array(qs, dtype=U64)
        self.q_col = self.q_arr[:, None]
        self._build_ntt_tables()
        self._build_crt_tables()

    # -- transform tables ---------------------------------------------------

    def _build_ntt_tables(self) -> None:
        n, k = self.n, self.k
        two_n = 2 * n
        psi_pows = np.empty((k, two_n), dtype=U64)
        for i, m in enumerate(self.moduli):
            acc, row = 1, []
            for _ in range(two_n):
                row.append(acc)
                acc = acc * m.two_n_root % m.q
            psi_pows[i] = row
        self.psi_pows = psi_pows
        self.fwd_twist = np.ascontiguousarray(psi_pows[:, :n])

        stages = n.bit_length() - 1
        self.fwd_twiddles: list[np.ndarray] = []
        self.inv_twiddles: list[np.ndarray] = []
        for s in range(stages):
            half = 1 << s
            step = n // (2 * half)
            # omega = psi**2, so omega**(step*t) = psi_pows[2*step*t]
            exps = (2 * step * np.arange(half)) % two_n
            self.fwd_twiddles.append(np.ascontiguousarray(psi_pows[:, exps])[:, None, :])
            inv_exps = (two_n - exps) % two_n
            self.inv_twiddles.append(np.ascontiguousarray(psi_pows[:, inv_exps])[:, None, :])

        inv_scale = np.empty((k, n), dtype=U64)
        for i, m in enumerate(self.moduli):
            n_inv = pow(n, m.q - 2, m.q)
            inv_exps = (two_n - np.arange(n)) % two_n
            inv_scale[i] = (psi_pows[i, inv_exps].astype(object) * n_inv % m.q).astype(U64)
        self.inv_scale = inv_scale
        self.bitrev = _bit_reverse_indices(n)

        # flat per-limb twiddle tables (stages concatenated) for the JIT kernels
        self.tw_fwd = np.concatenate([t[:, 0, :] for t in self.fwd_twiddles], axis=1)
        self.tw_inv = np.concatenate([t[:, 0, :] for t in self.inv_twiddles], axis=1)

        def shoup(table: np.ndarray) -> np.ndarray:
            out = np.empty_like(table)
            for i, m in enumerate(self.moduli):
                out[i] = (table[i].astype(object) * (1 << 32) // m.q).astype(U64)
            return out

        self.tw_fwd_shoup = shoup(self.tw_fwd)
        self.tw_inv_shoup = shoup(self.tw_inv)
        self.fwd_twist_shoup = shoup(self.fwd_twist)
        self.inv_scale_shoup = shoup(self.inv_scale)
        # lazy butterflies let values grow by 2q per stage; guard 64-bit products
        stages = n.bit_length() - 1
        self.jit_ok = _numba is not None and int(self.q_arr.max()) * (2 * stages + 1) < (1 << 32)

    # -- CRT tables ----------------------------------------------------------

    def _build_crt_tables(self) -> None:
        k, big_q = self.k, self.big_q
        self.crt_m = [big_q // m.q for m in self.moduli]
        self.crt_mhat = np.array(
            [pow(mi % m.q, m.q - 2, m.q) for mi, m in zip(self.crt_m, self.moduli)],
            dtype=U64,
        )[:, None]
        # 16-bit words keep products y_i * word < 2**47, safe to sum across limbs
        self.crt_words_width = ((k * big_q).bit_length() + 15) // 16 + 1
        self.crt_m_words = np.stack(
            [_int_to_u16_words(mi, self.crt_words_width) for mi in self.crt_m]
        )
        self.q_pair = _int_to_u64_pair(big_q)
        reducers = []
        t = 1
        while t < k:
            t *= 2
        while t >= 1:
            reducers.append(_int_to_u64_pair(t * big_q))
            t //= 2
        self.crt_reducers = reducers  # descending multiples of Q, ending at 1*Q
        self.half_q_pair = _int_to_u64_pair((big_q - 1) // 2)

    # -- misc ----------------------------------------------------------------

    @classmethod
    def generate(cls, n: int, k: int, bits: int = 27) -> "RnsBasis":
        """Deterministically pick the k largest NTT-friendly primes below 2**bits."""
        if bits > 31:
            raise InvalidArgument("primes must fit 32-bit storage")
        two_n = 2 * n
        moduli = []
        c = ((1 << bits) - 2) // two_n
        while len(moduli) < k and c > 0:
            q = c * two_n + 1
            if q.bit_length() <= bits and is_prime(q):
                moduli.append(Modulus(q, find_two_n_root(q, two_n)))
            c -= 1
        if len(moduli) < k:
            raise InvalidArgument(f"not enough {bits}-bit NTT primes for n={n}")
        return cls(n, moduli)

    def __repr__(self) -> str:
        return f"RnsBasis(n={self.n}, k={self.k}, Q~2^{self.big_q.bit_length() - 1})"


@lru_cache(maxsize=None)
def default_basis(n: int = 4096) -> RnsBasis:
    """Default production basis: four ~27-bit primes, Q close to 2**108."""
    return RnsBasis.generate(n, 4, bits=27)


# ---------------------------------------------------------------------------
# the polynomial value type


@dataclass
class RnsPoly:
    """A ring element: k x n matrix of canonical residues plus a domain flag.

    Treated as immutable by convention; operations return fresh values.
    """

    basis: RnsBasis
    limbs: np.ndarray  # uint64, shape (k, n)
    domain: Domain

    def __post_init__(self):
        if self.limbs.shape != (self.basis.k, self.basis.n):
            raise InvalidArgument(
                f"limb matrix {self.limbs.shape} does not match basis "
                f"({self.basis.k}, {self.basis.n})"
            )
        if self.limbs.dtype != U64:
            self.limbs = self.limbs.astype(U64)

    @property
    def n(self) -> int:
        return self.basis.n

    def copy(self) -> "RnsPoly":
        return RnsPoly(self.basis, self.limbs.copy(), self.domain)


def zero_poly(basis: RnsBasis, domain: Domain = Domain.COEFF) -> RnsPoly:
    return RnsPoly(basis, np.zeros((basis.k, basis.n), dtype=U64), domain)


# ---------------------------------------------------------------------------
# array kernels (leading batch axes allowed everywhere)


def mod_add(x: np.ndarray, y: np.ndarray, q_col: np.ndarray) -> np.ndarray:
    return (x + y) % q_col


def mod_sub(x: np.ndarray, y: np.ndarray, q_col: np.ndarray) -> np.ndarray:
    return (x + q_col - y) % q_col


def mod_mul(x: np.ndarray, y: np.ndarray, q_col: np.ndarray) -> np.ndarray:
    return x * y % q_col


if _numba is not None:

    @_numba.njit(parallel=True, cache=True, nogil=True)
    def _ntt_rows_jit(rows, k, bitrev, twist, twist_sh, tw, tw_sh, qs, inverse):
        """Per-row cache-resident transform with Shoup multiplication.

        Lazy reduction: butterfly outputs grow by at most 2q per stage and are
        reduced once at the end, so q * (2*log2(n) + 1) must fit 32 bits.
        """
        n = rows.shape[1]
        out = np.empty_like(rows)
        for r in _numba.prange(rows.shape[0]):
            limb = r % k
            q = qs[limb]
            two_q = 2 * q
            buf = np.empty(n, dtype=np.uint64)
            if inverse:
                for i in range(n):
                    buf[i] = rows[r, bitrev[i]]
            else:
                for i in range(n):
                    src = bitrev[i]
                    v = rows[r, src]
                    w = twist[limb, src]
                    hi = (v * twist_sh[limb, src]) >> 32
                    t = v * w - hi * q
                    if t >= q:
                        t -= q
                    buf[i] = t
            off = 0
            half = 1
            while half < n:
                for blk in range(0, n, 2 * half):
                    for j in range(half):
                        w = tw[limb, off + j]
                        wsh = tw_sh[limb, off + j]
                        u = buf[blk + j]
                        v = buf[blk + half + j]
                        hi = (v * wsh) >> 32
                        t = v * w - hi * q  # in [0, 2q)
                        buf[blk + j] = u + t
                        buf[blk + half + j] = u + two_q - t
                off += half
                half *= 2
            if inverse:
                for i in range(n):
                    v = buf[i]
                    w = twist[limb, i]
                    hi = (v * twist_sh[limb, i]) >> 32
                    t = v * w - hi * q
                    if t >= q:
                        t -= q
                    out[r, i] = t
            else:
                for i in range(n):
                    out[r, i] = buf[i] % q
        return out


_jit_lock = threading.Lock()
_jit_layer_checked = False
_jit_needs_lock = False


def _transform_jit(x: np.ndarray, basis: RnsBasis, inverse: bool) -> np.ndarray:
    global _jit_layer_checked, _jit_needs_lock
    rows = np.ascontiguousarray(x).reshape(-1, basis.n)
    if inverse:
        twist, twist_sh = basis.inv_scale, basis.inv_scale_shoup
        tw, tw_sh = basis.tw_inv, basis.tw_inv_shoup
    else:
        twist, twist_sh = basis.fwd_twist, basis.fwd_twist_shoup
        tw, tw_sh = basis.tw_fwd, basis.tw_fwd_shoup
    args = (rows, basis.k, basis.bitrev, twist, twist_sh, tw, tw_sh, basis.q_arr, inverse)
    if not _jit_layer_checked:
        # the workqueue threading layer is not re-entrant; callers may be
        # concurrent worker threads, so detect the layer once and lock if needed
        with _jit_lock:
            out = _ntt_rows_jit(*args)
            if not _jit_layer_checked:
                _jit_needs_lock = _numba.threading_layer() == "workqueue"
                _jit_layer_checked = True
    elif _jit_needs_lock:
        with _jit_lock:
            out = _ntt_rows_jit(*args)
    else:
        out = _ntt_rows_jit(*args)
    return out.reshape(x.shape)


def ntt_raw(x: np.ndarray, basis: RnsBasis) -> np.ndarray:
    """Forward negacyclic NTT on uint64 arrays of shape (..., k, n)."""
    if basis.jit_ok:
        return _transform_jit(x, basis, inverse=False)
    q = basis.q_col
    y = x * basis.fwd_twist % q
    y = np.ascontiguousarray(y[..., basis.bitrev])
    n = basis.n
    for s, tw in enumerate(basis.fwd_twiddles):
        half = 1 << s
        blk = y.reshape(y.shape[:-1] + (n // (2 * half), 2 * half))
        u = blk[..., :half]
        v = blk[..., half:]
        qq = q[..., None]
        t = v * tw % qq
        # operands are canonical, so sums sit in [0, 2q): one conditional subtract
        u_new = u + t
        u_new -= qq * (u_new >= qq)
        v_new = u + qq - t
        v_new -= qq * (v_new >= qq)
        blk[..., :half] = u_new
        blk[..., half:] = v_new
    return y


def intt_raw(x: np.ndarray, basis: RnsBasis) -> np.ndarray:
    """Inverse of :func:`ntt_raw`, bit-exact."""
    if basis.jit_ok:
        return _transform_jit(x, basis, inverse=True)
    q = basis.q_col
    y = np.ascontiguousarray(x[..., basis.bitrev])
    n = basis.n
    for s, tw in enumerate(basis.inv_twiddles):
        half = 1 << s
        blk = y.reshape(y.shape[:-1] + (n // (2 * half), 2 * half))
        u = blk[..., :half]
        v = blk[..., half:]
        qq = q[..., None]
        t = v * tw % qq
        u_new = u + t
        u_new -= qq * (u_new >= qq)
        v_new = u + qq - t
        v_new -= qq * (v_new >= qq)
        blk[..., :half] = u_new
        blk[..., half:] = v_new
    return y * basis.inv_scale % q


def crt_to_words(x: np.ndarray, basis: RnsBasis) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-coefficient centered CRT combine into sign/magnitude 128-bit words.

    Input: residues of shape (..., k, n).  Output: (negative, lo, hi) where the
    reconstructed centered coefficient is (-1)^negative * (hi*2**64 + lo) and
    the magnitude is at most (Q-1)/2.
    """
    y = x * basis.crt_mhat % basis.q_col  # (..., k, n)
    width = basis.crt_words_width
    acc = np.zeros(y.shape[:-2] + (width, y.shape[-1]), dtype=U64)
    for i in range(basis.k):
        acc += y[..., i, None, :] * basis.crt_m_words[i][:, None]
    carry = np.zeros_like(acc[..., 0, :])
    for w in range(width):
        cur = acc[..., w, :] + carry
        acc[..., w, :] = cur & _MASK16
        carry = cur >> np.uint64(16)
    lo = (
        acc[..., 0, :]
        | (acc[..., 1, :] << np.uint64(16))
        | (acc[..., 2, :] << np.uint64(32))
        | (acc[..., 3, :] << np.uint64(48))
    )
    hi = np.zeros_like(lo)
    for w in range(4, min(width, 8)):  # words past bit 128 are zero by the k*Q bound
        hi |= acc[..., w, :] << np.uint64(16 * (w - 4))

    for t_lo, t_hi in basis.crt_reducers:
        ge = (hi > t_hi) | ((hi == t_hi) & (lo >= t_lo))
        borrow = (lo < t_lo) & ge
        lo = np.where(ge, lo - t_lo, lo)
        hi = np.where(ge, hi - t_hi - borrow.astype(U64), hi)

    h_lo, h_hi = basis.half_q_pair
    negative = (hi > h_hi) | ((hi == h_hi) & (lo > h_lo))
    q_lo, q_hi = basis.q_pair
    borrow = (q_lo < lo) & negative
    mag_lo = np.where(negative, q_lo - lo, lo)
    mag_hi = np.where(negative, q_hi - hi - borrow.astype(U64), hi)
    return negative, mag_lo, mag_hi


# ---------------------------------------------------------------------------
# public operations


def _require_domain(p: RnsPoly, domain: Domain, op: str) -> None:
    if p.domain is not domain:
        raise InvalidState(f"{op} requires a {domain.value}-domain polynomial, got {p.domain.value}")


def _require_same(a: RnsPoly, b: RnsPoly, op: str) -> None:
    if a.basis is not b.basis and (
        a.basis.n != b.basis.n or [m.q for m in a.basis.moduli] != [m.q for m in b.basis.moduli]
    ):
        raise InvalidArgument(f"{op}: operands use different bases")
    if a.domain is not b.domain:
        raise InvalidArgument(f"{op}: operands are in different domains")


def ntt_forward(p: RnsPoly) -> RnsPoly:
    """Limb-wise forward NTT; flips the domain flag."""
    _require_domain(p, Domain.COEFF, "ntt_forward")
    return RnsPoly(p.basis, ntt_raw(p.limbs, p.basis), Domain.NTT)


def ntt_inverse(p: RnsPoly) -> RnsPoly:
    """Exact inverse of :func:`ntt_forward`."""
    _require_domain(p, Domain.NTT, "ntt_inverse")
    return RnsPoly(p.basis, intt_raw(p.limbs, p.basis), Domain.COEFF)


def poly_add(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _require_same(a, b, "poly_add")
    return RnsPoly(a.basis, mod_add(a.limbs, b.limbs, a.basis.q_col), a.domain)


def poly_sub(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _require_same(a, b, "poly_sub")
    return RnsPoly(a.basis, mod_sub(a.limbs, b.limbs, a.basis.q_col), a.domain)


def poly_neg(a: RnsPoly) -> RnsPoly:
    return RnsPoly(a.basis, (a.basis.q_col - a.limbs) % a.basis.q_col, a.domain)


def poly_pointwise_mul(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    """Element-wise product per limb; both operands must be in the NTT domain."""
    _require_domain(a, Domain.NTT, "poly_pointwise_mul")
    _require_domain(b, Domain.NTT, "poly_pointwise_mul")
    _require_same(a, b, "poly_pointwise_mul")
    return RnsPoly(a.basis, mod_mul(a.limbs, b.limbs, a.basis.q_col), Domain.NTT)


def negacyclic_convolve_naive(a: Sequence[int], b: Sequence[int], q: int | Modulus) -> list[int]:
    """O(n^2) schoolbook product mod (X^n + 1): the test oracle for the NTT path."""
    qv = q.q if isinstance(q, Modulus) else q
    n = len(a)
    if len(b) != n:
        raise InvalidArgument(f"length mismatch: {len(a)} vs {len(b)}")
    if n & (n - 1):
        raise InvalidArgument("length must be a power of two")
    out = [0] * n
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            k = i + j
            if k < n:
                out[k] = (out[k] + ai * bj) % qv
            else:
                out[k - n] = (out[k - n] - ai * bj) % qv
    return out


def crt_reconstruct(p: RnsPoly) -> list[int]:
    """Centered representatives in [-(Q-1)/2, (Q-1)/2] from the limbs."""
    _require_domain(p, Domain.COEFF, "crt_reconstruct")
    basis = p.basis
    big_q, half = basis.big_q, (basis.big_q - 1) // 2
    mhat = [int(v) for v in basis.crt_mhat[:, 0]]
    out = []
    cols = p.limbs.T
    for col in cols:
        c = 0
        for i in range(basis.k):
            c += (int(col[i]) * mhat[i] % basis.moduli[i].q) * basis.crt_m[i]
        c %= big_q
        out.append(c - big_q if c > half else c)
    return out


def rns_decompose(coeffs: Sequence[int], basis: RnsBasis, domain: Domain = Domain.COEFF) -> RnsPoly:
    """Reduce arbitrary-precision centered coefficients into limbs.

    Exact inverse of :func:`crt_reconstruct` on its output range.
    """
    if len(coeffs) != basis.n:
        raise InvalidArgument(f"expected {basis.n} coefficients, got {len(coeffs)}")
    half = (basis.big_q - 1) // 2
    limbs = np.empty((basis.k, basis.n), dtype=U64)
    for j, c in enumerate(coeffs):
        if c > half or c < -half - 1 or c < -half:
            raise InvalidArgument(f"coefficient {c} outside [-(Q-1)/2, (Q-1)/2]")
        for i, m in enumerate(basis.moduli):
            limbs[i, j] = c % m.q
    return RnsPoly(basis, limbs, domain)


def sample_uniform(
    basis: RnsBasis, n: int, rng: np.random.Generator, domain: Domain = Domain.COEFF
) -> RnsPoly:
    """Independent uniform residues per limb."""
    if n != basis.n:
        raise InvalidArgument(f"n={n} does not match basis degree {basis.n}")
    limbs = np.empty((basis.k, n), dtype=U64)
    for i, m in enumerate(basis.moduli):
        limbs[i] = rng.integers(0, m.q, size=n, dtype=np.uint64)
    return RnsPoly(basis, limbs, domain)


def sample_error_coeffs(n: int, rng: np.random.Generator, bound: int = 16) -> np.ndarray:
    """Centered binomial-style error: sum of `bound` coin-flip differences, in [-bound, bound]."""
    bits = rng.integers(0, 2, size=(2 * bound, n), dtype=np.int64)
    return bits[:bound].sum(axis=0) - bits[bound:].sum(axis=0)


def sample_error(
    basis: RnsBasis, n: int, rng: np.random.Generator, bound: int = 16
) -> RnsPoly:
    """Small centered error polynomial, decomposed into limbs (coefficient domain)."""
    if n != basis.n:
        raise InvalidArgument(f"n={n} does not match basis degree {basis.n}")
    e = sample_error_coeffs(n, rng, bound)
    return small_signed_to_poly(e, basis)


def small_signed_to_poly(values: np.ndarray, basis: RnsBasis, domain: Domain = Domain.COEFF) -> RnsPoly:
    """Lift small signed int64 coefficients (|v| < min q_i) into limbs."""
    limbs = (values[None, :] % basis.q_arr.astype(np.int64)[:, None]).astype(U64)
    return RnsPoly(basis, limbs, domain)


# ---------------------------------------------------------------------------
# automorphism index maps and monomials (used by the HE layer)


@lru_cache(maxsize=None)
def ntt_automorphism_perm(n: int, k_aut: int) -> np.ndarray:
    """Gather indices P with ntt(p(X^k))[j] = ntt(p)[P[j]].

    Slot j holds the evaluation at psi**(2j+1); substituting X -> X^k moves it
    to the evaluation at psi**((2j+1)k mod 2n).
    """
    if k_aut % 2 == 0:
        raise InvalidArgument("automorphism index must be odd")
    j = np.arange(n, dtype=np.int64)
    src_exp = ((2 * j + 1) * (k_aut % (2 * n))) % (2 * n)
    return (src_exp - 1) // 2


@lru_cache(maxsize=None)
def coeff_automorphism_maps(n: int, k_aut: int) -> tuple[np.ndarray, np.ndarray]:
    """(target index, sign flip) arrays for X^i -> +/- X^(i*k mod n)."""
    if k_aut % 2 == 0:
        raise InvalidArgument("automorphism index must be odd")
    i = np.arange(n, dtype=np.int64)
    e = i * (k_aut % (2 * n))
    return (e % n), ((e // n) % 2).astype(bool)


def monomial_ntt(basis: RnsBasis, exponent: int) -> np.ndarray:
    """NTT-domain values (k, n) of the monomial X**exponent (negative exponents allowed)."""
    two_n = 2 * basis.n
    e = exponent % two_n
    j = np.arange(basis.n, dtype=np.int64)
    idx = ((2 * j + 1) * e) % two_n
    return basis.psi_pows[:, idx]
