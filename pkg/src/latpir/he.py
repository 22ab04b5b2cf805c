"""BFV and RGSW homomorphic primitives.

Conventions used throughout:

* A ciphertext is a pair (a, b) of NTT-domain ring elements with
  ``b = -a*s + phase + e``; decryption recovers ``phase = b + a*s``.
* A "phase encryption" stores an arbitrary mod-Q polynomial in the phase slot;
  plaintext encryption scales the message by Delta = floor(Q/P) first.
* Key-switching keys and RGSW rows share one gadget (base z, ell digits).
* RGSW rows: the first ell rows carry the plaintext times z^i * s (they absorb
  the digits of the ciphertext's `a` component), the last ell rows carry the
  plaintext times z^i (absorbing the digits of `b`).

Digit decomposition follows the inverse-NTT -> CRT-reconstruct -> centered
base-z extraction -> forward-NTT pipeline; digits land in [-z/2, z/2 + 1]
(the +1 is the carry absorbed by the top digit) and recompose exactly mod Q.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ring
from .errors import InvalidArgument, InvalidState
from .ring import (
    Domain,
    RnsBasis,
    RnsPoly,
    U64,
    coeff_automorphism_maps,
    crt_to_words,
    default_basis,
    intt_raw,
    mod_add,
    mod_mul,
    mod_sub,
    ntt_automorphism_perm,
    ntt_raw,
)


@dataclass(frozen=True)
class GadgetConfig:
    """Digit decomposition base z = 2**z_bits with ell digits."""

    z_bits: int = 22
    ell: int = 5

    @property
    def z(self) -> int:
        return 1 << self.z_bits


@dataclass
class HeParams:
    """Ring, plaintext modulus P = 2**plain_bits, gadget, and error bound."""

    basis: RnsBasis
    plain_bits: int = 32
    gadget: GadgetConfig = field(default_factory=GadgetConfig)
    error_bound: int = 16

    def __post_init__(self):
        big_q = self.basis.big_q
        if self.plain_modulus >= big_q:
            raise InvalidArgument("plaintext modulus must be smaller than Q")
        if self.delta <= 1:
            raise InvalidArgument("Delta = floor(Q/P) must exceed 1")
        if self.gadget.z ** self.gadget.ell <= big_q:
            raise InvalidArgument("gadget must satisfy z**ell > Q")
        if self.gadget.z > 1 << 31:
            raise InvalidArgument("gadget digits must fit signed 32-bit")
        q64 = self.basis.q_arr.astype(np.int64)
        self.delta_mod_q = np.array(
            [self.delta % m.q for m in self.basis.moduli], dtype=U64
        )
        self.zpow_mod_q = np.array(
            [
                [pow(self.gadget.z, i, m.q) for m in self.basis.moduli]
                for i in range(self.gadget.ell)
            ],
            dtype=U64,
        )  # (ell, k)
        self.q_int64_col = q64[:, None]

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def plain_modulus(self) -> int:
        return 1 << self.plain_bits

    @property
    def delta(self) -> int:
        return self.basis.big_q // self.plain_modulus

    @property
    def poly_bytes(self) -> int:
        """Storage footprint of one polynomial: k limbs of n 32-bit words."""
        return self.basis.k * self.basis.n * 4

    @property
    def ct_bytes(self) -> int:
        return 2 * self.poly_bytes


@lru_cache(maxsize=None)
def default_params(n: int = 4096) -> HeParams:
    """Production-shaped profile: 4x~27-bit primes, P = 2**32, z = 2**22, ell = 5."""
    return HeParams(default_basis(n))


def test_params(
    n: int = 256, k: int = 2, prime_bits: int = 27, plain_bits: int = 8,
    z_bits: int = 11, error_bound: int = 4,
) -> HeParams:
    """Small profile for desk-scale tests; ell derived from z**ell > Q.

    The gadget base is kept small relative to Q so the onion-mode RGSW
    synthesis chain retains decryption margin at toy ring sizes.
    """
    basis = RnsBasis.generate(n, k, prime_bits)
    ell = 1
    while (1 << (z_bits * ell)) <= basis.big_q:
        ell += 1
    return HeParams(basis, plain_bits, GadgetConfig(z_bits, ell), error_bound)


# ---------------------------------------------------------------------------
# value types


@dataclass
class SecretKey:
    """Ternary secret, held in the NTT domain; carries its parameter set."""

    params: HeParams
    s: RnsPoly


@dataclass
class BfvCiphertext:
    a: RnsPoly
    b: RnsPoly

    def __post_init__(self):
        if self.a.domain is not self.b.domain:
            raise InvalidArgument("ciphertext components must share a domain")

    @property
    def domain(self) -> Domain:
        return self.a.domain

    @property
    def basis(self) -> RnsBasis:
        return self.a.basis

    def raw(self) -> np.ndarray:
        """Stacked (2, k, n) view of both components."""
        return np.stack([self.a.limbs, self.b.limbs])


def ct_from_raw(raw: np.ndarray, basis: RnsBasis, domain: Domain = Domain.NTT) -> BfvCiphertext:
    return BfvCiphertext(
        RnsPoly(basis, np.ascontiguousarray(raw[0]), domain),
        RnsPoly(basis, np.ascontiguousarray(raw[1]), domain),
    )


@dataclass
class EvalKey:
    """Key-switching material for s(X^k_aut) -> s: ell phase encryptions of z^i * s(X^k_aut)."""

    k_aut: int
    ksk: tuple[BfvCiphertext, ...]
    gadget: GadgetConfig

    def __post_init__(self):
        if self.k_aut % 2 == 0:
            raise InvalidArgument("automorphism index must be odd")
        if self.ksk and not 1 <= self.k_aut < 2 * self.ksk[0].basis.n:
            raise InvalidArgument("automorphism index must lie in [1, 2n)")
        if len(self.ksk) != self.gadget.ell:
            raise InvalidArgument("evaluation key must hold exactly ell rows")


@dataclass
class RgswCiphertext:
    """2*ell BFV rows: ell for the a-digit column, then ell for the b-digit column."""

    rows: tuple[BfvCiphertext, ...]
    gadget: GadgetConfig

    def __post_init__(self):
        if len(self.rows) != 2 * self.gadget.ell:
            raise InvalidArgument(
                f"RGSW needs {2 * self.gadget.ell} rows, got {len(self.rows)}"
            )

    def raw(self) -> np.ndarray:
        """Stacked (2*ell, 2, k, n) array of all rows."""
        return np.stack([r.raw() for r in self.rows])


@dataclass
class NoiseReport:
    budget_bits: float
    noise_bits: float
    max_noise: int


# ---------------------------------------------------------------------------
# key generation and encryption


def _sample_ternary(basis: RnsBasis, rng: np.random.Generator) -> RnsPoly:
    coeffs = rng.integers(-1, 2, size=basis.n, dtype=np.int64)
    return ring.small_signed_to_poly(coeffs, basis)


def keygen(
    params: HeParams, rng: np.random.Generator, num_stages: int | None = None
) -> tuple[SecretKey, list[EvalKey]]:
    """Secret key plus one evaluation key per expansion stage.

    Stage t uses the automorphism index n/2**t + 1; by default keys for every
    stage up to log2(n) are produced so any database geometry is covered.
    """
    n = params.n
    if num_stages is None:
        num_stages = n.bit_length() - 1
    if num_stages > n.bit_length() - 1:
        raise InvalidArgument(f"at most log2(n)={n.bit_length() - 1} stages are possible")
    s = ring.ntt_forward(_sample_ternary(params.basis, rng))
    sk = SecretKey(params, s)
    evks = [make_eval_key(sk, n // (1 << t) + 1, rng) for t in range(num_stages)]
    return sk, evks


def encrypt_phase_ntt(
    sk: SecretKey, phase_ntt: np.ndarray, rng: np.random.Generator
) -> BfvCiphertext:
    """Encrypt an arbitrary mod-Q polynomial given by its NTT-domain limbs."""
    params = sk.params
    basis = params.basis
    a = ring.sample_uniform(basis, basis.n, rng, Domain.NTT)
    e = ntt_raw(
        ring.sample_error(basis, basis.n, rng, params.error_bound).limbs, basis
    )
    q = basis.q_col
    b = mod_add(mod_sub(phase_ntt % q, mod_mul(a.limbs, sk.s.limbs, q), q), e, q)
    return BfvCiphertext(a, RnsPoly(basis, b, Domain.NTT))


def encrypt(sk: SecretKey, m: np.ndarray, rng: np.random.Generator) -> BfvCiphertext:
    """Encrypt a plaintext polynomial with coefficients in [0, P)."""
    params = sk.params
    m = np.asarray(m, dtype=np.uint64)
    if m.shape != (params.n,):
        raise InvalidArgument(f"plaintext must have shape ({params.n},)")
    if m.max(initial=0) >= params.plain_modulus:
        raise InvalidArgument("plaintext coefficient out of range")
    basis = params.basis
    limbs = mod_mul(
        params.delta_mod_q[:, None], m[None, :] % basis.q_col, basis.q_col
    )
    return encrypt_phase_ntt(sk, ntt_raw(limbs, basis), rng)


def phase_of(sk: SecretKey, ct: BfvCiphertext) -> np.ndarray:
    """Coefficient-domain limbs of b + a*s."""
    if ct.domain is not Domain.NTT:
        raise InvalidState("phase extraction expects NTT-domain ciphertexts")
    basis = sk.params.basis
    ph = mod_add(ct.b.limbs, mod_mul(ct.a.limbs, sk.s.limbs, basis.q_col), basis.q_col)
    return intt_raw(ph, basis)


def _phase_ints(sk: SecretKey, ct: BfvCiphertext) -> list[int]:
    """Phase per coefficient as centered Python ints (|c| <= (Q-1)/2)."""
    basis = sk.params.basis
    neg, lo, hi = crt_to_words(phase_of(sk, ct), basis)
    return [
        -((h << 64) | l) if n else ((h << 64) | l)
        for n, l, h in zip(neg.tolist(), lo.tolist(), hi.tolist())
    ]


def decrypt(sk: SecretKey, ct: BfvCiphertext) -> np.ndarray:
    """Round the phase to the nearest multiple of Delta; result is mod P."""
    params = sk.params
    big_q, p_mod = params.basis.big_q, params.plain_modulus
    half = big_q // 2
    out = np.empty(params.n, dtype=np.uint64)
    for j, c in enumerate(_phase_ints(sk, ct)):
        out[j] = ((c * p_mod + half) // big_q) % p_mod
    return out


def noise_budget(sk: SecretKey, ct: BfvCiphertext) -> NoiseReport:
    """Remaining margin, in bits, before rounding decryption starts failing."""
    params = sk.params
    big_q, delta = params.basis.big_q, params.delta
    worst = 0
    for c in _phase_ints(sk, ct):
        m = (c * params.plain_modulus + big_q // 2) // big_q
        nu = c - m * delta
        nu -= big_q * round(nu / big_q)
        worst = max(worst, abs(nu))
    noise_bits = math.log2(worst) if worst else 0.0
    budget = math.log2(big_q / (2 * params.plain_modulus)) - noise_bits
    return NoiseReport(max(budget, 0.0), noise_bits, worst)


# ---------------------------------------------------------------------------
# digit decomposition


class DigitExtractor:
    """Streams centered base-z digits of CRT-reconstructed coefficients.

    Works on arbitrary leading batch shape; state is the sign/magnitude word
    representation produced by :func:`ring.crt_to_words`.  Digits come out
    low-to-high; all but the last are adjusted into (-z/2, z/2] with a carry,
    the last keeps the carry and may reach z/2 + 1.
    """

    def __init__(self, coeff_limbs: np.ndarray, basis: RnsBasis, gadget: GadgetConfig):
        if not 1 <= gadget.z_bits <= 31:
            raise InvalidArgument("digit base must be 2**z_bits with 1 <= z_bits <= 31")
        self.basis = basis
        self.gadget = gadget
        neg, lo, hi = crt_to_words(coeff_limbs, basis)
        self._neg = neg
        self._lo = lo
        self._hi = hi
        self._i = 0
        self._zb = np.uint64(gadget.z_bits)
        self._zmask = np.uint64(gadget.z - 1)
        self._zhalf = np.uint64(gadget.z // 2)

    def next_signed(self) -> np.ndarray:
        """Next digit as signed int64, shape = batch shape + (n,)."""
        if self._i >= self.gadget.ell:
            raise InvalidState("all digits already extracted")
        raw = self._lo & self._zmask
        self._lo = (self._lo >> self._zb) | ((self._hi & self._zmask) << (np.uint64(64) - self._zb))
        self._hi = self._hi >> self._zb
        d = raw.astype(np.int64)
        if self._i < self.gadget.ell - 1:
            adj = raw > self._zhalf
            d = d - adj.astype(np.int64) * self.gadget.z
            carry = adj.astype(U64)
            new_lo = self._lo + carry
            self._hi = self._hi + (new_lo < self._lo).astype(U64)
            self._lo = new_lo
        self._i += 1
        return np.where(self._neg, -d, d)

    def next_limbs(self, q_int64_col: np.ndarray) -> np.ndarray:
        """Next digit lifted into residues: shape = batch shape + (k, n)."""
        d = self.next_signed()
        return (d[..., None, :] % q_int64_col).astype(U64)


def digit_decompose(p: RnsPoly, gadget: GadgetConfig) -> list[RnsPoly]:
    """Decompose an NTT-domain polynomial into ell NTT-domain digit polynomials."""
    if p.domain is not Domain.NTT:
        raise InvalidState("digit_decompose expects an NTT-domain polynomial")
    basis = p.basis
    coeff = intt_raw(p.limbs, basis)
    ex = DigitExtractor(coeff, basis, gadget)
    q64 = basis.q_arr.astype(np.int64)[:, None]
    digits = np.stack([ex.next_limbs(q64) for _ in range(gadget.ell)])
    digits = ntt_raw(digits, basis)
    return [RnsPoly(basis, np.ascontiguousarray(digits[i]), Domain.NTT) for i in range(gadget.ell)]


def centered_digits_int(c: int, big_q: int, z: int, ell: int) -> list[int]:
    """Scalar oracle for digit extraction: works for any odd or toy modulus."""
    c = c % big_q
    half = (big_q - 1) // 2
    if c > half:
        c -= big_q
    sign = -1 if c < 0 else 1
    mag = abs(c)
    digits = []
    for i in range(ell):
        d = mag % z
        mag //= z
        if i < ell - 1 and d > z // 2:
            d -= z
            mag += 1
        digits.append(sign * d)
    if mag:
        raise InvalidArgument(f"{c} does not fit {ell} base-{z} digits")
    return digits


# ---------------------------------------------------------------------------
# automorphism, key switching, external product


def automorphism(p: RnsPoly, k_aut: int) -> RnsPoly:
    """p(X) -> p(X^k_aut) mod (X^n + 1); works in either domain."""
    if k_aut % 2 == 0:
        raise InvalidArgument("automorphism index must be odd")
    basis = p.basis
    if p.domain is Domain.NTT:
        perm = ntt_automorphism_perm(basis.n, k_aut)
        return RnsPoly(basis, np.ascontiguousarray(p.limbs[:, perm]), Domain.NTT)
    tgt, flip = coeff_automorphism_maps(basis.n, k_aut)
    out = np.empty_like(p.limbs)
    vals = np.where(flip[None, :], (basis.q_col - p.limbs) % basis.q_col, p.limbs)
    out[:, tgt] = vals
    return RnsPoly(basis, out, Domain.COEFF)


def make_eval_key(sk: SecretKey, k_aut: int, rng: np.random.Generator) -> EvalKey:
    params = sk.params
    basis = params.basis
    s_aut = automorphism(sk.s, k_aut).limbs
    rows = []
    for i in range(params.gadget.ell):
        phase = mod_mul(params.zpow_mod_q[i][:, None], s_aut, basis.q_col)
        rows.append(encrypt_phase_ntt(sk, phase, rng))
    return EvalKey(k_aut, tuple(rows), params.gadget)


def key_switch_digits(
    digits: list[RnsPoly] | np.ndarray, rows: tuple[BfvCiphertext, ...], basis: RnsBasis
) -> np.ndarray:
    """Sum_i digits[i] * rows[i], accumulated over both ciphertext components.

    Returns raw (2, k, n) limbs.
    """
    q = basis.q_col
    acc = np.zeros((2, basis.k, basis.n), dtype=U64)
    for d, row in zip(digits, rows):
        limbs = d.limbs if isinstance(d, RnsPoly) else d
        acc[0] = mod_add(acc[0], mod_mul(limbs, row.a.limbs, q), q)
        acc[1] = mod_add(acc[1], mod_mul(limbs, row.b.limbs, q), q)
    return acc


def subs(ct: BfvCiphertext, evk: EvalKey) -> BfvCiphertext:
    """Homomorphic substitution X -> X^k_aut via automorphism plus key switching."""
    if ct.domain is not Domain.NTT:
        raise InvalidState("subs expects NTT-domain ciphertexts")
    basis = ct.basis
    if basis.n != evk.ksk[0].basis.n or basis.k != evk.ksk[0].basis.k:
        raise InvalidArgument("ciphertext and evaluation key use different parameters")
    perm = ntt_automorphism_perm(basis.n, evk.k_aut)
    a_aut = np.ascontiguousarray(ct.a.limbs[:, perm])
    b_aut = np.ascontiguousarray(ct.b.limbs[:, perm])
    digits = digit_decompose(RnsPoly(basis, a_aut, Domain.NTT), evk.gadget)
    acc = key_switch_digits(digits, evk.ksk, basis)
    return BfvCiphertext(
        RnsPoly(basis, acc[0], Domain.NTT),
        RnsPoly(basis, mod_add(b_aut, acc[1], basis.q_col), Domain.NTT),
    )


def external_product(ct: BfvCiphertext, rgsw: RgswCiphertext) -> BfvCiphertext:
    """ct boxdot rgsw: digit-decompose both components, accumulate against the rows."""
    if ct.domain is not Domain.NTT:
        raise InvalidState("external_product expects NTT-domain ciphertexts")
    basis = ct.basis
    ell = rgsw.gadget.ell
    if len(rgsw.rows) != 2 * ell:
        raise InvalidArgument("RGSW row count does not match its gadget")
    da = digit_decompose(ct.a, rgsw.gadget)
    db = digit_decompose(ct.b, rgsw.gadget)
    acc = key_switch_digits(da, rgsw.rows[:ell], basis)
    acc2 = key_switch_digits(db, rgsw.rows[ell:], basis)
    q = basis.q_col
    return BfvCiphertext(
        RnsPoly(basis, mod_add(acc[0], acc2[0], q), Domain.NTT),
        RnsPoly(basis, mod_add(acc[1], acc2[1], q), Domain.NTT),
    )


def gen_rgsw_ntt(
    sk: SecretKey, mu_ntt: np.ndarray, rng: np.random.Generator
) -> RgswCiphertext:
    """RGSW encryption of an arbitrary NTT-domain plaintext polynomial."""
    params = sk.params
    basis = params.basis
    q = basis.q_col
    mu_s = mod_mul(mu_ntt, sk.s.limbs, q)
    rows = []
    for i in range(params.gadget.ell):
        rows.append(encrypt_phase_ntt(sk, mod_mul(params.zpow_mod_q[i][:, None], mu_s, q), rng))
    for i in range(params.gadget.ell):
        rows.append(encrypt_phase_ntt(sk, mod_mul(params.zpow_mod_q[i][:, None], mu_ntt % q, q), rng))
    return RgswCiphertext(tuple(rows), params.gadget)


def gen_rgsw(sk: SecretKey, mu: int, rng: np.random.Generator) -> RgswCiphertext:
    """Reference-mode RGSW encryption of a plaintext bit."""
    if mu not in (0, 1):
        raise InvalidArgument("gen_rgsw encrypts a bit")
    basis = sk.params.basis
    mu_ntt = np.full((basis.k, basis.n), mu, dtype=U64)
    return gen_rgsw_ntt(sk, mu_ntt, rng)


def gen_secret_rgsw(sk: SecretKey, rng: np.random.Generator) -> RgswCiphertext:
    """RGSW encryption of the secret itself; lets the server turn phase
    encryptions of m into phase encryptions of m*s (the onion-mode column)."""
    return gen_rgsw_ntt(sk, sk.s.limbs, rng)


def homomorphic_add(x: BfvCiphertext, y: BfvCiphertext) -> BfvCiphertext:
    return BfvCiphertext(ring.poly_add(x.a, y.a), ring.poly_add(x.b, y.b))


def homomorphic_sub(x: BfvCiphertext, y: BfvCiphertext) -> BfvCiphertext:
    return BfvCiphertext(ring.poly_sub(x.a, y.a), ring.poly_sub(x.b, y.b))
