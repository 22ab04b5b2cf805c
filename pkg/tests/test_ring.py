import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from latpir import ring
from latpir.errors import InvalidArgument, InvalidState
from latpir.ring import (
    Domain,
    Modulus,
    RnsBasis,
    RnsPoly,
    crt_reconstruct,
    default_basis,
    monomial_ntt,
    negacyclic_convolve_naive,
    ntt_forward,
    ntt_inverse,
    poly_add,
    poly_neg,
    poly_pointwise_mul,
    rns_decompose,
    sample_error,
    sample_error_coeffs,
    sample_uniform,
)


def basis_17_n4():
    return RnsBasis(4, [Modulus(17, ring.find_two_n_root(17, 8))])


def small_basis(n=16, k=2):
    return RnsBasis.generate(n, k, bits=18)


# ---------------------------------------------------------------------------
# NTT


def test_ntt_zero_and_constant():
    b = basis_17_n4()
    zero = RnsPoly(b, np.zeros((1, 4), dtype=np.uint64), Domain.COEFF)
    assert np.array_equal(ntt_forward(zero).limbs, np.zeros((1, 4)))
    one = RnsPoly(b, np.array([[1, 0, 0, 0]], dtype=np.uint64), Domain.COEFF)
    assert np.array_equal(ntt_forward(one).limbs, np.ones((1, 4)))


def test_intt_constant_vector():
    b = basis_17_n4()
    c = RnsPoly(b, np.full((1, 4), 5, dtype=np.uint64), Domain.NTT)
    back = ntt_inverse(c)
    assert np.array_equal(back.limbs, np.array([[5, 0, 0, 0]]))


def test_ntt_roundtrip_many():
    b = small_basis()
    rng = np.random.default_rng(7)
    for _ in range(1000):
        x = sample_uniform(b, b.n, rng)
        assert np.array_equal(ntt_inverse(ntt_forward(x)).limbs, x.limbs)


def test_domain_errors():
    b = small_basis()
    rng = np.random.default_rng(0)
    x = sample_uniform(b, b.n, rng)
    with pytest.raises(InvalidState):
        ntt_inverse(x)
    with pytest.raises(InvalidState):
        ntt_forward(ntt_forward(x))
    with pytest.raises(InvalidState):
        poly_pointwise_mul(x, x)


@given(st.integers(0, 2**32))
def test_convolution_theorem(seed):
    b = RnsBasis.generate(8, 2, bits=17)
    rng = np.random.default_rng(seed)
    a = sample_uniform(b, 8, rng)
    c = sample_uniform(b, 8, rng)
    prod = ntt_inverse(poly_pointwise_mul(ntt_forward(a), ntt_forward(c)))
    for i, m in enumerate(b.moduli):
        naive = negacyclic_convolve_naive(
            [int(v) for v in a.limbs[i]], [int(v) for v in c.limbs[i]], m.q
        )
        assert [int(v) for v in prod.limbs[i]] == naive


def test_naive_convolution_identity_and_wraparound():
    n, q = 8, 17
    identity = [1] + [0] * (n - 1)
    b = [3, 1, 4, 1, 5, 9, 2, 6]
    assert negacyclic_convolve_naive(identity, b, q) == b
    # x^(n-1) * x = x^n = -1
    xn1 = [0] * (n - 1) + [1]
    x = [0, 1] + [0] * (n - 2)
    out = negacyclic_convolve_naive(xn1, x, q)
    assert out == [q - 1] + [0] * (n - 1)


def test_naive_convolution_length_mismatch():
    with pytest.raises(InvalidArgument):
        negacyclic_convolve_naive([1, 2], [1, 2, 3, 4], 17)


# ---------------------------------------------------------------------------
# add / mul / canonicality


@given(st.integers(0, 2**32))
def test_add_commutes_and_cancels(seed):
    b = small_basis()
    rng = np.random.default_rng(seed)
    x = sample_uniform(b, b.n, rng)
    y = sample_uniform(b, b.n, rng)
    assert np.array_equal(poly_add(x, y).limbs, poly_add(y, x).limbs)
    zero = poly_add(x, poly_neg(x))
    assert not zero.limbs.any()
    # identity
    z = RnsPoly(b, np.zeros_like(x.limbs), Domain.COEFF)
    assert np.array_equal(poly_add(x, z).limbs, x.limbs)


@given(st.integers(0, 2**32))
def test_add_associative_and_canonical(seed):
    b = small_basis()
    rng = np.random.default_rng(seed)
    x, y, z = (sample_uniform(b, b.n, rng) for _ in range(3))
    left = poly_add(poly_add(x, y), z)
    right = poly_add(x, poly_add(y, z))
    assert np.array_equal(left.limbs, right.limbs)
    for out in (left, poly_pointwise_mul(
            ntt_forward(x), ntt_forward(y))):
        assert (out.limbs < b.q_col).all()


def test_add_oracle_bigint(rng):
    b = small_basis()
    x = sample_uniform(b, b.n, rng)
    y = sample_uniform(b, b.n, rng)
    got = crt_reconstruct(poly_add(x, y))
    big_q = b.big_q
    half = (big_q - 1) // 2
    for cx, cy, g in zip(crt_reconstruct(x), crt_reconstruct(y), got):
        want = (cx + cy) % big_q
        want = want - big_q if want > half else want
        assert g == want


def test_pointwise_identity_and_zero(rng):
    b = small_basis()
    x = ntt_forward(sample_uniform(b, b.n, rng))
    one = ntt_forward(RnsPoly(b, np.eye(1, b.n, 0, dtype=np.uint64).repeat(b.k, 0), Domain.COEFF))
    assert np.array_equal(poly_pointwise_mul(x, one).limbs, x.limbs)
    zero = RnsPoly(b, np.zeros_like(x.limbs), Domain.NTT)
    assert not poly_pointwise_mul(x, zero).limbs.any()


# ---------------------------------------------------------------------------
# CRT


def test_crt_small_and_negative_one():
    b = small_basis()
    small = rns_decompose([3] * b.n, b)
    assert crt_reconstruct(small) == [3] * b.n
    minus_one = RnsPoly(b, (b.q_col - 1).repeat(b.n, axis=1).astype(np.uint64), Domain.COEFF)
    assert crt_reconstruct(minus_one) == [-1] * b.n


@given(st.integers(0, 2**32))
def test_crt_roundtrip_random(seed):
    b = small_basis()
    import random

    r = random.Random(seed)
    half = (b.big_q - 1) // 2
    coeffs = [r.randint(-half, half) for _ in range(b.n)]
    p = rns_decompose(coeffs, b)
    assert crt_reconstruct(p) == coeffs
    # fast word path agrees with the slow big-int path
    neg, lo, hi = ring.crt_to_words(p.limbs, b)
    for j, c in enumerate(coeffs):
        mag = (int(hi[j]) << 64) | int(lo[j])
        assert (-mag if neg[j] else mag) == c


def test_rns_decompose_range_check():
    b = small_basis()
    with pytest.raises(InvalidArgument):
        rns_decompose([b.big_q] * b.n, b)


# ---------------------------------------------------------------------------
# sampling


def test_sampling_determinism():
    b = small_basis()
    a = sample_uniform(b, b.n, np.random.default_rng(42))
    c = sample_uniform(b, b.n, np.random.default_rng(42))
    assert np.array_equal(a.limbs, c.limbs)
    e1 = sample_error(b, b.n, np.random.default_rng(7), bound=16)
    e2 = sample_error(b, b.n, np.random.default_rng(7), bound=16)
    assert np.array_equal(e1.limbs, e2.limbs)


def test_error_bound_and_mean():
    rng = np.random.default_rng(3)
    bound = 16
    draws = sample_error_coeffs(1_000_000, rng, bound)
    assert draws.min() >= -bound and draws.max() <= bound
    sigma = np.sqrt(bound / 2)
    assert abs(draws.mean()) < 3 * sigma / np.sqrt(len(draws))


# ---------------------------------------------------------------------------
# basis construction and defaults


def test_basis_invariants():
    b = default_basis(4096)
    assert b.k == 4
    qs = [m.q for m in b.moduli]
    assert len(set(qs)) == 4
    prod = 1
    for q in qs:
        assert ring.is_prime(q)
        assert q % (2 * 4096) == 1
        assert q.bit_length() <= 32
        prod *= q
    assert prod == b.big_q
    assert abs(b.big_q.bit_length() - 108) <= 1


def test_basis_rejects_bad_inputs():
    with pytest.raises(InvalidArgument):
        RnsBasis(12, [Modulus(17, 2)])  # not a power of two
    with pytest.raises(InvalidArgument):
        RnsBasis(4, [Modulus(15, 2)])  # composite
    good = Modulus(17, ring.find_two_n_root(17, 8))
    with pytest.raises(InvalidArgument):
        RnsBasis(4, [good, good])  # duplicate primes
    with pytest.raises(InvalidArgument):
        RnsBasis(4, [Modulus(17, 4)])  # wrong-order root (4 has order 4 mod 17)


# ---------------------------------------------------------------------------
# automorphism helpers and monomials


@pytest.mark.parametrize("k_aut", [1, 3, 5, 17, 31])
def test_automorphism_ntt_matches_coeff(k_aut, rng):
    b = small_basis(16, 2)
    x = sample_uniform(b, 16, rng)
    tgt, flip = ring.coeff_automorphism_maps(16, k_aut)
    want = np.zeros_like(x.limbs)
    vals = np.where(flip[None, :], (b.q_col - x.limbs) % b.q_col, x.limbs)
    want[:, tgt] = vals
    perm = ring.ntt_automorphism_perm(16, k_aut)
    via_ntt = ntt_inverse(RnsPoly(b, np.ascontiguousarray(ntt_forward(x).limbs[:, perm]), Domain.NTT))
    assert np.array_equal(via_ntt.limbs, want)


def test_automorphism_rejects_even_index():
    with pytest.raises(InvalidArgument):
        ring.ntt_automorphism_perm(16, 2)


def test_monomial_ntt_matches_transform(rng):
    b = small_basis(16, 2)
    for e in (0, 1, 5, -1, -3, 16, 31):
        coeffs = np.zeros((b.k, 16), dtype=np.uint64)
        idx = e % 32
        if idx < 16:
            coeffs[:, idx] = 1
        else:
            coeffs[:, idx - 16] = (b.q_arr - 1)
        want = ntt_forward(RnsPoly(b, coeffs, Domain.COEFF)).limbs
        assert np.array_equal(monomial_ntt(b, e), want)


def test_jit_and_numpy_paths_agree(rng):
    b = default_basis(512)
    if not b.jit_ok:
        pytest.skip("JIT path unavailable")
    x = np.stack([sample_uniform(b, 512, rng).limbs for _ in range(3)])
    ref = RnsBasis(512, list(b.moduli))
    ref.jit_ok = False
    assert np.array_equal(ring.ntt_raw(x, b), ring.ntt_raw(x, ref))
    y = ring.ntt_raw(x, b)
    assert np.array_equal(ring.intt_raw(y, b), ring.intt_raw(y, ref))
