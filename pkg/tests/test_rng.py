import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ferret_lab import rng
from ferret_lab.errors import DomainError
from ferret_lab.rng import Domain, RngStream

coords = st.tuples(
    st.integers(0, 2**63), st.sampled_from(list(Domain)), st.integers(0, 10**6), st.integers(0, 10**4)
)


@given(coords)
def test_identical_coordinates_replay_identical_bytes(c):
    a = RngStream(*c).uniforms(16)
    b = RngStream(*c).uniforms(16)
    assert a.tobytes() == b.tobytes()


@given(coords)
def test_scalar_and_vectorized_keys_agree(c):
    seed, dom, step, group = c
    assert rng.stream_key(seed, dom, step, group) == int(rng.stream_keys(seed, dom, step, group))


def test_keys_change_with_every_coordinate():
    base = RngStream(1, Domain.MASK, 2, 3)
    variants = [RngStream(2, Domain.MASK, 2, 3), RngStream(1, Domain.DIRECTION, 2, 3),
                RngStream(1, Domain.MASK, 3, 3), RngStream(1, Domain.MASK, 2, 4)]
    assert len({int(base.key)} | {int(v.key) for v in variants}) == 5


def test_neighbouring_streams_uncorrelated():
    n = 20000
    ref = RngStream(7, Domain.DIRECTION, 0, 0).normals(n)
    others = [RngStream(8, Domain.DIRECTION, 0, 0), RngStream(7, Domain.DITHER, 0, 0),
              RngStream(7, Domain.DIRECTION, 1, 0), RngStream(7, Domain.DIRECTION, 0, 1)]
    for o in others:
        r = np.corrcoef(ref, o.normals(n))[0, 1]
        assert abs(r) < 4 / math.sqrt(n)


def test_uniform_range_and_moments():
    u = RngStream(0, Domain.MASK).uniforms(200000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 * math.sqrt(1 / 12 / u.size)


def test_offset_continues_stream():
    s = RngStream(3, Domain.NOISE, 4, 5)
    assert np.array_equal(s.uniforms(10)[4:], s.uniforms(6, offset=4))


def test_negative_coordinates_rejected():
    with pytest.raises(DomainError):
        RngStream(0, Domain.MASK, -1, 0)
    with pytest.raises(DomainError):
        rng.stream_keys(0, Domain.MASK, np.array([-1]), 0)
    with pytest.raises(DomainError):
        RngStream(1.5, Domain.MASK)


# sample_unit_vector

def test_dim1_unit_vector_is_plus_or_minus_one():
    draws = rng.unit_vectors(1, 0, Domain.DIRECTION, np.arange(100000), 0)[:, 0]
    assert set(np.unique(draws)) == {-1.0, 1.0}
    frac = np.mean(draws > 0)
    assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / draws.size)


@given(st.integers(0, 10**9), st.integers(0, 1000))
def test_dim3_unit_norm(seed, step):
    u = rng.sample_unit_vector(3, RngStream(seed, Domain.DIRECTION, step))
    assert abs(np.linalg.norm(u) - 1.0) <= 1e-9


def test_dim8_coordinate_means():
    N = 100000
    u = rng.unit_vectors(8, 11, Domain.DIRECTION, np.arange(N), 0)
    assert np.all(np.abs(u.mean(axis=0)) < 4 * math.sqrt(1 / (8 * N)))
    # second moment per coordinate is 1/d on the sphere
    assert np.all(np.abs((u**2).mean(axis=0) - 1 / 8) < 0.01)


def test_bulk_unit_vectors_match_scalar():
    bulk = rng.unit_vectors(5, 9, Domain.DIRECTION, np.arange(4)[:, None], np.arange(3)[None, :])
    for t in range(4):
        for g in range(3):
            one = rng.sample_unit_vector(5, RngStream(9, Domain.DIRECTION, t, g))
            assert np.array_equal(bulk[t, g], one)


def test_unit_vector_rejects_dim0():
    with pytest.raises(DomainError):
        rng.sample_unit_vector(0, RngStream(0, Domain.DIRECTION))


# bernoulli

def test_bernoulli_p0_p1():
    steps = np.arange(5000)
    assert not rng.bernoulli_grid(0.0, 1, Domain.MASK, steps, 0).any()
    assert rng.bernoulli_grid(1.0, 1, Domain.MASK, steps, 0).all()
    assert rng.bernoulli(0.0, RngStream(1, Domain.MASK)) == 0
    assert rng.bernoulli(1.0, RngStream(1, Domain.MASK)) == 1


def test_bernoulli_rate():
    N, p = 1_000_000, 0.072
    bits = rng.bernoulli_grid(p, 5, Domain.MASK, np.arange(N), 0)
    assert abs(bits.mean() - p) < 4 * math.sqrt(p * (1 - p) / N)


def test_bernoulli_grid_matches_scalar():
    grid = rng.bernoulli_grid(0.3, 4, Domain.MASK, np.arange(50)[:, None], np.arange(4)[None, :])
    for t in range(50):
        for g in range(4):
            assert grid[t, g] == rng.bernoulli(0.3, RngStream(4, Domain.MASK, t, g))


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_bernoulli_coupled_across_p(p1, p2, seed):
    lo, hi = sorted((p1, p2))
    a = rng.bernoulli_grid(lo, seed, Domain.MASK, np.arange(200), 0)
    b = rng.bernoulli_grid(hi, seed, Domain.MASK, np.arange(200), 0)
    assert np.all(a <= b)


def test_bernoulli_rejects_bad_p():
    with pytest.raises(DomainError):
        rng.bernoulli(1.5, RngStream(0, Domain.MASK))


# subsample_poisson

def test_subsample_full_rate():
    assert np.array_equal(rng.subsample_poisson(37, 1.0, RngStream(0, Domain.SUBSAMPLE)), np.arange(37))


def test_subsample_mean_batch_size():
    n, s, trials = 10000, 0.005, 400
    sizes = np.array([rng.subsample_poisson(n, s, RngStream(2, Domain.SUBSAMPLE, t)).size
                      for t in range(trials)])
    assert abs(sizes.mean() - n * s) < 4 * math.sqrt(n * s * (1 - s) / trials)


def test_subsample_single_record():
    trials = 20000
    hits = sum(rng.subsample_poisson(1, 0.5, RngStream(3, Domain.SUBSAMPLE, t)).size for t in range(trials))
    assert abs(hits / trials - 0.5) < 4 * math.sqrt(0.25 / trials)


@pytest.mark.parametrize("n,s", [(0, 0.5), (10, 0.0), (10, 1.5)])
def test_subsample_rejects(n, s):
    with pytest.raises(DomainError):
        rng.subsample_poisson(n, s, RngStream(0, Domain.SUBSAMPLE))


# gaussian

def test_gaussian_sigma0():
    assert np.array_equal(rng.gaussian(0.0, 4, RngStream(0, Domain.DITHER)), np.zeros(4))


def test_gaussian_variance():
    x = rng.normals(rng.stream_keys(0, Domain.DITHER, np.arange(100000), 0), 1)[:, 0]
    assert abs(x.var(ddof=1) - 1.0) < 0.05
    assert abs(x.mean()) < 4 / math.sqrt(x.size)


def test_gaussian_tiny_sigma_bounded():
    for t in range(1000):
        x = rng.gaussian(1e-4, 2, RngStream(0, Domain.DITHER, t))
        assert np.all(np.abs(x) < 1e-3)


def test_gaussian_rejects_negative_sigma():
    with pytest.raises(DomainError):
        rng.gaussian(-1.0, 2, RngStream(0, Domain.DITHER))


@settings(max_examples=50)
@given(st.integers(1, 40))
def test_normals_odd_counts_are_prefixes(n):
    keys = rng.stream_keys(1, Domain.NOISE, 0, 0)
    assert np.array_equal(rng.normals(keys, n), rng.normals(keys, n + 1)[:n])
