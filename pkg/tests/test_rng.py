import numpy as np
import pytest

from tokenprune.rng import Rng, derive_seed


def test_same_seed_same_stream():
    a = Rng(57)
    b = Rng(57)
    assert [a.u01() for _ in range(100)] == [b.u01() for _ in range(100)]


def test_different_seeds_differ():
    assert Rng(57).u01() != Rng(58).u01()


def test_u01_open_interval():
    rng = Rng(1)
    draws = rng.u01_array(10000)
    assert draws.min() > 0.0
    assert draws.max() < 1.0


def test_known_first_draws_frozen():
    # Regression pin: the exact xoshiro256++/splitmix64 stream for seed 57.
    rng = Rng(57)
    draws = [rng.u01() for _ in range(4)]
    assert draws == [
        0.7877100678923612,
        0.1783845662850096,
        0.8766270306937372,
        0.0049903549255842505,
    ]


def test_normal_moments():
    rng = Rng(7)
    xs = np.array([rng.normal() for _ in range(20000)])
    assert abs(xs.mean()) < 0.03
    assert abs(xs.std() - 1.0) < 0.03


def test_shuffle_deterministic_and_permutes():
    a = list(range(50))
    b = list(range(50))
    Rng(3).shuffle(a)
    Rng(3).shuffle(b)
    assert a == b
    assert sorted(a) == list(range(50))
    assert a != list(range(50))


def test_randbelow_bounds_and_coverage():
    rng = Rng(11)
    draws = {rng.randbelow(7) for _ in range(500)}
    assert draws == set(range(7))
    with pytest.raises(ValueError):
        rng.randbelow(0)


def test_state_roundtrip_resumes_stream():
    rng = Rng(5)
    [rng.u01() for _ in range(10)]
    state = rng.get_state()
    ahead = [rng.u01() for _ in range(10)]
    rng2 = Rng(0)
    rng2.set_state(state)
    assert [rng2.u01() for _ in range(10)] == ahead


def test_derive_seed_streams_are_distinct():
    s = derive_seed(57, "teacher")
    t = derive_seed(57, "prune")
    assert s != t
    assert derive_seed(57, "teacher") == s
