import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedflow import data
from fedflow.errors import ConfigError


def test_gaussian_mean():
    x = data.sample(data.Gaussian(), 100_000, data.make_rng(0))
    assert x.shape == (100_000, 2)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_uniform_box_support_and_mean():
    x = data.sample(data.UniformBox((-1, -1), (1, 1)), 100_000, data.make_rng(1))
    assert np.all((x >= -1) & (x <= 1))
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_eight_gaussians_uniform_occupancy():
    spec = data.EightGaussians(radius=4.0)
    x = data.sample(spec, 80_000, data.make_rng(2))
    # nearest-mode counts; modes equally spaced on the circle
    d = ((x[:, None, :] - spec.centers[None]) ** 2).sum(-1)
    frac = np.bincount(d.argmin(1), minlength=8) / len(x)
    assert np.all(np.abs(frac - 1 / 8) < 0.01)
    assert np.allclose(np.linalg.norm(spec.centers, axis=1), 4.0)
    assert spec.sigma == pytest.approx(0.4)


def test_two_moons_labels_match_halves():
    x, lab = data.TwoMoons(noise_std=0.0, scale=1.0).sample_labeled(2000, data.make_rng(3))
    upper = x[lab == 0] + np.array([0.5, 0.25])
    lower = x[lab == 1] + np.array([0.5, 0.25])
    assert np.allclose(np.hypot(*upper.T), 1.0)
    assert np.all(upper[:, 1] >= -1e-12)
    assert np.allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0)


def test_gaussian_noise_moments_and_rejects_empty():
    x = data.gaussian_noise(2, 100_000, data.make_rng(4))
    assert np.all(np.abs(x.var(axis=0) - 1) < 0.03)
    with pytest.raises(ValueError):
        data.gaussian_noise(2, 0, data.make_rng(4))


def test_same_seed_bit_identical():
    a = data.gaussian_noise(2, 100, data.make_rng(7, 1, 2))
    b = data.gaussian_noise(2, 100, data.make_rng(7, 1, 2))
    c = data.gaussian_noise(2, 100, data.make_rng(7, 1, 3))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_substreams_independent_of_creation_order():
    first = [data.make_rng(5, k).random() for k in range(4)]
    second = [data.make_rng(5, k).random() for k in reversed(range(4))][::-1]
    assert first == second


@pytest.mark.parametrize("bad", [
    lambda: data.EightGaussians(radius=-1),
    lambda: data.EightGaussians(std=0),
    lambda: data.UniformBox((1, 0), (0, 1)),
    lambda: data.Gaussian((0, 0), (1, 0)),
    lambda: data.distribution_from_dict({"kind": "spiral"}),
    lambda: data.distribution_from_dict({"kind": "two_moons", "radius": 2}),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ConfigError):
        bad()


def test_dict_round_trip():
    for spec in [data.Gaussian(), data.EightGaussians(radius=3), data.TwoMoons(0.2, 2.0),
                 data.UniformBox((-4, -4), (4, 4))]:
        assert data.distribution_from_dict(data.distribution_to_dict(spec)) == spec


def test_fixed_eight_gaussian_split_is_lower_left_vs_upper_right():
    spec = data.EightGaussians()
    lower_left, upper_right = (spec.centers[list(g)] for g in data.split_labels(spec))
    # the splitting direction bisects the 180 and 225 degree modes
    u = np.array([np.cos(np.deg2rad(202.5)), np.sin(np.deg2rad(202.5))])
    assert np.all(lower_left @ u > 0) and np.all(upper_right @ u < 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 300),
       lo=st.floats(-10, 9), width=st.floats(0.01, 5))
def test_uniform_samples_stay_in_box(seed, n, lo, width):
    spec = data.UniformBox((lo, lo), (lo + width, lo + width))
    x = data.sample(spec, n, data.make_rng(seed))
    assert np.all(np.isfinite(x))
    assert np.all((x >= lo) & (x <= lo + width))
