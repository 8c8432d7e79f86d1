import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottlegan.exceptions import InsufficientTissueError, InvalidInputError
from bottlegan.stain import (
    EPS,
    OD_MAX,
    StainStyle,
    angular_error,
    concentrations_to_od,
    macenko_estimate,
    mix_styles,
    od_to_rgb,
    perturb_style,
    reference_basis,
    reference_style,
    render_from_concentrations,
    rgb_to_od,
)


def well_spread(rng, size=128, pure=0.05):
    """5% pure hematoxylin, 5% pure eosin, the rest mixed in [0.2, 1]."""
    conc = rng.uniform(0.2, 1.0, size=(size, size, 2))
    flat = conc.reshape(-1, 2)
    idx = rng.permutation(len(flat))
    n = int(pure * len(flat))
    flat[idx[:n], 1] = 0.0
    flat[idx[n:2 * n], 0] = 0.0
    return conc


def random_style(rng, sigma_od=0.0):
    basis = reference_basis()
    w = rng.dirichlet(np.ones(len(basis)))
    mixed = mix_styles(basis, w)
    return StainStyle(mixed.matrix, mixed.c_max, sigma_od=sigma_od)


# -- optical density ------------------------------------------------------------


def test_white_is_zero_density():
    assert rgb_to_od(np.ones((2, 2, 3))).max() == 0.0


def test_inverse_e_is_unit_density():
    assert rgb_to_od(np.full((1, 1, 3), np.exp(-1.0)))[0, 0, 0] == pytest.approx(1.0, abs=1e-12)


def test_od_range_and_floor():
    od = rgb_to_od(np.zeros((1, 1, 3)))
    assert np.allclose(od, OD_MAX)
    assert OD_MAX == pytest.approx(-np.log(1 / 255))


def test_round_trip_on_valid_domain(rng):
    x = rng.uniform(EPS, 1.0, size=(32, 32, 3))
    assert np.max(np.abs(od_to_rgb(rgb_to_od(x)) - x)) <= 1e-6


@given(st.floats(min_value=EPS, max_value=1.0))
def test_round_trip_property(v):
    assert abs(od_to_rgb(rgb_to_od(np.array([v])))[0] - v) <= 1e-6


def test_od_to_rgb_trivial_values():
    assert od_to_rgb(np.zeros(3)).tolist() == [1.0, 1.0, 1.0]
    assert od_to_rgb(np.array([20.0]))[0] <= 2.1e-9


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_rgb_to_od_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        rgb_to_od(np.array([0.5, bad]))


def test_od_to_rgb_rejects_negative():
    with pytest.raises(InvalidInputError):
        od_to_rgb(np.array([-0.1]))


@pytest.mark.parametrize("eps", [0.0, 0.02])
def test_eps_domain(eps):
    with pytest.raises(InvalidInputError):
        rgb_to_od(np.ones(3), eps=eps)


# -- rendering -------------------------------------------------------------------


def test_zero_concentration_is_white():
    img = render_from_concentrations(np.zeros((8, 8, 2)), reference_style())
    assert np.all(img == 1.0)


def test_one_hot_concentration_gives_stain_column():
    style = reference_style()
    conc = np.zeros((1, 1, 2))
    conc[..., 0] = 1.0
    od = concentrations_to_od(conc, style)
    assert np.allclose(od[0, 0], style.matrix[:, 0] * style.c_max[0], atol=1e-15)
    # through the RGB path as well
    img = render_from_concentrations(conc, StainStyle(style.matrix, (1.0, 1.0)))
    assert np.allclose(rgb_to_od(img)[0, 0], style.matrix[:, 0], atol=1e-12)


def test_render_is_linear_in_od(rng):
    style = reference_style()
    c1 = rng.uniform(0, 0.5, size=(6, 6, 2))
    c2 = rng.uniform(0, 0.5, size=(6, 6, 2))
    a, b = 0.7, 0.9
    lhs = concentrations_to_od(a * c1 + b * c2, style)
    rhs = a * concentrations_to_od(c1, style) + b * concentrations_to_od(c2, style)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_render_noise_free_is_deterministic(rng):
    conc = rng.uniform(0, 1, size=(8, 8, 2))
    a = render_from_concentrations(conc, reference_style())
    b = render_from_concentrations(conc, reference_style(), np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_render_rejects_bad_shape():
    with pytest.raises(InvalidInputError):
        render_from_concentrations(np.zeros((4, 4, 3)), reference_style())


def test_render_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        render_from_concentrations(np.full((4, 4, 2), 1.5), reference_style())


# -- Macenko ----------------------------------------------------------------------


def test_macenko_recovers_reference_noiseless(rng):
    style = reference_style()
    est = macenko_estimate(render_from_concentrations(well_spread(rng), style))
    assert np.all(angular_error(est, style.matrix) <= 2.0)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_macenko_noiseless_property(seed):
    rng = np.random.default_rng(seed)
    style = random_style(rng)
    est = macenko_estimate(render_from_concentrations(well_spread(rng, size=96), style))
    assert np.all(angular_error(est, style.matrix) <= 2.0)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_macenko_noisy_property(seed):
    rng = np.random.default_rng(seed)
    style = random_style(rng, sigma_od=0.05)
    est = macenko_estimate(render_from_concentrations(well_spread(rng), style, rng))
    assert np.all(angular_error(est, style.matrix) <= 8.0)


def test_macenko_white_image_is_insufficient():
    with pytest.raises(InsufficientTissueError):
        macenko_estimate(np.ones((32, 32, 3)))


def test_macenko_permutation_invariant(rng):
    img = render_from_concentrations(well_spread(rng, 64), reference_style())
    flat = img.reshape(-1, 3)
    shuffled = flat[rng.permutation(len(flat))].reshape(img.shape)
    assert np.allclose(macenko_estimate(img), macenko_estimate(shuffled), atol=1e-12)


def test_macenko_orders_hematoxylin_first(rng):
    for style in reference_basis():
        est = macenko_estimate(render_from_concentrations(well_spread(rng, 64), style))
        assert np.all(angular_error(est, style.matrix) <= 2.0)


def test_macenko_single_dye_is_degenerate():
    from bottlegan.exceptions import DegenerateInputError

    conc = np.zeros((16, 16, 2))
    conc[..., 0] = np.linspace(0.2, 1.0, 256).reshape(16, 16)
    with pytest.raises(DegenerateInputError):
        macenko_estimate(render_from_concentrations(conc, reference_style()))


# -- style algebra -----------------------------------------------------------------


def test_mix_one_hot_returns_that_style():
    basis = reference_basis()
    for i in range(len(basis)):
        w = np.zeros(len(basis))
        w[i] = 1.0
        assert mix_styles(basis, w) == basis[i]


@given(st.floats(0.0, 1.0))
def test_mix_with_itself(w):
    s = reference_basis()[2]
    mixed = mix_styles([s, s], [w, 1.0 - w])
    assert np.allclose(mixed.matrix, s.matrix, atol=1e-12)
    assert np.allclose(mixed.c_max, s.c_max, atol=1e-12)


@given(st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5))
def test_mixed_columns_unit_and_nonnegative(raw):
    w = np.array(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    m = mix_styles(reference_basis(), w).matrix
    assert np.all(m >= 0)
    assert np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6)


def test_mix_errors():
    basis = reference_basis()
    with pytest.raises(InvalidInputError):
        mix_styles([], [])
    with pytest.raises(InvalidInputError):
        mix_styles(basis[:2], [0.5, 0.6])
    with pytest.raises(InvalidInputError):
        mix_styles(basis[:2], [1.0])


def test_perturb_zero_sigma_is_identity():
    s = reference_style()
    assert perturb_style(s, np.random.default_rng(0)) == s


def test_perturb_keeps_invariants_for_many_seeds():
    base = StainStyle(reference_style().matrix, sigma_matrix=0.5)
    for seed in range(10_000):
        m = perturb_style(base, np.random.default_rng(seed)).matrix
        assert m.min() >= 0.0
        assert np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6)


def test_perturb_deviation_grows_with_sigma():
    ref = reference_style()
    means = []
    for sigma in (0.01, 0.03, 0.1, 0.3):
        s = StainStyle(ref.matrix, sigma_matrix=sigma)
        errs = [angular_error(perturb_style(s, np.random.default_rng(i)).matrix, ref.matrix).mean()
                for i in range(400)]
        means.append(np.mean(errs))
    assert all(a < b for a, b in zip(means, means[1:]))


def test_style_validation():
    with pytest.raises(InvalidInputError):
        StainStyle(np.ones((3, 2)))
    with pytest.raises(InvalidInputError):
        StainStyle(reference_style().matrix, c_max=(0.0, 1.0))
    with pytest.raises(InvalidInputError):
        StainStyle(reference_style().matrix, sigma_od=-1.0)


def test_style_dict_round_trip():
    s = reference_basis()[3]
    assert StainStyle.from_dict(s.to_dict()) == s


def test_reference_basis_shape():
    basis = reference_basis()
    assert len(basis) == 5
    for s in basis:
        assert np.allclose(np.linalg.norm(s.matrix, axis=0), 1.0)
