import numpy as np
import pytest

from mlits.basis import BasisError, basis_for_panel, build_basis, effect_row, knot_count


def test_knot_count():
    assert knot_count(13) == 7
    assert knot_count(4) == 2
    assert knot_count(2) == 1
    with pytest.raises(BasisError):
        knot_count(1)


def test_level_shift_only_mode():
    b = build_basis([0, 1], 1)
    assert b.B.shape == (2, 0)
    assert b.H == 0 and b.H_r == 0 and not b.has_linear
    np.testing.assert_array_equal(effect_row(b, 1), [1.0])


def test_two_knots_is_linear_only():
    b = build_basis(np.arange(5, 12), 2)
    assert b.H == 1 and b.H_r == 0 and b.has_linear
    np.testing.assert_allclose(np.diff(b.B[:, 0]), np.full(6, 1 / 6))


@pytest.mark.parametrize("n_post, k", [(2, None), (3, None), (10, 5), (13, None), (16, None), (40, 20), (7, 3)])
def test_columns_centred_and_penalty_pd(n_post, k):
    b = build_basis(np.arange(3, 3 + n_post), k)
    assert b.H < n_post
    if b.H:
        assert np.max(np.abs(b.B.sum(axis=0))) < 1e-10
    if b.H_r:
        np.testing.assert_allclose(b.P1, b.P1.T, atol=1e-12)
        assert np.linalg.eigvalsh(b.P1).min() > 0
    if b.has_linear:
        np.testing.assert_array_equal(b.P2, [[1.0]])


def test_range_quadratic_form_matches_double_loop(rng):
    b = build_basis(np.arange(10), 5)
    for _ in range(20):
        v = rng.normal(size=b.H_r)
        d = b.radial_coefficients(v)
        # side constraint on per-knot weights
        assert abs(d.sum()) < 1e-12 and abs(d @ b.knots) < 1e-12
        oracle = 0.0
        for r in range(b.knots.size):
            for s in range(b.knots.size):
                oracle += d[r] * d[s] * abs(b.knots[r] - b.knots[s]) ** 3
        assert abs(v @ b.range_gram() @ v - oracle) < 1e-10


def test_basis_spans_projected_radials():
    b = build_basis(np.arange(20), 6)
    x = b.times
    R = np.abs(x[:, None] - b.knots[None, :]) ** 3 @ b.Z
    poly = np.column_stack([np.ones_like(x), x])
    resid = R - poly @ np.linalg.lstsq(poly, R, rcond=None)[0]
    np.testing.assert_allclose(b.B[:, : b.H_r], resid - resid.mean(axis=0), atol=1e-12)


def test_effect_row():
    b = basis_for_panel(20, 12)
    np.testing.assert_array_equal(effect_row(b, 11), np.zeros(b.H + 1))
    row = effect_row(b, 12)
    assert row[0] == 1.0
    np.testing.assert_array_equal(row[1:], b.B[0])
    total = sum(effect_row(b, t) for t in range(12, 20))
    assert np.all(np.abs(total[1:]) < 1e-10)
    assert total[0] == 8
    with pytest.raises(BasisError):
        effect_row(b, 20)
    with pytest.raises(BasisError):
        effect_row(b, -1)


def test_spline_part_has_zero_post_mean(rng):
    b = basis_for_panel(40, 24)
    for _ in range(100):
        a = rng.normal(scale=5.0, size=b.H)
        assert abs(np.mean(b.B @ a)) < 1e-10


def test_time_mapping_and_knots():
    b = build_basis(np.arange(100, 111), 6)
    assert b.times[0] == 0.0 and b.times[-1] == 1.0
    np.testing.assert_allclose(b.knots, np.linspace(0, 1, 6))
    assert b.T_int == 100 and b.n_times == 111


def test_deterministic():
    a, b = build_basis(np.arange(30), 15), build_basis(np.arange(30), 15)
    assert a.B.tobytes() == b.B.tobytes() and a.P1.tobytes() == b.P1.tobytes()


def test_bad_inputs():
    with pytest.raises(BasisError, match="strictly increasing"):
        build_basis([0, 2, 1], 2)
    with pytest.raises(BasisError, match="at least as many"):
        build_basis([0, 1, 2], 4)
    with pytest.raises(BasisError, match="integers"):
        build_basis([0.5, 1.0], 1)


def test_ridge_scale():
    b = build_basis(np.arange(16), 8)
    gram = b.range_gram()
    assert b.ridge == pytest.approx(1e-8 * np.trace(gram) / b.H_r, rel=1e-6)
