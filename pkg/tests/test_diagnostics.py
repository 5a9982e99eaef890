import numpy as np
import pytest

from mlits.diagnostics import diagnose, ess_bulk, ess_mean, ess_tail, rank_rhat, split_rhat
from mlits.sampler import META_NAMES, Draws


def as_draws(x, names=("x",)):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    return Draws(x, list(names), np.zeros(x.shape[:2] + (len(META_NAMES),)))


def test_constant_chains_flagged():
    d = diagnose(as_draws(np.full((4, 100), 3.0)))
    assert d.ess_bulk[0] == 0 and d.ess_tail[0] == 0
    assert np.isnan(d.rhat[0])
    assert "ess_undefined" in d.flags and "constant_parameters" in d.warning_codes()


def test_iid_normal_rhat(rng):
    x = rng.normal(size=(4, 1000))
    assert 0.999 < split_rhat(x) < 1.01
    assert 0.999 < rank_rhat(x) < 1.01
    assert 3000 < ess_bulk(x) <= 4000
    assert 2500 < ess_tail(x) <= 4000


def test_offset_chains(rng):
    x = rng.normal(size=(2, 500))
    x[1] += 10
    assert split_rhat(x) > 2
    d = diagnose(as_draws(x))
    assert "rhat_gt_1.01" in d.warning_codes() and not d.converged


def test_split_rhat_hand_value():
    # two chains, each split in half: halves [0,1],[2,3],[10,11],[12,13]
    x = np.array([[0.0, 1.0, 2.0, 3.0], [10.0, 11.0, 12.0, 13.0]])
    means = np.array([0.5, 2.5, 10.5, 12.5])
    W = 0.5
    B = 2 * means.var(ddof=1)
    expected = np.sqrt(((1 - 1 / 2) * W + B / 2) / W)
    assert split_rhat(x) == pytest.approx(expected, rel=1e-12)


def test_ess_never_exceeds_draws(rng):
    # antithetic chains would report ESS above the draw count without the cap
    x = np.empty((4, 500))
    x[:, 0::2] = rng.normal(size=(4, 250))
    x[:, 1::2] = -x[:, 0::2] + 0.01 * rng.normal(size=(4, 250))
    assert ess_mean(x) <= x.size
    assert ess_bulk(x) <= x.size


def test_ar1_ess(rng):
    phi = 0.8
    x = np.empty((4, 4000))
    x[:, 0] = rng.normal(size=4) / np.sqrt(1 - phi**2)
    for t in range(1, 4000):
        x[:, t] = phi * x[:, t - 1] + rng.normal(size=4)
    expected = x.size * (1 - phi) / (1 + phi)
    assert ess_mean(x) == pytest.approx(expected, rel=0.2)


def test_single_chain(rng):
    d = diagnose(as_draws(rng.normal(size=(1, 400))))
    assert "single_chain" in d.flags and "single_chain" in d.warning_codes()
    assert np.isfinite(d.rhat[0])


def test_too_few_draws():
    with pytest.raises(ValueError, match="4 draws"):
        diagnose(as_draws(np.zeros((2, 3))))


def test_matches_arviz(rng):
    az = pytest.importorskip("arviz")
    x = np.cumsum(rng.normal(size=(4, 300)), axis=1) * 0.1 + rng.normal(size=(4, 300))
    assert rank_rhat(x) == pytest.approx(float(az.rhat(x, method="rank")), rel=1e-8)
    assert ess_bulk(x) == pytest.approx(float(az.ess(x, method="bulk")), rel=1e-8)
    assert ess_tail(x) == pytest.approx(float(az.ess(x, method="tail")), rel=1e-8)


def test_summary_keys(rng):
    d = diagnose(as_draws(rng.normal(size=(4, 100, 2)), names=("a", "b")))
    s = d.summary()
    assert {"max_rhat", "min_ess_bulk", "n_divergent", "warnings"} <= set(s)
    assert [row["name"] for row in d.table()] == ["a", "b"]
