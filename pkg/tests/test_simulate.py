import json

import numpy as np
import pytest

from mlits.config import SamplerConfig, config_from_dict
from mlits.panel import GroupingSpec
from mlits.posterior import Model
from mlits.sampler import META_NAMES, Draws
from mlits.simulate import (
    PSI0_CAP_99,
    SimulationError,
    TruthRecord,
    alpha_from_curve,
    draw_prior,
    sbc,
    simulate_panel,
    thinned_ranks,
    uniformity_pvalue,
)

GROUPS = GroupingSpec.from_dict({"grp": ["a", "b", "c"]})


def flat_truth(U, T):
    return {"beta": np.array([0.0]), "gamma": np.zeros((T, U))}


def test_poisson_moments():
    grouping = GroupingSpec.from_dict({"grp": [f"l{k}" for k in range(10)]})
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 50})
    panel, _ = simulate_panel(cfg, flat_truth(11, 100), seed=1, grouping=grouping, n_times=100)
    assert panel.n_obs == 1000 and np.all(panel.size == 1000)
    # sd of the mean of 1000 Poisson(1000) cells is 1
    assert abs(panel.y.mean() - 1000) < 4


def test_step_effect_ratio():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 20})
    truth = flat_truth(4, 40)
    truth["beta"] = np.array([np.log(0.01)])
    alpha = np.zeros((4, 1))
    alpha[0, 0] = np.log(0.8)
    truth["alpha"] = alpha
    panel, record = simulate_panel(cfg, truth, seed=2, grouping=GROUPS, n_times=40, size=1e4)
    pre = panel.y[panel.obs_time < 20].sum()
    post = panel.y[panel.obs_time >= 20].sum()
    se = 0.8 * np.sqrt(1 / pre + 1 / post)
    assert abs(post / pre - 0.8) < 4 * se
    assert np.allclose(record.overall_curve[20:], np.log(0.8)) and np.all(record.overall_curve[:20] == 0)
    assert record.window_average() == pytest.approx(np.log(0.8))


def test_truth_scalars_match_layout():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 10})
    panel, record = simulate_panel(cfg, "prior", seed=4, grouping=GROUPS, n_times=16, psi0_cap=PSI0_CAP_99)
    model = Model(panel, cfg)
    assert list(record.scalars) == model.output_names()
    assert record.scalars["alpha[overall,overall,0]"] == pytest.approx(record.params["alpha"][0, 0])


def test_deterministic():
    cfg = config_from_dict({"likelihood": "binomial", "T_int": 10, "latent": "var1", "overdispersion": True})
    a, ra = simulate_panel(cfg, "prior", seed=9, grouping=GROUPS, n_times=15)
    b, rb = simulate_panel(cfg, "prior", seed=9, grouping=GROUPS, n_times=15)
    c, _ = simulate_panel(cfg, "prior", seed=10, grouping=GROUPS, n_times=15)
    assert a.same_as(b) and ra.scalars == rb.scalars
    assert not np.array_equal(a.y, c.y)
    assert np.all(a.y <= a.size) and np.all(a.size == 500)


def test_rate_cap_and_resampling():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 10, "intercept_scale": 1e3})
    counts = [simulate_panel(cfg, "prior", seed=s, grouping=GROUPS, n_times=16)[1].resamples for s in range(10)]
    seed = int(np.argmax(counts))
    assert counts[seed] > 0
    with pytest.raises(SimulationError, match="resamples"):
        simulate_panel(cfg, "prior", seed=seed, grouping=GROUPS, n_times=16, max_resample=0)
    with pytest.raises(SimulationError, match="1e9"):
        simulate_panel(cfg, {"beta": np.array([40.0])}, seed=0, grouping=GROUPS, n_times=16)


def test_capped_half_cauchy():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 10})
    model = Model(simulate_panel(cfg, "prior", seed=0, grouping=GROUPS, n_times=16)[0], cfg)
    rng = np.random.default_rng(0)
    draws = np.array([float(draw_prior(model, rng, PSI0_CAP_99)["psi0"]) for _ in range(2000)])
    assert draws.max() <= PSI0_CAP_99
    assert np.median(draws) == pytest.approx(1.0, rel=0.15)  # the cap keeps the median near 1


def test_truth_loglik_beats_no_effect():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 24})
    for seed in range(5):
        truth = {"beta": np.array([np.log(0.01)]), "alpha": np.array([[0.3], [0.0], [0.0], [0.0]]),
                 "sigma": np.full(4, 0.02)}
        panel, record = simulate_panel(cfg, truth, seed=seed, grouping=GROUPS, n_times=40, size=1e4)
        model = Model(panel, cfg)
        params = {k: np.asarray(v) for k, v in record.params.items()}
        null = dict(params, alpha=np.zeros_like(params["alpha"]))
        assert abs(record.effect[24:, 0]).min() >= 0.2
        assert model.terms(params)["likelihood"] > model.terms(null)["likelihood"]


def test_alpha_from_curve_reproduces_smooth_curve():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 24})
    model = Model(simulate_panel(cfg, flat_truth(4, 40), grouping=GROUPS, n_times=40)[0], cfg)
    s = np.arange(16)
    curve = np.log(0.8) - 0.3 * (np.exp(-s / 4) - np.exp(-s / 4).mean())
    coef = alpha_from_curve(model.basis, curve)
    assert coef[0] == pytest.approx(curve.mean(), abs=1e-15)
    assert np.max(np.abs(model.E_post @ coef - curve)) < 0.02
    with pytest.raises(ValueError):
        alpha_from_curve(model.basis, curve[:-1])


def test_truth_record_round_trip(tmp_path):
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 10})
    _, record = simulate_panel(cfg, "prior", seed=4, grouping=GROUPS, n_times=16)
    path = tmp_path / "truth.json"
    record.write_json(path)
    back = TruthRecord.from_dict(json.loads(path.read_text()))
    assert back.scalars == record.scalars
    assert np.array_equal(back.effect, record.effect)


def test_thinned_ranks_bounds(rng):
    names = ["x", "y"]
    values = rng.normal(size=(2, 150, 2))
    draws = Draws(values, names, np.zeros((2, 150, len(META_NAMES))))
    assert list(thinned_ranks({"x": -1e9, "y": 1e9}, draws, names)) == [0, 99]
    r = thinned_ranks({"x": 0.0, "y": 0.3}, draws, names)
    assert np.all((0 <= r) & (r <= 99))
    with pytest.raises(ValueError, match="thin"):
        thinned_ranks({"x": 0.0}, Draws(values[:, :40], names, np.zeros((2, 40, 6))), ["x"])


def test_uniformity_pvalue(rng):
    assert uniformity_pvalue(np.tile(np.arange(100), 3)) == pytest.approx(1.0)
    assert uniformity_pvalue(np.zeros(100, dtype=int)) < 1e-10
    assert uniformity_pvalue(rng.integers(0, 100, 100)) > 1e-4
    with pytest.raises(ValueError):
        uniformity_pvalue(np.zeros(10), n_ranks=99, n_bins=7)


def test_sbc_argument_checks():
    cfg = config_from_dict({"likelihood": "poisson", "T_int": 16})
    with pytest.raises(ValueError, match="50"):
        sbc(cfg, 10, grouping=GROUPS, n_times=24)
    with pytest.raises(ValueError, match="tracked"):
        sbc(cfg, 50, grouping=GROUPS, n_times=24, tracked=["nope"],
            sampler=SamplerConfig(chains=1, warmup=150, samples=99))
