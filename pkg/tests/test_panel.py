import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlits.panel import (
    GroupingSpec,
    Panel,
    PanelError,
    PoststratTable,
    load_panel,
    load_poststrat,
    piecewise_ramp,
    seasonal_harmonics,
    write_panel,
)

SPEC = GroupingSpec.from_dict({"race": ["white", "black"]})


def write(tmp_path, text, name="panel.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_two_series_three_times(tmp_path):
    rows = ["series_id,time,y,exposure,race"]
    for sid, race in (("s1", "white"), ("s2", "black")):
        rows += [f"{sid},{t},{t + 1},100,{race}" for t in range(3)]
    panel = load_panel(write(tmp_path, "\n".join(rows) + "\n"), SPEC)
    assert panel.n_obs == 6
    assert panel.n_times == 3
    assert panel.n_series == 2
    assert panel.series_levels.ravel().tolist() == [0, 1]


@pytest.mark.parametrize(
    "body, message",
    [
        ("s1,0,1,0,white", "exposure must be positive"),
        ("s1,0,1,-3,white", "exposure must be positive"),
        ("s1,0,x,10,white", "line 2: cannot parse y"),
        ("s1,0,1,10,asian", "unknown level 'asian'"),
        ("s1,0,1,10", "expected 5 fields"),
        ("s1,0,1.5,10,white", "y must be an integer"),
        ("s1,-1,1,10,white", "negative time"),
    ],
)
def test_malformed_rows(tmp_path, body, message):
    with pytest.raises(PanelError, match=message):
        load_panel(write(tmp_path, "series_id,time,y,exposure,race\n" + body + "\n"), SPEC)


def test_binomial_y_above_trials(tmp_path):
    p = write(tmp_path, "series_id,time,y,trials,race\ns1,0,5,3,white\n")
    with pytest.raises(PanelError, match="0 <= y <= trials"):
        load_panel(p, SPEC)


def test_duplicate_cell(tmp_path):
    p = write(tmp_path, "series_id,time,y,exposure,race\ns1,0,1,10,white\ns1,0,2,10,white\n")
    with pytest.raises(PanelError, match="line 3: duplicate observation"):
        load_panel(p, SPEC)


def test_series_changing_level(tmp_path):
    p = write(tmp_path, "series_id,time,y,exposure,race\ns1,0,1,10,white\ns1,1,2,10,black\n")
    with pytest.raises(PanelError, match="changes grouping levels"):
        load_panel(p, SPEC)


def test_header_checks(tmp_path):
    with pytest.raises(PanelError, match="header must start"):
        load_panel(write(tmp_path, "id,time,y,exposure,race\n"), SPEC)
    with pytest.raises(PanelError, match="lacks grouping factor"):
        load_panel(write(tmp_path, "series_id,time,y,exposure\ns,0,1,1\n"), SPEC)


def test_time_gap_rejected(tmp_path):
    p = write(tmp_path, "series_id,time,y,exposure,race\ns1,0,1,10,white\ns1,2,1,10,white\n")
    with pytest.raises(PanelError, match="contiguous"):
        load_panel(p, SPEC)


def test_missing_cells_recorded(tmp_path):
    text = (
        "series_id,time,y,exposure,race\n"
        "s1,0,1,10,white\ns1,1,,10,white\ns1,2,3,10,white\n"
        "s2,0,1,10,black\ns2,2,2,10,black\n"
    )
    panel = load_panel(write(tmp_path, text), SPEC)
    assert panel.n_obs == 4
    assert panel.n_times == 3
    assert sorted(panel.missing) == [("s1", 1), ("s2", 1)]


def test_covariate_columns(tmp_path):
    text = "series_id,time,y,exposure,race,x1\ns1,0,1,10,white,0.5\ns1,1,1,10,white,-2\n"
    panel = load_panel(write(tmp_path, text), SPEC)
    assert panel.covariate_names == ("x1",)
    np.testing.assert_array_equal(panel.covariates[:, 0], [0.5, -2.0])


def test_grouping_spec_invariants():
    with pytest.raises(PanelError, match="reserved"):
        GroupingSpec.from_dict({"overall": ["a"]})
    with pytest.raises(PanelError, match="no levels"):
        GroupingSpec.from_dict({"g": []})
    with pytest.raises(PanelError, match="duplicate level"):
        GroupingSpec.from_dict({"g": ["a", "a"]})
    g = GroupingSpec.from_dict({"age": ["y", "o"], "race": ["w", "b", "h"]})
    assert g.units == [("overall", "overall"), ("age", "y"), ("age", "o"), ("race", "w"), ("race", "b"), ("race", "h")]
    assert g.unit_factor.tolist() == [0, 1, 1, 2, 2, 2]
    assert g.n_units == 6


def test_seasonal_examples():
    H = seasonal_harmonics(4, 4, 1)
    np.testing.assert_allclose(H[1], [1.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(seasonal_harmonics(7, 3.5, 1)[0], [0.0, 1.0])
    H = seasonal_harmonics(52, 52, 2)
    assert H.shape == (52, 4)
    assert np.all(np.abs(H.mean(axis=0)) < 1e-12)


@pytest.mark.parametrize("periods, period, n", [(3, 12, 2), (2, 52, 5), (5, 7, 3)])
def test_harmonics_full_periods_sum_to_zero(periods, period, n):
    H = seasonal_harmonics(periods * period, period, n)
    assert np.all(np.abs(H.sum(axis=0)) < 1e-9)


def test_seasonal_errors():
    with pytest.raises(ValueError, match="alias"):
        seasonal_harmonics(10, 4, 2)
    with pytest.raises(ValueError):
        seasonal_harmonics(10, 1, 1)
    with pytest.raises(ValueError):
        seasonal_harmonics(10, 12, 0)


def test_ramp_examples():
    np.testing.assert_array_equal(piecewise_ramp(5, 2), [0, 0, 0, 1, 2])
    np.testing.assert_array_equal(piecewise_ramp(5, 0), [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(piecewise_ramp(6, 1, 3), [0, 0, 1, 2, 2, 2])
    with pytest.raises(ValueError, match="stop must exceed start"):
        piecewise_ramp(6, 3, 3)
    with pytest.raises(ValueError):
        piecewise_ramp(6, 6)


def _panel_strategy():
    @st.composite
    def build(draw):
        n_times = draw(st.integers(1, 5))
        n_series = draw(st.integers(1, 4))
        trials = draw(st.booleans())
        levels = draw(st.lists(st.integers(0, 1), min_size=n_series, max_size=n_series))
        cells = [(i, t) for i in range(n_series) for t in range(n_times)]
        keep = draw(st.lists(st.booleans(), min_size=len(cells), max_size=len(cells)))
        chosen = [c for c, k in zip(cells, keep) if k]
        for t in range(n_times):  # every time observed at least once
            if not any(c[1] == t for c in chosen):
                chosen.append((0, t))
        chosen.sort()
        n = len(chosen)
        if trials:
            size = draw(st.lists(st.integers(1, 50), min_size=n, max_size=n))
            y = [draw(st.integers(0, s)) for s in size]
        else:
            size = draw(st.lists(st.floats(1e-3, 1e6, allow_nan=False), min_size=n, max_size=n))
            y = draw(st.lists(st.integers(0, 10**6), min_size=n, max_size=n))
        cov = draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=n, max_size=n))
        return Panel(
            grouping=SPEC,
            series_ids=[f"id {i}" for i in range(n_series)],
            series_levels=np.array(levels)[:, None],
            obs_series=np.array([c[0] for c in chosen]),
            obs_time=np.array([c[1] for c in chosen]),
            y=np.array(y),
            size=np.array(size),
            size_kind="trials" if trials else "exposure",
            covariates=np.array(cov)[:, None],
            covariate_names=("x",),
            n_times=n_times,
        )

    return build()


@settings(max_examples=40, deadline=None)
@given(_panel_strategy())
def test_write_load_round_trip(tmp_path_factory, panel):
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_panel(panel, path)
    again = load_panel(path, SPEC)
    assert again.same_as(panel)


def test_with_covariates_names():
    panel = Panel(SPEC, ["a"], np.array([[0]]), np.zeros(4, int), np.arange(4), np.ones(4), np.ones(4), n_times=4)
    p2 = panel.with_covariates({"season": seasonal_harmonics(4, 4, 1), "ramp": piecewise_ramp(4, 1)})
    assert p2.covariate_names == ("season_1", "season_2", "ramp")
    np.testing.assert_array_equal(p2.covariates[:, 2], [0, 0, 1, 2])
    with pytest.raises(PanelError, match="duplicate covariate"):
        p2.with_covariates({"ramp": piecewise_ramp(4, 1)})


def test_poststrat_table(tmp_path):
    p = write(tmp_path, "race,weight\nwhite,3\nblack,1\n", "w.csv")
    table = load_poststrat(p, SPEC)
    np.testing.assert_array_equal(table.strata.ravel(), [0, 1])
    np.testing.assert_allclose(table.normalized, [0.75, 0.25])
    bad = write(tmp_path, "race,weight\nwhite,3\nasian,1\n", "bad.csv")
    with pytest.raises(PanelError, match="race=asian"):
        load_poststrat(bad, SPEC)
    with pytest.raises(PanelError, match="positive total"):
        PoststratTable(SPEC, np.array([[0]]), np.array([0.0]))
    with pytest.raises(PanelError, match="nonnegative"):
        PoststratTable(SPEC, np.array([[0], [1]]), np.array([1.0, -1.0]))
