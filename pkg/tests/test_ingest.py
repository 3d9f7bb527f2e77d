import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbhdrisk.ingest import (
    FactorInfo, ParseError, SyntheticSpec, TableSchema, ValidationError, generate_synthetic,
    load_facilities, load_factor_table, load_windrose, standardize, sufficient_factors,
    unstandardize, validate_variation, write_factor_table,
)

from conftest import make_table

HEADER = "neighborhood_id,name,lat,lon,response,a,b\n"


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_missing_responses_are_kept_but_unusable(tmp_path):
    lines = [HEADER]
    for i in range(140):
        resp = "" if i in (5, 77) else f"{10 + i % 7}.5"
        lines.append(f"N{i},hood {i},43.7,-79.4,{resp},{i},{i % 3}\n")
    t = load_factor_table(_write(tmp_path, "".join(lines)))
    assert t.n_rows == 140
    assert int(t.usable.sum()) == 138
    assert t.missing_mask.shape == (140, 3)
    assert t.missing_mask[:, 0].sum() == 2


def test_empty_file_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_factor_table(_write(tmp_path, ""))


def test_duplicate_id_names_the_id(tmp_path):
    text = HEADER + "N1,x,43,-79,1,1,1\nN2,y,43,-79,1,1,1\nN1,z,43,-79,1,1,1\n"
    with pytest.raises(ValidationError, match="'N1'"):
        load_factor_table(_write(tmp_path, text))


def test_malformed_cell_reports_row_and_column(tmp_path):
    text = HEADER + "N1,x,43,-79,1,1,1\nN2,y,43,-79,abc,1,1\n"
    with pytest.raises(ParseError) as exc:
        load_factor_table(_write(tmp_path, text))
    assert exc.value.row == 3
    assert exc.value.col == "response"


def test_ragged_row_is_a_parse_error(tmp_path):
    text = HEADER + "N1,x,43,-79,1,1\n"
    with pytest.raises(ParseError) as exc:
        load_factor_table(_write(tmp_path, text))
    assert exc.value.row == 2


def test_missing_response_column(tmp_path):
    with pytest.raises(ValidationError, match="lcpmr"):
        load_factor_table(_write(tmp_path, HEADER + "N1,x,43,-79,1,1,1\n"),
                          TableSchema(response="lcpmr"))


def test_negative_response_rejected(tmp_path):
    with pytest.raises(ValidationError, match="non-negative"):
        load_factor_table(_write(tmp_path, HEADER + "N1,x,43,-79,-1,1,1\n"))


def test_schema_selects_and_describes_factors(tmp_path):
    schema = TableSchema(factors={"b": FactorInfo("bee count", "n", "natural_env")})
    t = load_factor_table(_write(tmp_path, HEADER + "N1,x,43,-79,1,2,3\n"), schema)
    assert t.factor_names == ["b"]
    assert t.info["b"].group == "natural_env"


def test_unknown_group_rejected():
    with pytest.raises(ValidationError):
        FactorInfo("x", group="weather")


def test_columns_are_read_only():
    t = make_table({"a": [1.0, 2.0]}, [1.0, 2.0])
    with pytest.raises(ValueError):
        t.factors["a"][0] = 5.0


def test_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    t = make_table({"a": rng.normal(size=20), "b": rng.exponential(size=20)},
                   rng.uniform(0, 50, size=20), lat=rng.uniform(43, 44, 20),
                   lon=rng.uniform(-80, -79, 20))
    t = t.with_factor("c", np.where(np.arange(20) % 4 == 0, np.nan, 1 / 3),
                      FactorInfo("c"))
    p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
    write_factor_table(t, p1)
    back = load_factor_table(p1)
    write_factor_table(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name in t.factor_names:
        np.testing.assert_array_equal(back.factors[name], t.factors[name])
    np.testing.assert_array_equal(back.response, t.response)


def test_validate_variation_counts_distinct_values():
    n = 40
    rng = np.random.default_rng(0)
    factors = {f"f{j}": rng.normal(size=n) for j in range(12)}
    for j in range(4):
        factors[f"coarse{j}"] = np.arange(n) % 9  # nine distinct values
    t = make_table(factors, rng.uniform(1, 5, n))
    metas = validate_variation(t, 10)
    assert len(metas) == 16
    assert sum(m.variation_sufficient for m in metas) == 12
    assert {m.unique_value_count for m in metas if not m.variation_sufficient} == {9}


def test_constant_column_is_insufficient():
    t = make_table({"c": np.ones(20), "v": np.arange(20.0)}, np.ones(20))
    metas = {m.name: m for m in validate_variation(t, 10)}
    assert metas["c"].unique_value_count == 1
    assert not metas["c"].variation_sufficient
    assert metas["v"].variation_sufficient
    assert sufficient_factors(t, 10) == ["v"]


def test_variation_ignores_rows_without_response():
    resp = np.r_[np.ones(5), np.full(10, np.nan)]
    t = make_table({"v": np.arange(15.0)}, resp)
    assert validate_variation(t, 3)[0].unique_value_count == 5


def test_standardize_hand_values():
    t = make_table({"a": [1.0, 2.0, 3.0]}, [1.0, 1.0, 1.0])
    s = standardize(t, ["a"])
    np.testing.assert_allclose(s.factors["a"], [-1.0, 0.0, 1.0], atol=1e-15)
    assert s.scaling["a"] == (2.0, 1.0)


def test_standardize_constant_column_names_it():
    t = make_table({"flat": [4.0, 4.0, 4.0]}, [1.0, 1.0, 1.0])
    with pytest.raises(ValidationError, match="flat"):
        standardize(t, ["flat"])


def test_standardize_skips_missing_cells():
    t = make_table({"a": [1.0, np.nan, 3.0]}, [1.0, 1.0, 1.0])
    s = standardize(t, ["a"])
    assert math.isnan(s.factors["a"][1])
    np.testing.assert_allclose(s.factors["a"][[0, 2]], [-1 / math.sqrt(2), 1 / math.sqrt(2)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30).filter(
    lambda v: np.std(v) > 1e-3))
def test_standardize_is_idempotent_and_invertible(values):
    t = make_table({"a": values}, np.ones(len(values)))
    once = standardize(t, ["a"])
    twice = standardize(once, ["a"])
    np.testing.assert_allclose(twice.factors["a"], once.factors["a"], atol=1e-12)
    back = unstandardize(once, ["a"])
    np.testing.assert_allclose(back.factors["a"], values, atol=1e-9 * (1 + np.abs(values).max()))


def _spec(**kw):
    base = dict(n_neighborhoods=130, n_factors=2, n_classes=3,
                class_proportions=(61 / 130, 11 / 130, 58 / 130),
                class_means=[[0, 0], [5, 5], [10, 10]], class_sds=[[1, 1]] * 3,
                response_functions={"x1": {"kind": "linear", "scale": 2.0}},
                noise_sd=1.0, seed=11)
    base.update(kw)
    return SyntheticSpec(**base)


def test_non_simplex_proportions_rejected():
    with pytest.raises(ValidationError, match="simplex"):
        _spec(class_proportions=(0.44, 0.08, 0.42))


def test_class_sizes_follow_proportions():
    _, labels, _ = generate_synthetic(_spec())
    counts = np.bincount(labels, minlength=3)
    # frozen from an independent Generator.choice draw with the same seed
    np.testing.assert_array_equal(counts, [73, 9, 48])
    p = np.array([61, 11, 58]) / 130
    sd = np.sqrt(130 * p * (1 - p))
    assert np.all(np.abs(counts - 130 * p) <= 3 * sd)


def test_noiseless_linear_response_is_exactly_linear():
    t, _, funcs = generate_synthetic(_spec(noise_sd=0.0, intercept=50.0))
    np.testing.assert_allclose(t.response, 50.0 + 2.0 * t.factors["x1"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(funcs["x1"](np.array([1.5])), [3.0])


def test_same_seed_same_bytes(tmp_path):
    a, _, _ = generate_synthetic(_spec())
    b, _, _ = generate_synthetic(_spec())
    write_factor_table(a, tmp_path / "a.csv")
    write_factor_table(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_negative_noise_sd_rejected():
    with pytest.raises(ValidationError):
        _spec(noise_sd=-1.0)


def test_facilities_pool_years(tmp_path):
    text = ("facility_id,lat,lon,year,pollutant,tep_value\n"
            "F1,43.7,-79.4,1995,benzene,2.0\n"
            "F1,43.7,-79.4,2012,lead,3.5\n"
            "F2,43.6,-79.5,1995,lead,0.5\n")
    recs = load_facilities(_write(tmp_path, text, "f.csv"))
    assert [r.facility_id for r in recs] == ["F1", "F2"]
    assert recs[0].years == (1995, 2012)
    assert recs[0].tep_values == (2.0, 3.5)


def test_facilities_negative_tep_rejected(tmp_path):
    text = "facility_id,lat,lon,year,pollutant,tep_value\nF1,43.7,-79.4,1995,x,-2\n"
    with pytest.raises(ValidationError):
        load_facilities(_write(tmp_path, text, "f.csv"))


def test_windrose_loads(tmp_path):
    text = "sector_start_deg,sector_end_deg,frequency\n0,180,0.75\n180,360,0.25\n"
    rose = load_windrose(_write(tmp_path, text, "w.csv"))
    assert len(rose.sectors) == 2
