import logging
import math
from datetime import date
from itertools import product
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ecoperceiver import catalog, pipeline
from ecoperceiver.errors import InputError
from ecoperceiver.pipeline import (CadenceError, CSVFormatError, FusionError, ManifestError, RawRelease,
                                   SplitError, SplitPlan)

DATA = Path(__file__).parent / "data"


def _release(rid, start, periods, values, released, freq="60min", qc=0.0, units=None):
    idx = pd.date_range(start, periods=periods, freq=freq, name=pipeline.TIME_COLUMN)
    table = pd.DataFrame({"TA_F": np.asarray(values, float) * np.ones(periods),
                          "TA_F_QC": np.full(periods, qc)}, index=idx)
    return RawRelease(rid, date.fromisoformat(released), table, units or {})


# -- release I/O -------------------------------------------------------------
def test_read_release_csv_and_roundtrip(tmp_path):
    rel = pipeline.read_release_csv(DATA / "downsample_input.csv")
    assert rel.release_id == "fixture" and rel.release_date == date(2020, 6, 1)
    assert rel.cadence == 30
    assert list(rel.table.columns) == ["TA_F", "TA_F_QC", "P_F", "P_F_QC", "WD", "SW_IN_F", "SW_IN_F_QC"]
    out = pipeline.release_to_csv(rel, tmp_path / "r.csv")
    again = pipeline.read_release_csv(out)
    pd.testing.assert_frame_equal(rel.table, again.table)


@pytest.mark.parametrize("body, line, fragment", [
    ("TIMESTAMP_START,TA_F,TA_F_QC\n202001010000,1.0\n", 2, "expected 3 fields"),
    ("TIMESTAMP_START,TA_F,TA_F_QC\n2020-01-01,1.0,0\n", 2, "bad timestamp"),
    ("TIMESTAMP_START,TA_F,TA_F_QC\n202001010000,abc,0\n", 2, "TA_F"),
    ("TIMESTAMP_START,TA_F,TA_F_QC\n202001010000,1.0,7\n", 2, "QC flag"),
    ("TA_F,TIMESTAMP_START\n", 1, "first column"),
])
def test_malformed_csv_reports_file_and_line(tmp_path, body, line, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(CSVFormatError) as err:
        pipeline.read_release_csv(path)
    assert err.value.line == line
    assert fragment in str(err.value) and "bad.csv" in str(err.value)


def test_missing_tokens_and_pruned_columns(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("TIMESTAMP_START,TA_F,TA_F_QC,EXTRA\n202001010000,-9999,NA,5\n202001010100,,0,5\n")
    rel = pipeline.read_release_csv(path)
    assert "EXTRA" not in rel.table
    assert rel.table["TA_F"].isna().all()


def test_release_needs_qc_column_and_fixed_cadence():
    idx = pd.DatetimeIndex(["2020-01-01 00:00", "2020-01-01 01:00"], name=pipeline.TIME_COLUMN)
    with pytest.raises(InputError):
        RawRelease("r", date(2020, 1, 1), pd.DataFrame({"TA_F": [1.0, 2.0]}, index=idx))
    bad = pd.DatetimeIndex(["2020-01-01 00:00", "2020-01-01 01:00", "2020-01-01 01:30"])
    with pytest.raises(CadenceError):
        pipeline.check_cadence(pd.DataFrame({"x": [1, 2, 3]}, index=bad))


# -- fusion ------------------------------------------------------------------
def test_fusion_newer_release_wins_on_overlap():
    a = _release("A", "2001-01-01", 24 * 10, 1.0, "2021-01-01")
    b = _release("B", "2001-01-08", 24 * 10, 2.0, "2023-01-01", qc=1.0)
    fused = pipeline.fuse_releases([a, b])
    assert fused.index[0] == pd.Timestamp("2001-01-01") and len(fused) == 24 * 17
    assert (fused.loc[:"2001-01-07 23:00", "TA_F"] == 1.0).all()
    assert (fused.loc["2001-01-08":, "TA_F"] == 2.0).all()
    assert (fused.loc["2001-01-08":, "TA_F_QC"] == 1.0).all()
    # order of the input list does not matter
    pd.testing.assert_frame_equal(fused, pipeline.fuse_releases([b, a]))


def test_fusion_disjoint_is_concatenation():
    a = _release("A", "2001-01-01", 5, 1.0, "2021-01-01")
    b = _release("B", "2001-01-01 05:00", 5, 2.0, "2023-01-01")
    fused = pipeline.fuse_releases([a, b])
    assert fused["TA_F"].tolist() == [1.0] * 5 + [2.0] * 5


@pytest.mark.parametrize("new_present, old_present", list(product([True, False], repeat=2)))
def test_fusion_precedence_all_presence_cases(new_present, old_present):
    old = _release("old", "2020-01-01", 1, 1.0 if old_present else np.nan, "2020-01-01", qc=2.0)
    new = _release("new", "2020-01-01", 1, 5.0 if new_present else np.nan, "2022-01-01", qc=0.0)
    old.table.loc[:, "TA_F_QC"] = 2.0 if old_present else np.nan
    new.table.loc[:, "TA_F_QC"] = 0.0 if new_present else np.nan
    fused = pipeline.fuse_releases([old, new])
    value, flag = fused["TA_F"].iloc[0], fused["TA_F_QC"].iloc[0]
    if new_present:
        assert (value, flag) == (5.0, 0.0)
    elif old_present:
        assert (value, flag) == (1.0, 2.0)
    else:
        assert np.isnan(value) and np.isnan(flag)


def test_fusion_unit_conflicts():
    a = _release("A", "2001-01-01", 3, 1.0, "2021-01-01", units={"TA_F": "K"})
    with pytest.raises(FusionError):
        pipeline.fuse_releases([a])
    b = _release("B", "2001-01-01", 3, 1.0, "2021-01-01", units={"XX_UNKNOWN": "m"})
    c = _release("C", "2001-01-01", 3, 1.0, "2022-01-01", units={"XX_UNKNOWN": "cm"})
    with pytest.raises(FusionError):
        pipeline.fuse_releases([b, c])
    with pytest.raises(FusionError):
        pipeline.fuse_releases([])


def test_fusion_mixed_cadence_downsamples_half_hourly():
    a = _release("A", "2020-01-01", 8, 1.0, "2021-01-01", freq="30min")
    b = _release("B", "2020-01-01 04:00", 4, 2.0, "2022-01-01")
    fused = pipeline.fuse_releases([a, b])
    assert pipeline.cadence_minutes(fused) == 60 and len(fused) == 8


# -- downsampling ------------------------------------------------------------
def test_downsample_golden_is_byte_exact(tmp_path):
    rel = pipeline.read_release_csv(DATA / "downsample_input.csv")
    out = pipeline.write_table_csv(pipeline.downsample_hourly(rel.table), tmp_path / "hourly.csv")
    assert out.read_bytes() == (DATA / "downsample_golden.csv").read_bytes()


def _pair(code, a, b):
    idx = pd.date_range("2020-01-01", periods=2, freq="30min", name=pipeline.TIME_COLUMN)
    table = pd.DataFrame({code: [a, b]}, index=idx)
    var = catalog.lookup(code)
    if var.qc:
        table[var.qc] = [0.0, 0.0]
    return pipeline.downsample_hourly(table)[code].iloc[0]


def test_downsample_rules():
    assert _pair("TA_F", 1.0, 3.0) == 2.0
    assert _pair("P_F", 1.0, 3.0) == 4.0
    assert _pair("WD", 350.0, 10.0) == 0.0


@given(st.floats(0, 359.99), st.floats(0, 359.99))
def test_circular_mean_matches_vector_average(a, b):
    if abs(((a - b + 180) % 360) - 180) > 179.0:
        return  # near-antipodal pairs have no stable mean
    got = _pair("WD", a, b)
    want = oracles.circular_mean_deg(a, b)
    assert min(abs(got - want), 360 - abs(got - want)) < 1e-6


def test_downsample_misaligned_pairs():
    idx = pd.date_range("2020-01-01 00:30", periods=2, freq="30min", name=pipeline.TIME_COLUMN)
    with pytest.raises(CadenceError):
        pipeline.downsample_hourly(pd.DataFrame({"TA_F": [1.0, 2.0]}, index=idx))


# -- QC leniency --------------------------------------------------------------
def _qc_fixture():
    idx = pd.date_range("2020-01-01", periods=8, freq="60min", name=pipeline.TIME_COLUMN)
    return pd.DataFrame({"TA_F": np.arange(8.0), "TA_F_QC": [0, 1, 2, 3, 0, 1, 2, 3],
                         "RH": np.arange(8.0)}, index=idx).astype(float)


def test_qc_leniency_thresholds():
    table = _qc_fixture()
    kept1, report = pipeline.apply_qc_leniency(table, 1)
    assert kept1["TA_F"].notna().tolist() == [True, True, False, False] * 2
    assert kept1["RH"].notna().all()
    assert ("TA_F", 8, 4, 4) in report.rows
    kept0, _ = pipeline.apply_qc_leniency(table, 0)
    assert kept0["TA_F"].dropna().tolist() == [0.0, 4.0]
    kept3, _ = pipeline.apply_qc_leniency(table, 3)
    pd.testing.assert_frame_equal(kept3, table)
    counts = [pipeline.apply_qc_leniency(table, q)[0]["TA_F"].notna().sum() for q in range(4)]
    assert counts == sorted(counts)


def test_missing_qc_flag_counts_as_worst():
    table = _qc_fixture()
    table.loc[table.index[0], "TA_F_QC"] = np.nan
    kept, _ = pipeline.apply_qc_leniency(table, 2)
    assert np.isnan(kept["TA_F"].iloc[0])


def test_qc_report_csv(tmp_path):
    _, report = pipeline.apply_qc_leniency(_qc_fixture(), 1)
    text = report.to_csv(tmp_path / "qc.csv").read_text()
    assert text.splitlines()[0] == "variable,present,retained,dropped,max_qc"
    assert "TA_F,8,4,4,1" in text


# -- manifest and normalisation ---------------------------------------------------
def _tables():
    idx = pd.date_range("2020-01-01", periods=5, freq="60min", name=pipeline.TIME_COLUMN)
    cols = {v.code: np.linspace(1, 5, 5) for v in catalog.PREDICTORS}
    cols["TA_F"] = np.array([-10.0, 0.0, 10.0, 20.0, 30.0])
    cols["PA_F"] = np.full(5, 100.0)
    cols["WD"] = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    cols["NEE_VUT_REF"] = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    return {"S1": pd.DataFrame(cols, index=idx)}


def test_manifest_ranges_and_flags():
    m = pipeline.compute_manifest(_tables())
    assert (m["TA_F"].min, m["TA_F"].max) == (-10.0, 30.0)
    assert (m["WD"].min, m["WD"].max) == (0.0, 360.0)
    assert m["PA_F"].degenerate
    assert m.target_mean == 3.0 and m.target_variance == 2.0
    assert m.training_sites == ("S1",)


def test_manifest_text_roundtrip(tmp_path):
    m = pipeline.compute_manifest(_tables(), igbp={"S1": "ENF"})
    again = pipeline.NormalizationManifest.load(m.save(tmp_path / "manifest.txt"))
    assert again == m
    with pytest.raises(ManifestError):
        pipeline.NormalizationManifest.from_text("manifest_version=99\n")


def test_manifest_errors_on_empty_variable():
    tables = _tables()
    tables["S1"]["RH"] = np.nan
    with pytest.raises(ManifestError, match="RH"):
        pipeline.compute_manifest(tables)


def test_normalize_examples(caplog):
    m = pipeline.compute_manifest(_tables())
    assert pipeline.normalize(0.0, "WD", m) == -1.0
    assert pipeline.normalize(180.0, "WD", m) == 0.0
    assert pipeline.normalize(270.0, "WD", m) == 0.5
    assert pipeline.normalize(360.0, "WD", m) == -1.0
    assert pipeline.normalize(-10.0, "TA_F", m) == -0.5
    assert pipeline.normalize(10.0, "TA_F", m) == 0.0
    with caplog.at_level(logging.INFO, logger="ecoperceiver.pipeline"):
        assert pipeline.normalize(35.0, "TA_F", m) == 0.5
    assert "clamped" in caplog.text
    assert pipeline.normalize(100.0, "PA_F", m) == 0.0
    assert np.isnan(pipeline.normalize(np.nan, "TA_F", m))


@given(st.floats(-10.0, 30.0), st.floats(0.0, 359.999))
def test_normalize_roundtrip(ta, wd):
    m = pipeline.compute_manifest(_tables())
    assert abs(pipeline.denormalize(pipeline.normalize(ta, "TA_F", m), "TA_F", m) - ta) < 1e-6
    assert abs(pipeline.denormalize(pipeline.normalize(wd, "WD", m), "WD", m) - wd) < 1e-6


# -- splits -------------------------------------------------------------------------
IGBP_SITE_COUNTS = {"WET": (42, 5), "DNF": (0, 1), "WSA": (8, 2), "EBF": (10, 3), "ENF": (80, 5), "DBF": (42, 5),
          "CRO": (44, 5), "MF": (10, 3), "GRA": (59, 5), "OSH": (25, 5), "CVM": (1, 1), "CSH": (5, 2),
          "SAV": (11, 3), "SNO": (0, 1), "WAT": (1, 1)}


def test_test_counts_match_site_table():
    for label, (train, test) in IGBP_SITE_COUNTS.items():
        assert pipeline.n_test_sites(train + test) == test, label


def test_test_count_formula_sweep():
    for n in range(1, 201):
        assert pipeline.n_test_sites(n) == min(5, math.ceil(0.2 * n))
    with pytest.raises(SplitError):
        pipeline.n_test_sites(0)


def test_stratified_split_properties():
    sites = {f"{label}-{i}": label for label, (a, b) in IGBP_SITE_COUNTS.items() for i in range(a + b)}
    plan = pipeline.stratified_split(sites, seed=7)
    for label, (train, test) in IGBP_SITE_COUNTS.items():
        g = plan.groups[label]
        assert (len(g["train"]), len(g["test"])) == (train, test)
        assert not set(g["train"]) & set(g["test"])
    assert set(plan.train_sites) | set(plan.test_sites) == set(sites)
    assert pipeline.stratified_split(sites, seed=7) == plan
    assert pipeline.stratified_split(sites, seed=8) != plan


def test_split_plan_text_roundtrip(tmp_path):
    plan = pipeline.stratified_split({"A": "ENF", "B": "ENF", "C": "GRA"}, 3)
    assert SplitPlan.load(plan.save(tmp_path / "split.txt")) == plan
    assert plan.groups["GRA"] == {"train": [], "test": ["C"]}
    assert "IGBP" in plan.distribution()
    with pytest.raises(SplitError):
        SplitPlan.load(tmp_path / "missing.txt")


def test_train_val_split():
    ten = [f"s{i}" for i in range(10)]
    tr, va = pipeline.train_val_split(ten, 0.2, 0)
    assert (len(tr), len(va)) == (8, 2)
    tr9, va9 = pipeline.train_val_split(ten[:9], 0.2, 0)
    assert (len(tr9), len(va9)) == (7, 2)
    assert pipeline.train_val_split(ten, 0.2, 0) == (tr, va)
    assert not set(tr) & set(va)
    with pytest.raises(SplitError):
        pipeline.train_val_split(["only"], 0.2, 0)


def test_metadata_roundtrip(tmp_path):
    meta = {"site_id": "X", "latitude": 1.5, "longitude": -2.0, "igbp": "ENF"}
    assert pipeline.read_metadata(pipeline.write_metadata(meta, tmp_path / "meta.txt")) == meta
    (tmp_path / "bad.txt").write_text("site_id=X\n")
    with pytest.raises(InputError):
        pipeline.read_metadata(tmp_path / "bad.txt")


def test_fusion_is_idempotent():
    a = _release("A", "2001-01-01", 48, 1.0, "2021-01-01")
    b = _release("B", "2001-01-02", 48, 2.0, "2023-01-01")
    fused = pipeline.fuse_releases([a, b])
    again = pipeline.fuse_releases([RawRelease("F", date(2024, 1, 1), fused)])
    pd.testing.assert_frame_equal(again, fused)
