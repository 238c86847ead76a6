import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from donorselect.app.core.errors import IngestionError, PanelError
from donorselect.app.core.models import Panel
from donorselect.app.core.panel import (
    denormalize,
    emit_csv,
    ingest_csv,
    normalize,
    time_average,
)
from tests.helpers import make_panel


def _write(tmp_path, text, name="panel.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


GOOD_CSV = (
    "time,target,a,b\n"
    "1,1.0,2.0,3.0\n"
    "2,1.5,2.5,3.5\n"
    "3,2.0,3.5,3.0\n"
    "4,4.0,4.0,2.5\n"
    "5,5.0,4.5,2.0\n"
)


def test_ingest_csv(tmp_path):
    panel = ingest_csv(_write(tmp_path, GOOD_CSV), "target", intervention_time=4)
    assert panel.donor_ids == ("a", "b")
    assert panel.target_id == "target"
    assert panel.intervention_time == 3
    assert panel.n_pre == 3
    assert panel.n_post == 2
    assert panel.intervention_value == 4
    assert_array_equal(panel.times, [1, 2, 3, 4, 5])
    assert_array_equal(panel.donors[1], [3.0, 3.5, 3.0, 2.5, 2.0])


def test_ingest_sorts_rows(tmp_path):
    shuffled = "time,target,a\n3,30,300\n1,10,100\n2,20,200\n"
    panel = ingest_csv(_write(tmp_path, shuffled), "target", intervention_time=2)
    assert_array_equal(panel.times, [1, 2, 3])
    assert_array_equal(panel.target, [10, 20, 30])
    assert_array_equal(panel.donors[0], [100, 200, 300])


@pytest.mark.parametrize("cell, fragment", [
    ("", "blank cell"),
    ("abc", "non-numeric"),
    ("nan", "non-finite"),
])
def test_ingest_bad_cell_names_row_and_column(tmp_path, cell, fragment):
    text = f"time,target,a\n1,1,1\n2,2,{cell}\n3,3,3\n"
    with pytest.raises(IngestionError, match=fragment) as info:
        ingest_csv(_write(tmp_path, text), "target", intervention_time=2)
    assert info.value.row == 2
    assert info.value.column == "a"


def test_ingest_rejects_gap_and_duplicate(tmp_path):
    with pytest.raises(IngestionError, match="gap"):
        ingest_csv(_write(tmp_path, "time,target,a\n1,1,1\n2,2,2\n4,4,4\n"), "target", 2)
    with pytest.raises(IngestionError, match="duplicate"):
        ingest_csv(_write(tmp_path, "time,target,a\n1,1,1\n2,2,2\n2,4,4\n"), "target", 2)


def test_ingest_rejects_intervention_outside_range(tmp_path):
    path = _write(tmp_path, GOOD_CSV)
    for t_star in (1, 6, 0):
        with pytest.raises(IngestionError, match="intervention_time"):
            ingest_csv(path, "target", t_star)


def test_ingest_missing_target_column(tmp_path):
    with pytest.raises(IngestionError) as info:
        ingest_csv(_write(tmp_path, GOOD_CSV), "gdp", 3)
    assert info.value.column == "gdp"


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="not found"):
        ingest_csv(tmp_path / "nope.csv", "target", 2)


def test_emit_then_ingest_preserves_values(tmp_path, rng):
    donors = rng.standard_normal((4, 12)) * 1e3
    panel = make_panel(rng.standard_normal(12) / 7.0, donors, n_pre=8, start=1990)
    path = emit_csv(panel, tmp_path / "out" / "panel.csv")
    again = ingest_csv(path, panel.target_id, panel.intervention_value)
    assert again.donor_ids == panel.donor_ids
    assert again.intervention_time == panel.intervention_time
    assert_array_equal(again.target, panel.target)
    assert_array_equal(again.donors, panel.donors)


def test_panel_validation():
    with pytest.raises(PanelError, match="length mismatch"):
        Panel(times=np.arange(5), target=np.zeros(4), donors=np.zeros((2, 5)), donor_ids=("a", "b"), intervention_time=2)
    with pytest.raises(PanelError, match="intervention_time"):
        Panel(times=np.arange(5), target=np.zeros(5), donors=np.zeros((1, 5)), donor_ids=("a",), intervention_time=0)
    with pytest.raises(PanelError, match="unique"):
        Panel(times=np.arange(5), target=np.zeros(5), donors=np.zeros((2, 5)), donor_ids=("a", "a"), intervention_time=2)
    with pytest.raises(PanelError, match="non-finite"):
        Panel(times=np.arange(3), target=[0, np.nan, 0], donors=np.zeros((1, 3)), donor_ids=("a",), intervention_time=1)


def test_panel_is_read_only(rng):
    panel = make_panel(rng.standard_normal(6), rng.standard_normal((2, 6)), n_pre=3)
    with pytest.raises(ValueError):
        panel.donors[0, 0] = 1.0


def test_subset_and_truncate(rng):
    panel = make_panel(rng.standard_normal(10), rng.standard_normal((3, 10)), n_pre=6)
    sub = panel.subset(["d2", "d0"])
    assert sub.donor_ids == ("d2", "d0")
    assert_array_equal(sub.donors[0], panel.donors[2])
    short = panel.truncate(7)
    assert short.n_times == 7
    assert short.n_post == 1
    with pytest.raises(PanelError, match="not present"):
        panel.subset(["zz"])


def test_normalize_and_denormalize(rng):
    donors = rng.normal(5.0, 3.0, (3, 20))
    panel = make_panel(rng.standard_normal(20), donors, n_pre=15)
    scaled, params = normalize(panel)
    assert_allclose(scaled.pre_donors.mean(axis=1), 0.0, atol=1e-12)
    assert_allclose(scaled.pre_donors.std(axis=1, ddof=1), 1.0, rtol=1e-12)
    assert_array_equal(scaled.target, panel.target)
    assert_allclose(denormalize(scaled, params).donors, panel.donors, rtol=1e-12, atol=1e-12)


def test_normalize_rejects_constant_donor(rng):
    donors = rng.standard_normal((2, 10))
    donors[1, :6] = 4.2
    panel = make_panel(rng.standard_normal(10), donors, n_pre=6)
    with pytest.raises(PanelError, match="d1"):
        normalize(panel)


def test_time_average_identity_for_bucket_one(rng):
    panel = make_panel(rng.standard_normal(8), rng.standard_normal((2, 8)), n_pre=5)
    assert time_average(panel, 1) is panel


def test_time_average_anchors_at_intervention():
    n_pre, n_post = 7, 5
    values = np.arange(12, dtype=float)
    panel = make_panel(values * 10, np.vstack([values, -values]), n_pre=n_pre)
    averaged = time_average(panel, 3)
    # pre buckets [1,4) and [4,7); post bucket [7,10)
    assert averaged.intervention_time == 2
    assert_array_equal(averaged.times, [2, 5, 8])
    assert_allclose(averaged.donors[0], [2.0, 5.0, 8.0])
    assert_allclose(averaged.donors[1], [-2.0, -5.0, -8.0])
    assert_allclose(averaged.target, [20.0, 50.0, 80.0])


def test_time_average_rejects_oversized_bucket(rng):
    panel = make_panel(rng.standard_normal(10), rng.standard_normal((2, 10)), n_pre=7)
    with pytest.raises(PanelError, match="bucket"):
        time_average(panel, 4)
    with pytest.raises(PanelError, match="at least 1"):
        time_average(panel, 0)
