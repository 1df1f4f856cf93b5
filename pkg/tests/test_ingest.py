import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcfpca.errors import ValidationError
from gcfpca.ingest import (
    MultiDayProfile,
    binarize_day,
    binarize_profiles,
    load_long_csv,
    load_multiday_csv,
    median_profile,
    write_long_csv,
)

from .oracles import median_rule_truth_table


def test_three_days_at_one_minute():
    b = binarize_day([5.0, 12.0, 20.0])
    np.testing.assert_array_equal(b, [0, 1, 1])
    assert median_profile(b[:, None])[0] == 1.0


def test_two_day_tie_is_active():
    assert median_profile(np.array([[0.0], [1.0]]))[0] == 1.0


def test_single_day_below_threshold():
    assert median_profile(binarize_day([[3.0]]))[0] == 0.0


def test_threshold_is_inclusive_and_missing_stays_missing():
    np.testing.assert_array_equal(binarize_day([10.558, 10.5579]), [1.0, 0.0])
    assert np.isnan(binarize_day([np.nan])[0])
    assert np.isnan(median_profile(np.array([[np.nan], [np.nan]]))[0])
    assert median_profile(np.array([[np.nan], [0.0]]))[0] == 0.0


def test_median_rule_truth_tables():
    for pattern, expected in median_rule_truth_table(max_days=7):
        col = np.array(pattern, dtype=float)[:, None]
        assert median_profile(col)[0] == expected, pattern


@given(days=st.lists(st.lists(st.floats(0, 30), min_size=6, max_size=6), min_size=1, max_size=7), seed=st.integers(0, 100))
def test_binarize_invariant_to_day_order(days, seed):
    raw = np.array(days)
    perm = np.random.default_rng(seed).permutation(raw.shape[0])
    a = binarize_profiles([MultiDayProfile("s", raw, None)])
    b = binarize_profiles([MultiDayProfile("s", raw[perm], None)])
    np.testing.assert_array_equal(a.outcomes, b.outcomes)


def test_invalid_days_are_ignored_and_empty_subjects_skipped(caplog):
    p1 = MultiDayProfile("a", [[20.0, 0.0], [0.0, 0.0], [0.0, 0.0]], [True, False, False])
    p2 = MultiDayProfile("b", [[20.0, 20.0]], [False])
    data = binarize_profiles([p1, p2])
    assert list(data.subjects) == ["a"]
    np.testing.assert_array_equal(data.outcomes, [[1.0, 0.0]])
    assert "no valid day" in caplog.text


def test_covariates_attach_by_subject():
    data = binarize_profiles([MultiDayProfile("a", [[20.0]], None), MultiDayProfile("b", [[0.0]], None)], covariates={"a": [1.0], "b": [0.0]}, covariate_names=("x",))
    np.testing.assert_array_equal(data.covariates, [[1.0], [0.0]])
    with pytest.raises(ValidationError):
        binarize_profiles([MultiDayProfile("c", [[1.0]], None)], covariates={"a": [1.0]})


@given(raw=st.lists(st.lists(st.floats(0, 30), min_size=5, max_size=5), min_size=1, max_size=5))
def test_binarize_then_load_round_trip(tmp_path_factory, raw):
    path = tmp_path_factory.mktemp("rt") / "z.csv"
    profiles = [MultiDayProfile(f"s{i}", np.array(raw)[: i + 1], None) for i in range(len(raw))]
    data = binarize_profiles(profiles, grid=np.arange(1, 6) / 5)
    write_long_csv(data, path)
    back = load_long_csv(path)
    np.testing.assert_array_equal(back.outcomes, data.outcomes)
    np.testing.assert_array_equal(back.grid, data.grid)
    assert [str(s) for s in back.subjects] == [str(s) for s in data.subjects]


def write(path, text):
    path.write_text(text)
    return path


def test_load_well_formed(tmp_path):
    p = write(tmp_path / "a.csv", "subject_id,s,value,x\n1,0.1,0,1\n1,0.2,1,1\n1,0.3,1,1\n2,0.3,0,0\n2,0.1,1,0\n2,0.2,0,0\n")
    data = load_long_csv(p)
    assert (data.I, data.K) == (2, 3)
    np.testing.assert_array_equal(data.grid, [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(data.outcomes, [[0, 1, 1], [1, 0, 0]])
    np.testing.assert_array_equal(data.covariates, [[1.0], [0.0]])
    assert data.covariate_names == ("x",)


def test_duplicate_row_names_the_key(tmp_path):
    p = write(tmp_path / "d.csv", "subject_id,s,value\n1,0.1,0\n1,0.2,1\n1,0.2,0\n")
    with pytest.raises(ValidationError, match=r"subject_id=1, s=0\.2"):
        load_long_csv(p)


def test_missing_cells_need_the_flag(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["subject_id,s,value"]
    dropped = 0
    for i in range(10):
        for k in range(10):
            if rng.random() < 0.1 and k != 0:
                dropped += 1
                continue
            lines.append(f"{i},{k / 10},{rng.integers(0, 2)}")
    p = write(tmp_path / "m.csv", "\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="missing"):
        load_long_csv(p)
    data = load_long_csv(p, allow_missing=True)
    assert np.isnan(data.outcomes).sum() == dropped
    assert data.missing_fraction == pytest.approx(dropped / 100)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "subject_id,value\n1,0\n",
        "subject_id,s,value\n1,abc,0\n",
        "subject_id,s,value,x\n1,0.1,0,1\n1,0.2,0,2\n",
    ],
)
def test_malformed_files(tmp_path, text):
    with pytest.raises(ValidationError):
        load_long_csv(write(tmp_path / "bad.csv", text))


def test_comment_lines_are_skipped(tmp_path):
    p = write(tmp_path / "c.csv", "# produced elsewhere\nsubject_id,s,value\n1,1,0\n1,2,1\n2,1,1\n2,2,1\n")
    assert load_long_csv(p).outcomes.shape == (2, 2)


def test_load_multiday(tmp_path):
    p = write(
        tmp_path / "md.csv",
        "subject_id,day,s,value,valid\na,1,1,5,1\na,1,2,12,1\na,2,1,20,1\na,2,2,1,1\nb,1,1,0,0\nb,1,2,0,0\n",
    )
    profiles = load_multiday_csv(p)
    assert [pr.subject for pr in profiles] == ["a", "b"]
    assert profiles[0].days.shape == (2, 2) and profiles[1].n_valid == 0
    data = binarize_profiles(profiles)
    np.testing.assert_array_equal(data.outcomes, [[1.0, 1.0]])
