import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from givehr.dataset import (
    Cohort,
    CovariateSeries,
    CovariateSpec,
    DataError,
    SubjectData,
    covariate_at,
    load_long_csv,
    role_values,
    validate,
    write_long_csv,
)


def one_column_spec(**overrides):
    """Every role reads the same single baseline column."""
    base = dict(
        visiting=("age",),
        obs_fixed=("age",),
        obs_random=("age",),
        outcome_fixed=("age",),
        outcome_random=("age",),
    )
    base.update(overrides)
    return CovariateSpec(**base)


def cohort_like_figure_one():
    """Three subjects, visit counts (4, 3, 1), four observed outcomes total."""
    mk = lambda v: CovariateSeries(values=[v])
    s1 = SubjectData(
        "p1", 24.0,
        np.array([3.0, 9.0, 14.0, 20.0]),
        np.array([0, 1, 0, 0]),
        np.array([np.nan, 1.4, np.nan, np.nan]),
        {"age": mk(61.0)},
    )
    s2 = SubjectData(
        "p2", 24.0,
        np.array([5.0, 11.0, 17.0]),
        np.array([0, 1, 1]),
        np.array([np.nan, 0.7, 0.9]),
        {"age": mk(48.0)},
    )
    s3 = SubjectData("p3", 24.0, np.array([8.0]), np.array([1]), np.array([2.2]), {"age": mk(55.0)})
    return Cohort((s1, s2, s3), one_column_spec(), 24.0)


FIGURE_CSV = """id,time,r,y,censor_time,age
p1,3.0,0,,24,61
p1,9.0,1,1.4,24,61
p1,14.0,0,,24,61
p1,20.0,0,NA,24,61
p2,5.0,0,,24,48
p2,11.0,1,0.7,24,48
p2,17.0,1,0.9,24,48
p3,8.0,1,2.2,24,55
"""


def test_load_three_subject_file(tmp_path):
    path = tmp_path / "cohort.csv"
    path.write_text(FIGURE_CSV)
    cohort = load_long_csv(path, one_column_spec())
    assert cohort.n == 3
    assert [s.m for s in cohort.subjects] == [4, 3, 1]
    p2 = cohort.subjects[1]
    np.testing.assert_array_equal(p2.obs_indicator, [0, 1, 1])
    # outcome present exactly where the indicator is 1
    for subj in cohort.subjects:
        np.testing.assert_array_equal(~np.isnan(subj.outcome), subj.obs_indicator == 1)
    assert p2.outcome[1] == 0.7


def test_header_only_file_gives_empty_cohort(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("id,time,r,y,censor_time,age\n")
    cohort = load_long_csv(path, one_column_spec())
    assert cohort.n == 0


def test_singleton_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("id,time,r,y,censor_time,age\ns1,2.0,1,2.5,10,30\n")
    cohort = load_long_csv(path, one_column_spec())
    assert cohort.subjects[0].m == 1
    assert cohort.subjects[0].outcome[0] == 2.5


def test_duplicate_visit_time_rejected(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text(
        "id,time,r,y,censor_time,age\n"
        "s1,2.0,1,2.5,10,30\n"
        "s1,2.0,0,,10,30\n"
    )
    with pytest.raises(DataError, match="row 3"):
        load_long_csv(path, one_column_spec())


def test_outcome_under_zero_indicator_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,time,r,y,censor_time,age\ns1,2.0,0,1.1,10,30\n")
    with pytest.raises(DataError):
        load_long_csv(path, one_column_spec())


def test_indicator_outside_binary_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,time,r,y,censor_time,age\ns1,2.0,2,1.1,10,30\n")
    with pytest.raises(DataError):
        load_long_csv(path, one_column_spec())


def test_missing_covariate_column_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,time,r,y,censor_time\ns1,2.0,1,1.1,10\n")
    with pytest.raises(DataError, match="age"):
        load_long_csv(path, one_column_spec())


def test_default_censor_used_when_column_absent(tmp_path):
    path = tmp_path / "nocensor.csv"
    path.write_text("id,time,r,y,age\ns1,2.0,1,2.5,30\n")
    cohort = load_long_csv(path, one_column_spec(), default_censor=12.0)
    assert cohort.subjects[0].censoring_time == 12.0


def test_comment_lines_skipped(tmp_path):
    path = tmp_path / "comment.csv"
    path.write_text("# provenance line\n" + FIGURE_CSV)
    assert load_long_csv(path, one_column_spec()).n == 3


def test_constant_series_evaluates_everywhere():
    series = CovariateSeries(values=[1.2])
    subj = SubjectData("a", 10.0, np.array([1.0]), np.array([0]), np.array([np.nan]), {"age": series})
    spec = CovariateSpec(visiting=("age",), obs_fixed=(), obs_random=(), outcome_fixed=(), outcome_random=())
    for t in (0.0, 3.7, 10.0):
        np.testing.assert_array_equal(covariate_at(subj, "visiting", t, spec), [1.2])


def test_step_series_is_right_continuous():
    series = CovariateSeries(values=[0.0, 1.0], knots=[0.0, 5.0])
    assert series.at(4.9) == 0.0
    assert series.at(5.0) == 1.0
    assert series.at(7.3) == 1.0


def test_intercept_prepended():
    series = CovariateSeries(values=[3.0])
    subj = SubjectData("a", 10.0, np.array([1.0]), np.array([0]), np.array([np.nan]), {"v": series})
    spec = CovariateSpec(
        visiting=(), obs_fixed=("v",), obs_random=(), outcome_fixed=(), outcome_random=(),
        intercepts=frozenset({"obs_fixed"}),
    )
    np.testing.assert_array_equal(covariate_at(subj, "obs_fixed", 2.0, spec), [1.0, 3.0])
    # and the vectorised form agrees row-wise
    vals = role_values(subj, "obs_fixed", np.array([0.0, 4.0]), spec)
    np.testing.assert_array_equal(vals, [[1.0, 3.0], [1.0, 3.0]])


def test_unknown_role_rejected():
    subj = SubjectData("a", 10.0, np.array([1.0]), np.array([0]), np.array([np.nan]), {})
    with pytest.raises(DataError, match="unknown covariate role"):
        covariate_at(subj, "nonsense", 0.0, one_column_spec())


def test_validate_clean_cohort():
    report = validate(cohort_like_figure_one())
    assert report.ok
    assert report.violations == []
    assert (report.n_subjects, report.n_visits, report.n_observed) == (3, 8, 4)


def test_validate_flags_visit_after_censoring():
    mk = lambda v: CovariateSeries(values=[v])
    subj = SubjectData(
        "late", 5.0, np.array([2.0, 6.0]), np.array([0, 0]),
        np.array([np.nan, np.nan]), {"age": mk(40.0)},
    )
    report = validate(Cohort((subj,), one_column_spec(), 10.0))
    assert not report.ok
    assert any("late" in v and "index 1" in v for v in report.violations)


def test_validate_allows_zero_visit_subject():
    mk = lambda v: CovariateSeries(values=[v])
    subj = SubjectData("quiet", 8.0, np.empty(0), np.empty(0, dtype=int), np.empty(0), {"age": mk(33.0)})
    report = validate(Cohort((subj,), one_column_spec(), 10.0))
    assert report.ok


def test_validate_flags_duplicate_ids():
    mk = lambda v: CovariateSeries(values=[v])
    subj = SubjectData("a", 8.0, np.empty(0), np.empty(0, dtype=int), np.empty(0), {"age": mk(1.0)})
    twin = SubjectData("a", 8.0, np.empty(0), np.empty(0, dtype=int), np.empty(0), {"age": mk(2.0)})
    report = validate(Cohort((subj, twin), one_column_spec(), 10.0))
    assert any("duplicate" in v for v in report.violations)


def test_round_trip_with_step_covariate_and_empty_subject(tmp_path):
    spec = one_column_spec(obs_fixed=("age", "lab"), outcome_fixed=("age", "lab"))
    mk = lambda v: CovariateSeries(values=[v])
    s1 = SubjectData(
        "s1", 20.0,
        np.array([2.0, 7.0, 13.0]),
        np.array([1, 0, 1]),
        np.array([0.3, np.nan, -1.1]),
        {"age": mk(50.0), "lab": CovariateSeries(values=[1.0, 4.0], knots=[2.0, 7.0])},
    )
    s2 = SubjectData("s2", 15.0, np.empty(0), np.empty(0, dtype=int), np.empty(0), {"age": mk(61.0), "lab": mk(2.0)})
    cohort = Cohort((s1, s2), spec, 20.0)

    path = tmp_path / "round.csv"
    write_long_csv(cohort, path, header_comment="round trip")
    back = load_long_csv(path, spec)

    assert back.n == 2
    for orig, new in zip(cohort.subjects, back.subjects):
        assert orig.id == new.id
        assert orig.censoring_time == new.censoring_time
        np.testing.assert_allclose(new.visits, orig.visits)
        np.testing.assert_array_equal(new.obs_indicator, orig.obs_indicator)
        np.testing.assert_allclose(new.outcome, orig.outcome)
        for t in (0.0, 2.0, 6.9, 7.0, 14.0):
            np.testing.assert_allclose(
                covariate_at(new, "obs_fixed", t, spec),
                covariate_at(orig, "obs_fixed", t, spec),
            )


@st.composite
def small_cohorts(draw):
    spec = CovariateSpec(
        visiting=("x",), obs_fixed=("x",), obs_random=("x",),
        outcome_fixed=("x",), outcome_random=("x",),
    )
    n = draw(st.integers(min_value=1, max_value=4))
    subjects = []
    for i in range(n):
        censor = draw(st.floats(min_value=1.0, max_value=50.0, allow_nan=False))
        m = draw(st.integers(min_value=0, max_value=5))
        raw = draw(
            st.lists(st.floats(min_value=0.01, max_value=1.0, exclude_min=True), min_size=m, max_size=m)
        )
        visits = np.unique(np.round(np.cumsum(np.asarray(raw)) / (m or 1) * censor * 0.9, 6))
        visits = visits[visits > 0]
        r = draw(st.lists(st.integers(0, 1), min_size=visits.size, max_size=visits.size))
        r = np.asarray(r, dtype=int)
        y_vals = draw(
            st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=visits.size, max_size=visits.size)
        )
        y = np.where(r == 1, np.round(np.asarray(y_vals), 6), np.nan)
        xval = draw(st.floats(min_value=-3, max_value=3, allow_nan=False))
        subjects.append(
            SubjectData(f"s{i}", censor, visits, r, y, {"x": CovariateSeries(values=[round(xval, 6)])})
        )
    return Cohort(tuple(subjects), spec, max(s.censoring_time for s in subjects))


@settings(max_examples=25, deadline=None)
@given(small_cohorts())
def test_round_trip_property(tmp_path_factory, cohort):
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_long_csv(cohort, path)
    back = load_long_csv(path, cohort.covariate_spec)
    assert back.n == cohort.n
    for orig, new in zip(cohort.subjects, back.subjects):
        np.testing.assert_allclose(new.visits, orig.visits)
        np.testing.assert_array_equal(new.obs_indicator, orig.obs_indicator)
        np.testing.assert_allclose(new.outcome, orig.outcome)
        assert new.censoring_time == pytest.approx(orig.censoring_time)


@settings(max_examples=50, deadline=None)
@given(
    knots=st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=6, unique=True),
    t=st.floats(min_value=-1, max_value=110, allow_nan=False),
)
def test_step_series_piecewise_constant(knots, t):
    knots = sorted(knots)
    values = list(range(len(knots)))
    series = CovariateSeries(values=values, knots=knots)
    idx = np.searchsorted(knots, t, side="right") - 1
    expected = values[max(idx, 0)] if idx >= 0 else values[0]
    assert series.at(t) == expected
