"""Ingest, schema, QC rules, design counts, interchange round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefda import (
    CategoricalSpec,
    IngestSchema,
    QcPolicy,
    ScalarCovariates,
    design_count_matrix,
    ingest_long_csv,
    normalize_sample,
    qc_filter,
    write_long_csv,
    write_scalar_csv,
)
from sparsefda.datamodel import Cohort
from sparsefda.errors import DuplicateRecordError, SchemaError

from conftest import make_sample

SCHEMA = IngestSchema(window=(0.0, 10.0), numeric=("iq",),
                      categorical={"sex": CategoricalSpec(("f", "m"), "f")},
                      cluster="site", variables=("h",))


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


LONG = """subject_id,variable,time,value
# comment line is skipped
a,h,1.0,10.0
a,h,2.0,11.0
b,h,0.5,9.0
b,h,3.0,12.0
b,h,9.5,13.0
"""

SCALAR = """subject_id,iq,sex,site
a,100.0,f,s1
b,95.0,m,s1
"""


class TestIngest:
    def test_reads_long_and_scalar_tables(self, tmp_path):
        cohort = ingest_long_csv(write(tmp_path, "l.csv", LONG), SCHEMA,
                                 write(tmp_path, "s.csv", SCALAR))
        s = cohort.samples["h"]
        assert s.subject_ids == ["a", "b"]
        np.testing.assert_array_equal(s.data["a"][0], [1.0, 2.0])
        np.testing.assert_array_equal(s.data["b"][1], [9.0, 12.0, 13.0])
        assert cohort.scalars.records["a"]["iq"] == 100.0
        assert cohort.scalars.records["b"]["sex"] == "m"
        assert cohort.rejects == []

    def test_rejects_bad_rows_with_reasons(self, tmp_path):
        text = ("subject_id,variable,time,value\n"
                "a,h,1.0,10.0\n"
                "a,h,oops,10.0\n"        # unparseable time
                "a,h,3.0,\n"             # empty value
                "a,h,11.0,10.0\n"        # outside window
                "a,h,4.0,inf\n"          # non-finite
                "a,zzz,4.0,3.0\n")       # undeclared variable
        cohort = ingest_long_csv(write(tmp_path, "l.csv", text), SCHEMA)
        assert cohort.samples["h"].total_observations == 1
        assert len(cohort.rejects) == 5
        reasons = " ".join(r.reason for r in cohort.rejects)
        assert "window" in reasons

    def test_strict_duplicates_raise(self, tmp_path):
        text = ("subject_id,variable,time,value\n"
                "a,h,1.0,10.0\n"
                "a,h,1.0,99.0\n")
        p = write(tmp_path, "l.csv", text)
        with pytest.raises(DuplicateRecordError) as err:
            ingest_long_csv(p, SCHEMA)
        assert ("a", "h", 1.0) in err.value.offenders

    def test_keep_first_duplicates(self, tmp_path):
        text = ("subject_id,variable,time,value\n"
                "a,h,1.0,10.0\n"
                "a,h,1.0,99.0\n")
        p = write(tmp_path, "l.csv", text)
        cohort = ingest_long_csv(p, SCHEMA, strict_duplicates=False)
        np.testing.assert_array_equal(cohort.samples["h"].data["a"][1],
                                      [10.0])
        assert len(cohort.rejects) == 1

    def test_missing_header_raises(self, tmp_path):
        p = write(tmp_path, "l.csv", "sid,var,t,v\na,h,1,2\n")
        with pytest.raises(SchemaError):
            ingest_long_csv(p, SCHEMA)

    def test_extra_scalar_columns_ignored(self, tmp_path):
        extra = "subject_id,iq,sex,site,extra\na,1,f,s1,9\n"
        cohort = ingest_long_csv(write(tmp_path, "l.csv", LONG), SCHEMA,
                                 write(tmp_path, "s.csv", extra))
        assert "extra" not in cohort.scalars.records["a"]

    def test_missing_declared_scalar_column_raises(self, tmp_path):
        bad = "subject_id,sex,site\na,f,s1\n"
        with pytest.raises(SchemaError):
            ingest_long_csv(write(tmp_path, "l.csv", LONG), SCHEMA,
                            write(tmp_path, "s.csv", bad))

    def test_unknown_categorical_level_nulled_and_logged(self, tmp_path):
        bad = "subject_id,iq,sex,site\na,100,x,s1\n"
        cohort = ingest_long_csv(write(tmp_path, "l.csv", LONG), SCHEMA,
                                 write(tmp_path, "s.csv", bad))
        assert cohort.scalars.records["a"]["sex"] is None
        assert not cohort.scalars.is_complete("a")
        assert any(r.source == "scalar" for r in cohort.rejects)


class TestSchema:
    def test_json_round_trip(self, tmp_path):
        p = tmp_path / "schema.json"
        from sparsefda import write_schema_json

        write_schema_json(SCHEMA, p)
        back = IngestSchema.from_path(p)
        assert back.window == SCHEMA.window
        assert back.numeric == SCHEMA.numeric
        assert back.categorical["sex"].levels == ("f", "m")
        assert back.cluster == "site"
        assert back.variables == SCHEMA.variables

    def test_degenerate_window_rejected(self):
        with pytest.raises(SchemaError):
            IngestSchema(window=(5.0, 5.0), numeric=(), categorical={},
                         cluster=None, variables=("h",))


class TestRoundTrip:
    def test_long_csv_round_trip(self, tmp_path, small_cohort):
        cohort, _ = small_cohort
        p = tmp_path / "obs.csv"
        write_long_csv(cohort, p, header_comments=("test",))
        schema = IngestSchema(window=cohort.window, numeric=(),
                              categorical={}, cluster=None,
                              variables=tuple(cohort.variable_names))
        back = ingest_long_csv(p, schema)
        orig = cohort.samples["x"]
        got = back.samples["x"]
        assert got.subject_ids == orig.subject_ids
        for sid in orig.subject_ids:
            np.testing.assert_array_equal(got.data[sid][0],
                                          orig.data[sid][0])
            np.testing.assert_array_equal(got.data[sid][1],
                                          orig.data[sid][1])

    def test_scalar_csv_round_trip(self, tmp_path):
        scalars = ScalarCovariates(
            numeric_fields=["iq"],
            categorical_fields={"sex": CategoricalSpec(("f", "m"), "f")},
            cluster_field="site",
            records={"a": {"iq": 1.5, "sex": "f", "site": "s1"},
                     "b": {"iq": -2.0, "sex": "m", "site": "s2"}},
        )
        p = tmp_path / "subj.csv"
        write_scalar_csv(scalars, p)
        schema = IngestSchema(window=(0.0, 10.0), numeric=("iq",),
                              categorical={"sex": CategoricalSpec(
                                  ("f", "m"), "f")},
                              cluster="site", variables=("h",))
        lp = tmp_path / "obs.csv"
        lp.write_text("subject_id,variable,time,value\n"
                      "a,h,1.0,2.0\nb,h,2.0,3.0\n", encoding="utf-8")
        back = ingest_long_csv(lp, schema, p)
        assert back.scalars.records == scalars.records


def _qc_cohort(subjects, scalars=None, window=(0.0, 10.0)):
    sample = make_sample(subjects, window=window, name="h")
    return Cohort(samples={"h": sample}, scalars=scalars, window=window)


class TestQc:
    def test_ordering_rule_drops_unsorted_subject(self):
        cohort = _qc_cohort({
            "good": ([1.0, 2.0], [1.0, 2.0]),
            "bad": ([2.0, 1.0], [1.0, 2.0]),
        })
        out = qc_filter(cohort, QcPolicy())
        assert out.samples["h"].subject_ids == ["good"]
        assert out.qc_report.excluded_by_rule.get("ordering") == 1
        assert "bad" in out.qc_report.excluded_subjects["ordering"]

    def test_tie_records_keep_first(self):
        cohort = _qc_cohort({
            "a": ([1.0, 1.0, 2.0], [5.0, 9.0, 6.0]),
        })
        out = qc_filter(cohort, QcPolicy())
        np.testing.assert_array_equal(out.samples["h"].data["a"][0],
                                      [1.0, 2.0])
        np.testing.assert_array_equal(out.samples["h"].data["a"][1],
                                      [5.0, 6.0])
        assert out.qc_report.tie_records_dropped == 1

    def test_missed_visit_rule(self):
        cohort = _qc_cohort({
            "full": ([0.1, 2.0, 4.1, 6.0, 7.9], [1, 2, 3, 4, 5]),
            "sparse": ([0.1, 6.0], [1, 2]),
        })
        policy = QcPolicy(schedule=(0.0, 2.0, 4.0, 6.0, 8.0),
                          visit_tolerance=0.5, max_missed_visits=2)
        out = qc_filter(cohort, policy)
        assert out.samples["h"].subject_ids == ["full"]
        assert out.qc_report.excluded_by_rule.get("missed_visits") == 1

    def test_increment_rule(self):
        cohort = _qc_cohort({
            "ok": ([0.0, 1.0], [10.0, 12.0]),
            "jump": ([0.0, 1.0], [10.0, 30.0]),
        })
        policy = QcPolicy(max_increment_per_month={"h": 5.0})
        out = qc_filter(cohort, policy)
        assert out.samples["h"].subject_ids == ["ok"]
        assert out.qc_report.excluded_by_rule.get("increment") == 1

    def test_monotonicity_rule(self):
        cohort = _qc_cohort({
            "up": ([0.0, 1.0, 2.0], [1.0, 2.0, 3.0]),
            "down": ([0.0, 1.0, 2.0], [1.0, 2.0, 1.5]),
        })
        out = qc_filter(cohort, QcPolicy(enforce_monotonic=True))
        assert out.samples["h"].subject_ids == ["up"]

    def test_missing_scalar_rule(self):
        scalars = ScalarCovariates(
            numeric_fields=["iq"], categorical_fields={}, cluster_field=None,
            records={"a": {"iq": 1.0}, "b": {}},
        )
        cohort = _qc_cohort({"a": ([1.0], [1.0]), "b": ([1.0], [1.0])},
                            scalars=scalars)
        out = qc_filter(cohort, QcPolicy())
        assert out.samples["h"].subject_ids == ["a"]
        assert out.qc_report.excluded_by_rule.get("missing_scalar") == 1

    def test_idempotent(self):
        cohort = _qc_cohort({
            "a": ([1.0, 1.0, 2.0], [5.0, 9.0, 6.0]),
            "b": ([2.0, 1.0], [1.0, 2.0]),
        })
        policy = QcPolicy(enforce_monotonic=True)
        once = qc_filter(cohort, policy)
        twice = qc_filter(once, policy)
        assert twice.samples["h"].subject_ids == once.samples["h"].subject_ids
        assert twice.qc_report.total_excluded() == 0

    def test_rule_order_reports_first_violation(self):
        # subject violates ordering and increment; ordering is checked first
        cohort = _qc_cohort({"x": ([2.0, 1.0], [0.0, 99.0])})
        policy = QcPolicy(max_increment_per_month={"h": 1.0})
        out = qc_filter(cohort, policy)
        assert "x" in out.qc_report.excluded_subjects["ordering"]
        assert "increment" not in out.qc_report.excluded_subjects


class TestDesignCounts:
    def test_tiny_example_by_hand(self):
        sample = make_sample({
            "a": ([0.0, 1.0], [1.0, 1.0]),
            "b": ([1.0, 2.0], [1.0, 1.0]),
        })
        dcm = design_count_matrix(sample)
        np.testing.assert_array_equal(dcm.grid, [0.0, 1.0, 2.0])
        expect = np.array([[1, 1, 0],
                           [1, 2, 1],
                           [0, 1, 1]])
        np.testing.assert_array_equal(dcm.counts, expect)

    def test_repeated_visits_never_inflate(self):
        sample = make_sample({"a": ([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])})
        dcm = design_count_matrix(sample)
        assert dcm.counts.max() == 1

    def test_binning_bounds_grid(self, small_cohort):
        cohort, _ = small_cohort
        dcm = design_count_matrix(cohort.samples["x"], bin_width=0.5)
        assert dcm.grid.size <= 25
        assert dcm.counts.sum() > 0

    def test_symmetry(self, small_cohort):
        cohort, _ = small_cohort
        dcm = design_count_matrix(cohort.samples["x"], bin_width=1.0)
        np.testing.assert_array_equal(dcm.counts, dcm.counts.T)


class TestScalarCovariates:
    def _scalars(self):
        return ScalarCovariates(
            numeric_fields=["iq", "edu"],
            categorical_fields={"sex": CategoricalSpec(("f", "m"), "f")},
            cluster_field="site",
            records={
                "a": {"iq": 1.0, "edu": 2.0, "sex": "f", "site": "s1"},
                "b": {"iq": 3.0, "edu": 4.0, "sex": "m", "site": "s2"},
                "c": {"iq": 5.0, "sex": "m", "site": "s1"},
            },
        )

    def test_complete_case_detection(self):
        sc = self._scalars()
        assert sc.is_complete("a")
        assert not sc.is_complete("c")     # edu missing

    def test_numeric_array_alignment(self):
        sc = self._scalars()
        np.testing.assert_array_equal(sc.numeric_array("iq", ["b", "a"]),
                                      [3.0, 1.0])

    def test_cluster_labels(self):
        sc = self._scalars()
        assert sc.cluster_labels(["a", "b"]) == ["s1", "s2"]

    def test_resample_renames_duplicates(self):
        sc = self._scalars()
        out = sc.resample(["a", "a", "b"])
        assert set(out.records) == {"a", "a#1", "b"}
        assert out.records["a#1"]["iq"] == 1.0


class TestNormalize:
    def test_centers_and_scales(self):
        from sparsefda import Curve

        sample = make_sample({"a": ([0.0, 5.0], [3.0, 13.0])})
        mean = Curve(np.array([0.0, 10.0]), np.array([1.0, 1.0]))
        var = Curve(np.array([0.0, 10.0]), np.array([4.0, 4.0]))
        out = normalize_sample(sample, mean, var)
        np.testing.assert_allclose(out.data["a"][1], [1.0, 6.0])


class TestResample:
    def test_resample_with_duplicates(self, small_cohort):
        cohort, _ = small_cohort
        sample = cohort.samples["x"]
        sid = sample.subject_ids[3]
        out = sample.resample([sid, sid])
        assert out.subject_ids == [sid, f"{sid}#1"]
        np.testing.assert_array_equal(out.data[sid][0],
                                      out.data[f"{sid}#1"][0])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.1, 9.9), min_size=1, max_size=6, unique=True))
def test_subset_preserves_subject_data(times):
    t = np.sort(np.asarray(times))
    sample = make_sample({"a": (t, t * 2.0), "b": ([1.0], [1.0])})
    sub = sample.subset(["a"])
    assert sub.subject_ids == ["a"]
    np.testing.assert_array_equal(sub.data["a"][0], t)
