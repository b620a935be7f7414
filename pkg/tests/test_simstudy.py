import numpy as np
import pytest

from periofactor import (MetricsTable, StudyPlan, emit_table, metrics_csv,
                         metrics_text, read_metrics_csv, run_study)
from periofactor.errors import ConfigurationError, NumericalError, \
    PeriofactorError
from periofactor import simstudy


def tiny_plan(**kwargs):
    defaults = dict(designs=(1,), models=(1, 2), replicates=2, seed=5,
                    n_iter=240, burn_in=80,
                    design_overrides={"n_patients": 8})
    defaults.update(kwargs)
    return StudyPlan(**defaults)


class TestPlanValidation:
    def test_rejects_unknown_design_and_model(self):
        with pytest.raises(ConfigurationError):
            StudyPlan(designs=(7,))
        with pytest.raises(ConfigurationError):
            StudyPlan(models=(0,))
        with pytest.raises(ConfigurationError):
            StudyPlan(replicates=0)

    def test_paper_scale_defaults(self):
        plan = StudyPlan.paper_scale(designs=(1,), models=(1,))
        assert plan.replicates == 100
        assert plan.n_iter == 20000
        assert plan.burn_in == 5000


class TestRunStudy:
    def test_smoke_and_determinism(self):
        t1 = run_study(tiny_plan())
        t2 = run_study(tiny_plan())
        assert metrics_csv(t1) == metrics_csv(t2)
        assert len(t1.rows) == 2
        for row in t1.rows:
            assert row.metrics.n_replicates == 2
            assert row.n_failed == 0

    def test_adding_models_does_not_perturb_data(self):
        # same (design, replicate) substream regardless of the model list
        just_one = run_study(tiny_plan(models=(1,)))
        both = run_study(tiny_plan(models=(1, 2)))
        a = just_one.row(1, 1).metrics
        b = both.row(1, 1).metrics
        assert np.array_equal(a.power, b.power)
        assert a.mse100 == b.mse100

    def test_thread_pool_equals_serial(self):
        serial = run_study(tiny_plan())
        pooled = run_study(tiny_plan(), threads=2)
        assert metrics_csv(serial) == metrics_csv(pooled)

    def test_failures_recorded_and_excluded(self, monkeypatch):
        real = simstudy.run_chain

        def flaky(cfg, data):
            if cfg.model_id == 2 and cfg.seed % 2 == 0:
                raise NumericalError("synthetic failure")
            return real(cfg, data)

        monkeypatch.setattr(simstudy, "run_chain", flaky)
        table = run_study(tiny_plan(replicates=3))
        row = table.row(1, 2)
        assert row.n_failed >= 1
        assert row.metrics.n_replicates == 3 - row.n_failed

    def test_all_failures_raise(self, monkeypatch):
        def broken(cfg, data):
            raise NumericalError("synthetic failure")

        monkeypatch.setattr(simstudy, "run_chain", broken)
        with pytest.raises(PeriofactorError, match="every replicate failed"):
            run_study(tiny_plan(models=(2,)))

    def test_b0_power_only_for_informative_models(self):
        table = run_study(tiny_plan(designs=(4,), models=(1, 4),
                                    replicates=1))
        assert table.row(4, 1).metrics.b0_power is None
        assert table.row(4, 4).metrics.b0_power is not None


class TestRendering:
    def test_empty_table_is_header_only(self):
        table = MetricsTable(rows=[], beta_true=np.zeros(6))
        text, csv_text = emit_table(table)
        lines = csv_text.strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("design,model,b0,beta1")
        assert len(text.strip().splitlines()) == 1

    def test_single_cell_round_trip(self):
        table = run_study(tiny_plan(models=(2,), replicates=1))
        _, csv_text = emit_table(table)
        assert len(csv_text.strip().splitlines()) == 2
        back = read_metrics_csv(csv_text)
        assert metrics_csv(back) == csv_text
        a, b = table.rows[0].metrics, back.rows[0].metrics
        assert np.array_equal(a.power, b.power)
        assert a.mse100 == b.mse100
        assert np.array_equal(np.isnan(a.relbias), np.isnan(b.relbias))
        ok = ~np.isnan(a.relbias)
        assert np.array_equal(a.relbias[ok], b.relbias[ok])

    def test_text_table_layout(self):
        table = run_study(tiny_plan(models=(1,), replicates=1))
        text = metrics_text(table)
        head, row = text.strip().splitlines()
        assert head.split()[:3] == ["design", "model", "b0"]
        assert "RelBias6" in head
        assert row.split()[:2] == ["1", "1"]
        assert row.split()[2] == "--"  # model 1 has no missingness slope
