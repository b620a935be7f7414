"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The replicate-study
criterion is the long pole (tens of minutes on two cores at desk scale);
everything else finishes in a few minutes. The paper-scale study is opt-in
via PERIOFACTOR_PAPER_SCALE=1 (hours of compute, not CI-gated).
"""

import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import stats

from periofactor import (CarStructure, Dataset, FitConfig, GibbsSampler,
                         PriorConfig, ResponseSpec, RngStream, StudyPlan,
                         build_mouth_graph, conjugate_beta_posterior, dic,
                         design_spec, generate_dataset, influence_weight,
                         marginal_moments, metrics_csv, metrics_text,
                         run_chain, run_study, simulate_responses,
                         site_weights, truncated_normal)
from periofactor.model import CONTINUOUS, BINARY, ModelState
from periofactor.simstudy import DESK_SCALE

from oracles import (batch_se, dense_influence_weight, joint_gls_posterior,
                     random_instance)

THREADS = os.cpu_count() or 1


@contextmanager
def criterion(num: int, label: str):
    ok = False
    start = time.time()
    try:
        yield
        ok = True
    finally:
        status = "PASS" if ok else "FAIL"
        print(f"\n[criterion {num}] {status} ({time.time() - start:.1f}s) "
              f"{label}")


def test_criterion_1_oracle_equivalence():
    """Eq.-6 collapse vs dense GLS on 50 instances, and the sampler's beta
    posterior vs Eq. 6 under fixed covariance parameters."""
    with criterion(1, "weighted-regression collapse and sampler agree with "
                      "the dense joint-Gaussian oracle"):
        start = time.time()
        rng = RngStream(20260810).gen
        for trial in range(50):
            j = 2 if trial % 4 == 0 else 1
            data, car, a, b, sigma2, tau2, rho = random_instance(rng, j=j)
            mean, cov = conjugate_beta_posterior(data, a, b, sigma2, tau2,
                                                 rho, car)
            mean_o, cov_o = joint_gls_posterior(data, a, b, sigma2, tau2,
                                                rho, car)
            assert np.allclose(mean, mean_o, atol=1e-8, rtol=0)
            assert np.allclose(cov, cov_o, atol=1e-8, rtol=0)

            # full sampler against the same collapse on every 3rd instance
            # (single response, enough patients to identify beta)
            if j != 1 or trial % 3 != 0 or \
                    data.n_patients <= data.X.shape[1]:
                continue
            cfg = FitConfig(
                n_iter=2600, burn_in=600, seed=1000 + trial, spatial=True,
                informative_missing=False, patient_variances="per_patient",
                prior=PriorConfig(w=1e6),
                frozen=frozenset({"sigma2", "tau2", "rho", "ab_pairs",
                                  "hyperparameters"}),
                init={"sigma2": sigma2, "tau2": tau2, "rho": rho,
                      "a": a, "b": b})
            chain = run_chain(cfg, data)
            draws = chain.draws["beta"]
            p = draws.shape[1]
            for k in range(p):
                se = float(batch_se(draws[:, k], 20))
                z = (draws[:, k].mean() - mean_o[k]) / max(se, 1e-12)
                assert abs(z) < 3.0, (trial, k, z)
            emp = np.atleast_2d(np.cov(draws.T))
            nb = 20
            bat = draws[:len(draws) // nb * nb].reshape(nb, -1, p)
            bcov = np.array([np.atleast_2d(np.cov(x.T)) for x in bat])
            cse = bcov.std(axis=0, ddof=1) / np.sqrt(nb)
            assert (np.abs(emp - cov_o) < 3.0 * cse + 1e-10).all(), trial
        elapsed = time.time() - start
        assert elapsed < 120.0, f"criterion 1 took {elapsed:.0f}s"


def test_criterion_2_car_conditional_identity():
    """Exact CAR conditional moments and the eigenvalue log-determinant."""
    with criterion(2, "CAR conditional identity and log-det within 1e-8"):
        start = time.time()
        for teeth in (1, 7):
            for grid in (1, 2, 3):
                graph = build_mouth_graph(teeth, 1, grid)
                car = CarStructure(graph)
                m = graph.degrees.astype(float)
                adj = graph.adjacency()
                for rho in (0.2, 0.8, 0.99):
                    q = car.precision(rho)
                    assert np.array_equal(np.diag(q), m)  # 1/Q_ss = 1/m(s)
                    rows, cols = np.nonzero(adj)
                    assert np.allclose(-q[rows, cols] / q[rows, rows],
                                       rho / m[rows], rtol=0, atol=1e-15)
                    dense = 2.0 * np.log(np.diag(
                        np.linalg.cholesky(q))).sum()
                    assert abs(car.log_det(rho) - dense) < 1e-8
        elapsed = time.time() - start
        assert elapsed < 10.0, f"criterion 2 took {elapsed:.1f}s"


def test_criterion_4_probit_augmentation():
    """Every truncated draw on its correct side over a full chain, plus the
    half-normal mean identity."""
    with criterion(4, "probit augmentation sides and half-normal mean"):
        rng = RngStream(4).gen
        draws = truncated_normal(np.zeros(100_000), 1.0, "above0", rng)
        half_mean, half_var = np.sqrt(2 / np.pi), 1 - 2 / np.pi
        assert (draws > 0).all()
        assert abs(draws.mean() - half_mean) < \
            3 * np.sqrt(half_var / len(draws))

        graph = build_mouth_graph(3, 1, 1)
        spec = ResponseSpec(("cal", "bop"), (CONTINUOUS, BINARY))
        gen = RngStream(5).gen
        n = 12
        x = gen.standard_normal((n, 2))
        data, _ = simulate_responses(
            graph, spec, x, beta=np.array([0.3, -0.2]),
            a=np.array([0.5, -0.3]), b=np.array([1.0, 0.8]),
            sigma2=np.column_stack([np.full(n, 0.8), np.ones(n)]),
            tau2=np.full(n, 1.0), rho=np.full(n, 0.7), rng=gen,
            a0=-0.8, b0=0.7, granularity="tooth")
        cfg = FitConfig.for_model(5, n_iter=300, burn_in=100, seed=6)
        sampler = GibbsSampler(cfg, data)
        missing = data.unit_missing
        for it in range(cfg.n_iter):
            sampler.sweep(it)
            lat = sampler.state.y_work[:, 1, :][data.observed]
            ystar = data.y[:, 1, :][data.observed]
            assert ((lat > 0) == (ystar == 1.0)).all(), it
            assert ((sampler.state.y0 > 0) == missing).all(), it


def test_criterion_5_identifiability():
    """Scaling map invariance of the marginal moments, and reference-choice
    invariance of interval-exclusion decisions."""
    with criterion(5, "scaling-map invariance and reference invariance"):
        graph = build_mouth_graph(2, 1, 1)
        car = CarStructure(graph)
        spec = ResponseSpec(("r1", "r2", "r3"),
                            (CONTINUOUS, CONTINUOUS, BINARY))
        rng = RngStream(7).gen
        n = 5
        x = rng.standard_normal((n, 2))
        w = rng.standard_normal((graph.n_sites, 1))
        data, _ = simulate_responses(
            graph, spec, x, beta=np.array([0.3, -0.2]),
            a=np.array([0.5, -0.1, 0.2]), b=np.array([1.0, 1.5, -0.8]),
            sigma2=np.tile([0.8, 1.2, 1.0], (n, 1)), tau2=np.full(n, 0.7),
            rho=np.full(n, 0.6), rng=rng, W=w, alpha=np.array([0.4]),
            a0=None)

        def state_for(scale):
            return ModelState(
                mu=np.zeros((n, graph.n_sites)),
                a=np.array([0.5, -0.1, 0.2]),
                b=np.array([1.0, 1.5, -0.8]) * scale,
                a0=0.0, b0=0.0, alpha=np.array([0.4]) / scale,
                beta=np.array([0.3, -0.2]) / scale,
                sigma2=np.tile([0.8, 1.2, 1.0], (n, 1)),
                tau2=np.full(n, 0.7) / scale ** 2,
                rho=np.full(n, 0.6),
                c=np.ones(3), d=np.ones(3), e=1.0, f=1.0, g=1.0, h=1.0,
                y_work=data.y.copy(),
                y0=np.zeros((n, graph.n_teeth)), prior=PriorConfig(),
                reference=0, spatial=True, informative_missing=False,
                pooled=False)

        m0, c0 = marginal_moments(state_for(1.0), data, car, 2, 7)
        for scale in (0.5, 2.0, 10.0):
            m1, c1 = marginal_moments(state_for(scale), data, car, 2, 7)
            assert np.allclose(m0, m1, atol=1e-12, rtol=0)
            assert np.allclose(c0, c1, atol=1e-12, rtol=0)

        # reference-choice invariance of the exclusion decisions
        graph = build_mouth_graph(4, 1, 1)
        gen = RngStream(8).gen
        n = 40
        x = gen.standard_normal((n, 3))
        data, _ = simulate_responses(
            graph, spec, x, beta=np.array([0.6, 0.0, 0.35]),
            a=np.array([0.3, -0.2, 0.1]), b=np.array([1.0, 1.3, 0.7]),
            sigma2=np.tile([0.8, 1.2, 1.0], (n, 1)),
            tau2=np.full(n, 0.8), rho=np.full(n, 0.6), rng=gen, a0=None)
        decisions, signs = [], []
        for ref in (0, 1, 2):
            cfg = FitConfig(n_iter=2500, burn_in=600, seed=9, spatial=True,
                            informative_missing=False,
                            patient_variances="pooled", reference=ref)
            chain = run_chain(cfg, data)
            mean, lo, hi = chain.beta_summary()
            decisions.append(tuple((lo > 0) | (hi < 0)))
            signs.append(tuple(np.sign(mean)))
        assert decisions[0] == decisions[1] == decisions[2], decisions
        assert signs[0] == signs[1] == signs[2], signs
        assert decisions[0] == (True, False, True)


def test_criterion_6_influence_diagnostics():
    """Weight monotonicity, gap-site dominance, dense agreement, and the
    directional DIC grid preference."""
    with criterion(6, "influence weights and DIC grid preference"):
        graph = build_mouth_graph(7, 1, 1)
        car = CarStructure(graph)
        rng = RngStream(10).gen
        for _ in range(8):
            rho = float(rng.uniform(0, 0.99))
            tau2 = float(rng.uniform(0.2, 3.0))
            delta = float(rng.uniform(0.05, 5.0))
            assert abs(influence_weight(rho, tau2, delta, car)
                       - dense_influence_weight(rho, tau2, delta, car)) < 1e-10
        rhos = np.linspace(0.0, 0.99, 10)
        w = [influence_weight(r, 1.0, 1.0, car) for r in rhos]
        assert all(a > b for a, b in zip(w, w[1:]))
        taus = np.linspace(0.2, 4.0, 10)
        w = [influence_weight(0.5, t, 1.0, car) for t in taus]
        assert all(a > b for a, b in zip(w, w[1:]))
        deltas = np.linspace(0.1, 5.0, 10)
        w = [influence_weight(0.5, 1.0, d, car) for d in deltas]
        assert all(a < b for a, b in zip(w, w[1:]))
        for rho, delta in ((0.1, 0.2), (0.99, 0.2), (0.1, 5.0), (0.99, 5.0)):
            wgt = influence_weight(rho, 1.0, delta, car)
            k = site_weights(rho, delta, wgt, car, scale_to_sites=True)
            assert graph.gap_site[int(np.argmax(k))]

        # DIC prefers the generating grid in a majority of seeds
        grid1 = build_mouth_graph(7, 1, 1)
        grid2 = build_mouth_graph(7, 1, 2)
        wins = 0
        n_seeds = 10
        for seed in range(n_seeds):
            data, _ = generate_dataset(
                design_spec(2, n_patients=10, a0=None),
                RngStream(11, seed).gen)
            values = {}
            for label, g in (("g1", grid1), ("g2", grid2)):
                fit_data = Dataset(
                    graph=g, responses=data.responses, X=data.X,
                    y=data.y, observed=data.observed, missing_unit="tooth")
                cfg = FitConfig.for_model(2, n_iter=1200, burn_in=300,
                                          seed=12 + seed)
                chain = run_chain(cfg, fit_data)
                values[label], _, _ = dic(chain, fit_data)
            wins += values["g1"] < values["g2"]
        assert wins > n_seeds // 2, f"grid 1 preferred in {wins}/{n_seeds}"


def test_criterion_7_determinism():
    """Byte-identical outputs at a fixed seed, regardless of worker count."""
    with criterion(7, "fixed-seed byte identity across thread counts"):
        plan = StudyPlan(designs=(4,), models=(1, 4), replicates=2, seed=13,
                         n_iter=220, burn_in=80,
                         design_overrides={"n_patients": 8})
        serial = metrics_csv(run_study(plan, threads=1))
        pooled = metrics_csv(run_study(plan, threads=2))
        assert serial.encode() == pooled.encode()

        data, _ = generate_dataset(design_spec(5, n_patients=6),
                                   RngStream(14).gen)
        cfg = FitConfig.for_model(5, n_iter=200, burn_in=80, seed=15)
        a = run_chain(cfg, data)
        b = run_chain(cfg, data)
        for group in a.draws:
            assert np.array_equal(a.draws[group], b.draws[group])
        assert np.array_equal(a.deviance, b.deviance)


@pytest.mark.slow
def test_criterion_3_table1_trend_desk_scale():
    """Desk-scale reproduction of the replicate-study orderings."""
    with criterion(3, "replicate-study trends at desk scale (M=20)"):
        start = time.time()
        seed = 20260810
        kw = dict(replicates=DESK_SCALE["replicates"],
                  n_iter=DESK_SCALE["n_iter"],
                  burn_in=DESK_SCALE["burn_in"], seed=seed)
        d1 = run_study(StudyPlan(designs=(1,), models=(1, 2, 3, 4, 5), **kw),
                       threads=THREADS)
        print("\n" + metrics_text(d1))
        d5 = run_study(StudyPlan(designs=(5,), models=(1, 4, 5), **kw),
                       threads=THREADS)
        print(metrics_text(d5))
        d4 = run_study(StudyPlan(designs=(4,), models=(4, 5), **kw),
                       threads=THREADS)
        print(metrics_text(d4))
        d6 = run_study(StudyPlan(designs=(6,), models=(4, 5), **kw),
                       threads=THREADS)
        print(metrics_text(d6))
        print(f"study wall time {time.time() - start:.0f}s on "
              f"{THREADS} workers")

        # Design 1: every model powerful for beta6, calibrated for beta1
        for model in (1, 2, 3, 4, 5):
            m = d1.row(1, model).metrics
            assert m.power[5] >= 0.9, (model, m.power)
            assert m.power[0] <= 0.15, (model, m.power)

        # Design 5: the full model dominates the patient-mean regression
        m1 = d5.row(5, 1).metrics
        m5 = d5.row(5, 5).metrics
        assert m5.power[5] - m1.power[5] >= 0.3, (m1.power[5], m5.power[5])
        assert m5.mse100 <= 0.5 * m1.mse100, (m1.mse100, m5.mse100)
        assert m1.relbias[5] < -0.1, m1.relbias[5]
        assert abs(m5.relbias[5]) < 0.12, m5.relbias[5]

        # Designs 4-6: informative-missingness slope always detected
        for table, design in ((d4, 4), (d5, 5), (d6, 6)):
            for model in (4, 5):
                row = table.row(design, model)
                assert row.metrics.b0_power == 1.0, (design, model)
                assert row.n_failed == 0


PAPER_TABLE1 = {
    # (design, model) -> (power b0, power beta1..beta6, 100*MSE, RelBias6)
    (1, 1): (None, (0.06, 0.05, 0.03, 0.29, 0.85, 1.00), 0.103, 0.022),
    (1, 5): (0.12, (0.06, 0.05, 0.04, 0.35, 0.83, 1.00), 0.106, 0.006),
    (2, 2): (None, (0.03, 0.05, 0.02, 0.15, 0.56, 0.80), 0.287, 0.034),
    (5, 1): (None, (0.05, 0.04, 0.08, 0.07, 0.19, 0.26), 0.780, -0.229),
    (5, 5): (1.00, (0.06, 0.09, 0.08, 0.29, 0.66, 0.94), 0.193, 0.023),
    (6, 5): (1.00, (0.06, 0.07, 0.08, 0.61, 0.96, 1.00), 0.070, 0.024),
}


@pytest.mark.skipif(not os.environ.get("PERIOFACTOR_PAPER_SCALE"),
                    reason="paper-scale study (hours of compute); set "
                           "PERIOFACTOR_PAPER_SCALE=1 to run")
def test_paper_scale_table1():
    """Full-scale study vs the published table, within 3x its caption SEs."""
    plan = StudyPlan.paper_scale(designs=(1, 2, 5, 6),
                                 models=(1, 2, 3, 4, 5), seed=20260810)
    table = run_study(plan, threads=THREADS)
    print("\n" + metrics_text(table))
    for (design, model), (b0, powers, mse100, relbias6) in \
            PAPER_TABLE1.items():
        m = table.row(design, model).metrics
        assert abs(m.mse100 - mse100) <= 3 * 0.045, (design, model, m.mse100)
        assert abs(m.relbias[5] - relbias6) <= 3 * 0.006 + 3 * 0.05, \
            (design, model, m.relbias[5])
        se = np.sqrt(np.asarray(powers) * (1 - np.asarray(powers)) / 100)
        assert (np.abs(m.power - powers) <= 3 * se + 0.05).all(), \
            (design, model, m.power)
    # Design 2: all five models statistically indistinguishable
    p6 = [table.row(2, m).metrics.power[5] for m in (1, 2, 3, 4, 5)]
    assert max(p6) - min(p6) <= 0.15, p6
