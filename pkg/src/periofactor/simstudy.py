"""Simulation-study harness: replicate generation, model fits, Table rows.

Replicate r of design d always draws its data from the substream keyed by
(design, replicate), so adding or removing models never perturbs the data;
each (design, replicate, model) fit gets its own chain seed. Cells run on a
process pool and the aggregation is a deterministic reduction ordered by
(design, model, replicate).
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ReplicateResult, StudyMetrics, study_metrics
from .errors import ConfigurationError, PeriofactorError
from .model import DesignSpec, design_spec, generate_dataset
from .sampler import FitConfig, run_chain
from .stochastic import RngStream

DESK_SCALE = dict(replicates=20, n_iter=4000, burn_in=1000)
PAPER_SCALE = dict(replicates=100, n_iter=20000, burn_in=5000)


@dataclass(frozen=True)
class StudyPlan:
    """Which designs get fitted by which model variants, and chain sizing."""

    designs: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    models: tuple[int, ...] = (1, 2, 3, 4, 5)
    replicates: int = DESK_SCALE["replicates"]
    seed: int = 0
    n_iter: int = DESK_SCALE["n_iter"]
    burn_in: int = DESK_SCALE["burn_in"]
    thin: int = 1
    design_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        bad = [d for d in self.designs if d not in range(1, 7)]
        if bad:
            raise ConfigurationError(f"unknown designs {bad}")
        bad = [m for m in self.models if m not in range(1, 6)]
        if bad:
            raise ConfigurationError(f"unknown models {bad}")

    @classmethod
    def paper_scale(cls, **kwargs) -> "StudyPlan":
        merged = {**PAPER_SCALE, **kwargs}
        return cls(**merged)


@dataclass
class MetricsRow:
    design: int
    model: int
    metrics: StudyMetrics
    n_failed: int = 0


@dataclass
class MetricsTable:
    rows: list
    beta_true: np.ndarray

    def row(self, design: int, model: int) -> MetricsRow:
        for r in self.rows:
            if r.design == design and r.model == model:
                return r
        raise KeyError((design, model))


def _chain_seed(base_seed: int, design: int, replicate: int, model: int) -> int:
    ss = np.random.SeedSequence(entropy=base_seed,
                                spawn_key=(2, design, replicate, model))
    return int(ss.generate_state(1, np.uint64)[0])


def _replicate_job(args) -> tuple[int, int, list]:
    """Generate one dataset and fit every requested model on it."""
    (design_id, replicate, models, seed, n_iter, burn_in, thin,
     overrides) = args
    design = design_spec(design_id, **overrides)
    data_stream = RngStream(seed, 3, design_id, replicate)
    data, _ = generate_dataset(design, data_stream.gen)
    results = []
    for model_id in models:
        try:
            cfg = FitConfig.for_model(
                model_id, n_iter=n_iter, burn_in=burn_in, thin=thin,
                seed=_chain_seed(seed, design_id, replicate, model_id))
            chain = run_chain(cfg, data)
            results.append((model_id, ReplicateResult.from_chain(chain)))
        except PeriofactorError as exc:  # recorded, replicate excluded
            results.append((model_id, f"{type(exc).__name__}: {exc}"))
    return design_id, replicate, results


def run_study(plan: StudyPlan, threads: int = 1) -> MetricsTable:
    """Fit every (design, model, replicate) cell and aggregate metrics."""
    base_design = design_spec(plan.designs[0], **plan.design_overrides)
    beta_true = np.asarray(base_design.beta, dtype=float)

    jobs = [(d, r, plan.models, plan.seed, plan.n_iter, plan.burn_in,
             plan.thin, plan.design_overrides)
            for d in plan.designs for r in range(plan.replicates)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_replicate_job, jobs, chunksize=1))
    else:
        raw = [_replicate_job(j) for j in jobs]

    by_cell: dict[tuple[int, int], list] = {(d, m): []
                                            for d in plan.designs
                                            for m in plan.models}
    failures: dict[tuple[int, int], int] = {key: 0 for key in by_cell}
    for design_id, replicate, results in sorted(raw, key=lambda t: (t[0], t[1])):
        for model_id, res in results:
            if isinstance(res, str):
                failures[(design_id, model_id)] += 1
            else:
                by_cell[(design_id, model_id)].append(res)

    rows = []
    for d in plan.designs:
        for m in plan.models:
            reps = by_cell[(d, m)]
            if not reps:
                raise PeriofactorError(
                    f"every replicate failed for design {d}, model {m}")
            rows.append(MetricsRow(design=d, model=m,
                                   metrics=study_metrics(reps, beta_true),
                                   n_failed=failures[(d, m)]))
    return MetricsTable(rows=rows, beta_true=beta_true)


# ---------------------------------------------------------------------------
# Rendering


def _csv_columns(p: int) -> list:
    return (["design", "model", "b0"]
            + [f"beta{k+1}" for k in range(p)]
            + ["mse100"]
            + [f"relbias{k+1}" for k in range(p)]
            + ["n_replicates", "n_failed"])


def metrics_csv(table: MetricsTable) -> str:
    p = table.beta_true.size
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(_csv_columns(p))
    for row in table.rows:
        m = row.metrics
        b0 = "" if m.b0_power is None else repr(float(m.b0_power))
        rel = ["" if np.isnan(v) else repr(float(v)) for v in m.relbias]
        w.writerow([row.design, row.model, b0,
                    *[repr(float(v)) for v in m.power],
                    repr(float(m.mse100)), *rel,
                    m.n_replicates, row.n_failed])
    return buf.getvalue()


def metrics_text(table: MetricsTable) -> str:
    """Human-readable table in the usual design x model layout."""
    p = table.beta_true.size
    largest = int(np.argmax(np.abs(table.beta_true))) if p else 0
    head = (f"{'design':>6} {'model':>5} {'b0':>5} "
            + " ".join(f"{'beta%d' % (k+1):>6}" for k in range(p))
            + f" {'100*MSE':>8} {'RelBias%d' % (largest+1):>9}")
    lines = [head]
    for row in table.rows:
        m = row.metrics
        b0 = "  --" if m.b0_power is None else f"{m.b0_power:4.2f}"
        rel = m.relbias[largest]
        rel_s = "    --" if np.isnan(rel) else f"{rel:9.3f}"
        lines.append(
            f"{row.design:>6} {row.model:>5} {b0:>5} "
            + " ".join(f"{v:6.2f}" for v in m.power)
            + f" {m.mse100:8.3f} {rel_s:>9}")
    return "\n".join(lines) + "\n"


def read_metrics_csv(text: str) -> MetricsTable:
    """Parse the CSV produced by :func:`metrics_csv` (exact round trip)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    p = sum(1 for c in header if c.startswith("beta"))
    rows = []
    for rec in reader:
        vals = dict(zip(header, rec))
        power = np.array([float(vals[f"beta{k+1}"]) for k in range(p)])
        relbias = np.array([float(vals[f"relbias{k+1}"])
                            if vals[f"relbias{k+1}"] != "" else np.nan
                            for k in range(p)])
        metrics = StudyMetrics(
            power=power,
            b0_power=None if vals["b0"] == "" else float(vals["b0"]),
            mse100=float(vals["mse100"]),
            relbias=relbias,
            n_replicates=int(vals["n_replicates"]))
        rows.append(MetricsRow(design=int(vals["design"]),
                               model=int(vals["model"]),
                               metrics=metrics,
                               n_failed=int(vals["n_failed"])))
    beta_true = np.full(p, np.nan)
    return MetricsTable(rows=rows, beta_true=beta_true)


def emit_table(table: MetricsTable) -> tuple[str, str]:
    """(human-readable text, CSV) renderings of a metrics table."""
    return metrics_text(table), metrics_csv(table)
