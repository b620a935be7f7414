"""Command-line surface: simulate, fit, diagnose, sim-study.

Configuration is a flat set of dotted keys with defaults; a config file of
``key=value`` lines (# comments allowed) can override defaults, and bare
``key=value`` arguments override both. Every run writes a manifest that can
be fed back via --config to reproduce it exactly.

Exit codes: 0 success, 2 configuration error, 3 data-validation error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .carfield import CarStructure
from .diagnostics import dic, influence_report
from .errors import (ConfigurationError, DataValidationError, NumericalError,
                     PeriofactorError, UnsupportedConfigurationError)
from .model import (Dataset, PriorConfig, design_spec, generate_dataset,
                    load_dataset_csv, standardize_columns, write_dataset_csv)
from .sampler import ChainOutput, FitConfig, run_chain
from .simstudy import StudyPlan, emit_table, run_study
from .stochastic import RngStream

DEFAULTS = {
    "seed": "0",
    "threads": "1",
    "graph.teeth_per_quadrant": "7",
    "graph.quadrants": "1",
    "graph.grid": "1",
    "prior.w": "10.0",
    "prior.u": "0.1",
    "prior.v": "0.1",
    "model.variant": "5",
    "model.reference": "",  # 1-based response number; empty = dataset default
    "sampler.n_iter": "20000",
    "sampler.burn_in": "5000",
    "sampler.thin": "1",
    "sampler.rho_concentration": "50.0",
    "sampler.hyper_scale": "0.5",
    "design.id": "1",
    "design.patients": "50",
    "design.granularity": "site",
    "data.standardize_covariates": "false",
    "data.standardize_responses": "false",
    "study.designs": "1,2,3,4,5,6",
    "study.models": "1,2,3,4,5",
    "study.replicates": "20",
    "study.n_iter": "4000",
    "study.burn_in": "1000",
    "study.paper_scale": "false",
    "diagnose.dic": "auto",
}

ALIASES = {"design": "design.id", "grid": "graph.grid"}

# One-flag reproductions of the sensitivity-analysis grid.
PRESETS = {
    "ref1": {"model.reference": "1"},
    "ref2": {"model.reference": "2"},
    "ref3": {"model.reference": "3"},
    "vague-hyper": {"prior.u": "0.0001", "prior.v": "0.0001"},
    "wide-w": {"prior.w": "1000"},
    "grid1": {"graph.grid": "1"},
    "grid2": {"graph.grid": "2"},
    "grid3": {"graph.grid": "3"},
}


class Config:
    """Validated flat key -> string mapping."""

    def __init__(self, values: dict):
        self.values = values

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigurationError(f"key {key}: not an integer "
                                     f"({self.values[key]!r})") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigurationError(f"key {key}: not a number "
                                     f"({self.values[key]!r})") from exc

    def get_bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("true", "1", "yes", "on"):
            return True
        if v in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"key {key}: not a boolean ({v!r})")

    def get_int_list(self, key: str) -> tuple[int, ...]:
        raw = self.values[key]
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigurationError(f"key {key}: not a comma list of "
                                     f"integers ({raw!r})") from exc

    def canonical_lines(self) -> list[str]:
        return [f"{k}={self.values[k]}" for k in sorted(self.values)]

    def hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.canonical_lines()).encode())
        return digest.hexdigest()[:16]


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected "
                                     f"key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_path: str | None, presets: list[str],
                   overrides: list[str]) -> Config:
    values = dict(DEFAULTS)

    def apply(mapping: dict, origin: str):
        for key, value in mapping.items():
            key = ALIASES.get(key, key)
            if key not in values:
                raise ConfigurationError(f"{origin}: unknown key {key!r}")
            values[key] = value

    if config_path:
        apply(parse_config_text(Path(config_path).read_text()),
              f"config file {config_path}")
    for name in presets:
        if name not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {name!r} (choose from {sorted(PRESETS)})")
        apply(PRESETS[name], f"preset {name}")
    apply(parse_config_text("\n".join(overrides)), "command line")
    return Config(values)


def atomic_write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def publish_dir(tmpdir: Path, outdir: Path):
    """Move fully-written files into place (no partial outputs on failure)."""
    outdir.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmpdir.iterdir()):
        os.replace(item, outdir / item.name)


def write_manifest(cfg: Config, outdir: Path, command: str):
    lines = [
        f"# periofactor {__version__} run manifest",
        f"# command: {command}",
        f"# config_hash: {cfg.hash()}",
        f"# numpy: {np.__version__}",
    ]
    lines += cfg.canonical_lines()
    atomic_write_text(outdir / "manifest.txt", "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def _fit_config(cfg: Config, data: Dataset, study: bool = False) -> FitConfig:
    prior = PriorConfig(w=cfg.get_float("prior.w"), u=cfg.get_float("prior.u"),
                        v=cfg.get_float("prior.v"))
    ref = None
    if cfg.get("model.reference"):
        ref_1based = cfg.get_int("model.reference")
        if not 1 <= ref_1based <= data.responses.n_responses:
            raise ConfigurationError(
                f"key model.reference: response {ref_1based} out of range")
        ref = ref_1based - 1
    return FitConfig.for_model(
        cfg.get_int("model.variant"),
        n_iter=cfg.get_int("sampler.n_iter"),
        burn_in=cfg.get_int("sampler.burn_in"),
        thin=cfg.get_int("sampler.thin"),
        seed=cfg.get_int("seed"),
        prior=prior,
        reference=ref,
        rho_proposal_concentration=cfg.get_float("sampler.rho_concentration"),
        hyper_proposal_scale=cfg.get_float("sampler.hyper_scale"),
        threads=cfg.get_int("threads"),
    )


def cmd_simulate(cfg: Config, outdir: Path):
    design = design_spec(
        cfg.get_int("design.id"),
        n_patients=cfg.get_int("design.patients"),
        n_teeth_per_quadrant=cfg.get_int("graph.teeth_per_quadrant"),
        n_quadrants=cfg.get_int("graph.quadrants"),
        grid_variant=cfg.get_int("graph.grid"),
        granularity=cfg.get("design.granularity"),
    )
    stream = RngStream(cfg.get_int("seed"), 3, design.design_id, 0)
    data, mu_true = generate_dataset(design, stream.gen)
    with tempfile.TemporaryDirectory(dir=outdir.parent,
                                     prefix=f".{outdir.name}.") as tmp:
        write_dataset_csv(data, tmp, mu_true=mu_true)
        publish_dir(Path(tmp), outdir)
    write_manifest(cfg, outdir, "simulate")


def _prepare_dataset(cfg: Config, data_dir: Path) -> tuple[Dataset, dict]:
    data = load_dataset_csv(data_dir)
    notes = {}
    if cfg.get_bool("data.standardize_covariates"):
        x, mean, sd = standardize_columns(data.X)
        data.X = x
        notes["covariate_mean"] = mean.tolist()
        notes["covariate_sd"] = sd.tolist()
        if data.W is not None:
            w, wmean, wsd = standardize_columns(data.W)
            data.W = w
            notes["spatial_covariate_mean"] = wmean.tolist()
            notes["spatial_covariate_sd"] = wsd.tolist()
    if cfg.get_bool("data.standardize_responses"):
        scale_notes = {}
        for jj in data.responses.continuous_indices:
            vals = data.y[:, jj, :]
            mean = float(np.nanmean(vals))
            sd = float(np.nanstd(vals))
            if sd == 0:
                raise DataValidationError(
                    f"response {data.responses.names[jj]} is constant")
            data.y[:, jj, :] = (vals - mean) / sd
            scale_notes[data.responses.names[jj]] = {"mean": mean, "sd": sd}
        notes["response_scaling"] = scale_notes
    return data, notes


def cmd_fit(cfg: Config, data_dir: Path, outdir: Path):
    data, notes = _prepare_dataset(cfg, data_dir)
    config = _fit_config(cfg, data)
    chain = run_chain(config, data)
    with tempfile.TemporaryDirectory(dir=outdir.parent,
                                     prefix=f".{outdir.name}.") as tmp:
        tmpdir = Path(tmp)
        chain.write_draws_csv(tmpdir / "draws.csv")
        chain.write_summary_csv(tmpdir / "summary.csv")
        if chain.mu_mean is not None:
            _write_mu_csv(chain, tmpdir / "mu.csv")
        publish_dir(tmpdir, outdir)
    write_manifest(cfg, outdir, "fit")
    if notes:
        atomic_write_text(outdir / "preprocessing.json",
                          json.dumps(notes, indent=2, sort_keys=True) + "\n")


def _write_mu_csv(chain: ChainOutput, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "site", "mean", "sd"])
        n, s = chain.mu_mean.shape
        for i in range(n):
            for site in range(s):
                w.writerow([i, site, repr(float(chain.mu_mean[i, site])),
                            repr(float(chain.mu_sd[i, site]))])


def cmd_diagnose(cfg: Config, data_dir: Path, outdir: Path):
    """Refit with the configured variant, then write influence/DIC reports."""
    data, _ = _prepare_dataset(cfg, data_dir)
    config = _fit_config(cfg, data)
    if config.model_id == 1:
        raise UnsupportedConfigurationError(
            "influence diagnostics need a latent-field fit (variant 2..5)")
    car = CarStructure(data.graph)
    chain = run_chain(config, data)
    report = influence_report(chain, data, car)
    with tempfile.TemporaryDirectory(dir=outdir.parent,
                                     prefix=f".{outdir.name}.") as tmp:
        tmpdir = Path(tmp)
        report.write_csv(tmpdir / "influence.csv", tmpdir / "site_weights.csv")
        dic_mode = cfg.get("diagnose.dic")
        if dic_mode not in ("auto", "on", "off"):
            raise ConfigurationError("key diagnose.dic: must be auto/on/off")
        if dic_mode != "off":
            try:
                value, p_d, mean_dev = dic(chain, data)
                body = (f"dic={value!r}\np_d={p_d!r}\n"
                        f"mean_deviance={mean_dev!r}\n")
                (tmpdir / "dic.txt").write_text(body)
            except UnsupportedConfigurationError:
                if dic_mode == "on":
                    raise
        publish_dir(tmpdir, outdir)
    write_manifest(cfg, outdir, "diagnose")
    if report.heuristic:
        print("note: patient weights use the reference-response error "
              "variance only (screening heuristic)")


def cmd_sim_study(cfg: Config, outdir: Path):
    if cfg.get_bool("study.paper_scale"):
        plan = StudyPlan.paper_scale(
            designs=cfg.get_int_list("study.designs"),
            models=cfg.get_int_list("study.models"),
            seed=cfg.get_int("seed"))
    else:
        plan = StudyPlan(
            designs=cfg.get_int_list("study.designs"),
            models=cfg.get_int_list("study.models"),
            replicates=cfg.get_int("study.replicates"),
            n_iter=cfg.get_int("study.n_iter"),
            burn_in=cfg.get_int("study.burn_in"),
            seed=cfg.get_int("seed"))
    table = run_study(plan, threads=cfg.get_int("threads"))
    text, csv_text = emit_table(table)
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(outdir / "metrics.csv", csv_text)
    atomic_write_text(outdir / "table.txt", text)
    write_manifest(cfg, outdir, "sim-study")
    print(text, end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="periofactor",
        description="Latent spatial factor models for periodontal data "
                    "with informatively missing teeth")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=False):
        p.add_argument("--config", help="config file of key=value lines")
        p.add_argument("--preset", action="append", default=[],
                       help=f"named option bundle, one of {sorted(PRESETS)}; "
                            "repeatable")
        p.add_argument("--out", required=True, help="output directory")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides")

    common(sub.add_parser("simulate", help="write a simulated dataset"))
    common(sub.add_parser("fit", help="run one MCMC fit"), needs_data=True)
    common(sub.add_parser("diagnose",
                          help="influence weights and DIC for a fit"),
           needs_data=True)
    common(sub.add_parser("sim-study",
                          help="replicate study across designs and models"))
    return parser


def main(argv=None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    overrides = list(args.overrides) + list(extra)
    try:
        for token in overrides:
            if "=" not in token:
                raise ConfigurationError(f"unrecognized argument {token!r}")
        cfg = resolve_config(args.config, args.preset, overrides)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg, outdir)
        elif args.command == "fit":
            cmd_fit(cfg, Path(args.data), outdir)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, Path(args.data), outdir)
        elif args.command == "sim-study":
            cmd_sim_study(cfg, outdir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataValidationError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except PeriofactorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
