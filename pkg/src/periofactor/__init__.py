"""Latent spatial factor models for multivariate site-level periodontal
data with informatively missing observation clusters."""

__version__ = "0.1.0"

from .carfield import (CarStructure, PrecisionGaussian, car_log_density,
                       car_precision, quadratic_form,
                       sample_precision_gaussian)
from .diagnostics import (InfluenceReport, ReplicateResult, StudyMetrics,
                          collapsed_response, conjugate_beta_posterior, dic,
                          influence_report, influence_weight, site_weights,
                          study_metrics)
from .errors import (ConfigurationError, DataValidationError, DomainError,
                     NumericalError, PeriofactorError,
                     UnsupportedConfigurationError)
from .model import (BINARY, CONTINUOUS, Dataset, DesignSpec, ModelState,
                    PriorConfig, ResponseSpec, design_spec, generate_dataset,
                    load_dataset_csv, marginal_moments, response_correlation,
                    simulate_responses, write_dataset_csv)
from .mouthgraph import (MouthGraph, build_mouth_graph, connected_components,
                         graph_from_edges, path_graph, tooth_average_map)
from .sampler import (ChainOutput, FitConfig, GibbsSampler,
                      fit_mean_regression, run_chain)
from .simstudy import (MetricsTable, StudyPlan, emit_table, metrics_csv,
                       metrics_text, read_metrics_csv, run_study)
from .stochastic import (RngStream, beta_draw, gamma_draw, inverse_gamma_draw,
                         normal_draw, truncated_normal)
