"""Distributionally robust DC-OPF with CVaR constraints over a Gaussian-mixture ambiguity set."""

__version__ = "0.1.0"

from .ambiguity import AmbiguitySet, build_ambiguity_set
from .case_model import NetworkCase, build_ptdf, load_case, parse_json_case, parse_matpower
from .gmm import GmmParams, em_fit, gmm_pdf, gmm_sample, select_m_bic
from .opf import SolverConfig, check_feasibility, solve_deterministic, solve_dro_opf
from .oracle import mc_cvar, out_of_sample_test, synth_wind_errors
from .qp import QuadraticProgram, solve_qp
from .wccvar import MomentSet, cvar_fixed, moment_wc_cvar, wc_cvar

__all__ = [
    "AmbiguitySet", "GmmParams", "MomentSet", "NetworkCase", "QuadraticProgram", "SolverConfig",
    "build_ambiguity_set", "build_ptdf", "check_feasibility", "cvar_fixed", "em_fit", "gmm_pdf",
    "gmm_sample", "load_case", "mc_cvar", "moment_wc_cvar", "out_of_sample_test", "parse_json_case",
    "parse_matpower", "select_m_bic", "solve_deterministic", "solve_dro_opf", "solve_qp",
    "synth_wind_errors", "wc_cvar",
]
