"""Counterexample-guided training of neural feedback controllers against STL properties."""

from .clustering import kmeans, select_cex, select_examples, silhouette
from .controllers import PidController, PidGains, SwitchedController, SwitchedGains, generate_combined_traces
from .coverage import CoverageTracker, SettingSpace, SignalGrid, beta, beta_inv, grid_centers
from .falsify import ClosedLoop, FalsifyConfig, falsify
from .loop import LoopConfig, Problem, run_loop
from .nn import Dataset, History, Net, NetController, NetSpec, gradient_check, train
from .plant import ControlSetting, Plant, make_plant, simulate_batch, simulate_closed_loop
from .pstl import PstlFormula, build_phi_template, policy_similarity, volume_underapprox
from .stl import build_property, parse_formula, robustness, robustness_signal, to_text

__all__ = [
    "kmeans", "select_cex", "select_examples", "silhouette",
    "PidController", "PidGains", "SwitchedController", "SwitchedGains", "generate_combined_traces",
    "CoverageTracker", "SettingSpace", "SignalGrid", "beta", "beta_inv", "grid_centers",
    "ClosedLoop", "FalsifyConfig", "falsify",
    "LoopConfig", "Problem", "run_loop",
    "Dataset", "History", "Net", "NetController", "NetSpec", "gradient_check", "train",
    "ControlSetting", "Plant", "make_plant", "simulate_batch", "simulate_closed_loop",
    "PstlFormula", "build_phi_template", "policy_similarity", "volume_underapprox",
    "build_property", "parse_formula", "robustness", "robustness_signal", "to_text",
]
