"""Performance analysis, simulation and topology design for beaconless
IEEE 802.15.4 multi-hop tree networks."""
from .model import NetworkModel, NodeSpec, ProtocolParams, ScenarioError, load_scenario, save_scenario
from .fixedpoint import AnalysisConfig, FixedPointResult, TeffModel, solve, stability_check
from .qna import PerfReport, analyze, qna_sweep, service_moments

__all__ = [
    "AnalysisConfig", "FixedPointResult", "NetworkModel", "NodeSpec", "PerfReport", "ProtocolParams",
    "ScenarioError", "TeffModel", "analyze", "load_scenario", "qna_sweep", "save_scenario",
    "service_moments", "solve", "stability_check",
]
__version__ = "0.1.0"
