"""
dpfedgen - Differentially private federated generative models for debugging
data you cannot look at
"""

__version__ = "0.1.0"
__author__ = "Federated Debugging Team"

from .dp_core import DpSpec, PrivacySpend, ParamVector, compute_privacy_spend
from .fed_sim import FedConfig, FederatedSimulator, ServerState
from .datasets import Population, Vocabulary, make_glyph_population, make_text_population
from .selection import SelectionCriteria, Subpopulation, select
from .debug_reports import DebugReportBuilder
from .config import ScenarioConfig, load_scenario

__all__ = [
    'DpSpec',
    'PrivacySpend',
    'ParamVector',
    'compute_privacy_spend',
    'FedConfig',
    'FederatedSimulator',
    'ServerState',
    'Population',
    'Vocabulary',
    'make_glyph_population',
    'make_text_population',
    'SelectionCriteria',
    'Subpopulation',
    'select',
    'DebugReportBuilder',
    'ScenarioConfig',
    'load_scenario',
]
