"""Data-parallel training with relaxed communication: primitives, engine, algorithms."""

from .algorithms import AlgorithmSpec, DivergenceError, make_algorithm
from .codec import Codec, decode, encode
from .collectives import Topology, c_fp_s, c_lp_s, d_fp_s, d_lp_s, hierarchical
from .engine import Engine
from .runner import ExperimentConfig, load_config, parse_config, run_sim
from .tensor import FlatTensor, flatten
from .transport import NetworkProfile, SimCluster

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSpec", "Codec", "DivergenceError", "Engine", "ExperimentConfig", "FlatTensor",
    "NetworkProfile", "SimCluster", "Topology", "c_fp_s", "c_lp_s", "d_fp_s", "d_lp_s", "decode",
    "encode", "flatten", "hierarchical", "load_config", "make_algorithm", "parse_config", "run_sim",
]
