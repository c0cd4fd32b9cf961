"""Analytic models and simulators for cache hit ratios.

Single caches (LRU, q-LRU, FIFO, RANDOM, LFU, k-LRU) are solved through
their characteristic time; networks of LRU caches with LCE, LCP or LCD
replication are solved node by node along the miss streams.  Matching
event-driven simulators provide the ground truth.
"""

from .network import NetworkSolution, SingularRoutingError, miss_stream_rates, network_total_hit, solve_network, \
    solve_tandem
from .netsim import NetworkSimConfig, NetworkSimReport, run_network_replications, run_network_sim
from .policies import POLICY_KINDS, PolicySpec
from .simulation import SimReport, TraceError, read_trace, replay_trace, run_replications, run_single_cache, \
    write_trace
from .single import (CharacteristicTimes, ConvergenceError, SingleCacheSolution, UnsupportedCombination,
                     aggregate_hit, hit_probability, occupancy, small_cache_hit, solve_characteristic_time,
                     two_lru_cycle_length, two_lru_hit)
from .topology import STRATEGIES, CacheNetwork, TopologyError, parse_strategy
from .traffic import PopularityModel, RequestProcess, Traffic, explicit_popularity, hyperexp2_process, \
    poisson_process, zipf_popularity

__version__ = "0.1.0"

__all__ = [
    "PopularityModel", "RequestProcess", "Traffic", "zipf_popularity", "explicit_popularity",
    "poisson_process", "hyperexp2_process",
    "PolicySpec", "POLICY_KINDS",
    "CharacteristicTimes", "SingleCacheSolution", "solve_characteristic_time", "occupancy", "hit_probability",
    "aggregate_hit", "small_cache_hit", "two_lru_hit", "two_lru_cycle_length",
    "ConvergenceError", "UnsupportedCombination",
    "SimReport", "run_single_cache", "run_replications", "replay_trace", "read_trace", "write_trace", "TraceError",
    "CacheNetwork", "STRATEGIES", "parse_strategy", "TopologyError",
    "NetworkSolution", "solve_network", "solve_tandem", "miss_stream_rates", "network_total_hit",
    "SingularRoutingError",
    "NetworkSimConfig", "NetworkSimReport", "run_network_sim", "run_network_replications",
]
