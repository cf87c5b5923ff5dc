"""Multichannel slotted ALOHA with a preamble exploration phase."""

from .analytic import (INV_E, LoadModel, PoolSizing, TimingProfile, access_probability,
                       ep_throughput_exact, ep_throughput_upper_bound, exploration_gain)
from .mc_engine import (FixedK, PhysicalFidelity, PoissonLoad, SlotConfig, SlotOutcome, ThroughputEstimate,
                        brute_force_conventional, brute_force_ep, run_experiment)
from .preamble import PreamblePool, gen_alltop

__version__ = "0.1.0"
