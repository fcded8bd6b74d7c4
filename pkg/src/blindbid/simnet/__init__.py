"""Deterministic multi-party simulator for the retargeting protocol.

The pieces: ScenarioConfig (one file of knobs fully determines a run),
World + run_scenario (the event timeline with the plaintext oracle running
alongside), HygieneMonitor (privacy claims as runtime assertions), bench
(throughput + message sizes), report (CSV + figures), wire (every party
behind a localhost HTTP server).
"""

from .config import ScenarioConfig
from .runner import RunMetrics, World, run_scenario

__all__ = ["RunMetrics", "ScenarioConfig", "World", "run_scenario"]
