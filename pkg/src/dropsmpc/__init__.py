"""Stochastic receding-horizon control over packet-dropping control channels.

Library layout mirrors the pipeline: `model` (plant and reachability),
`lifting` (stacked horizon), `channel` (dropouts, protocols, moments),
`moments` (saturated-noise statistics), `smpc` (QP synthesis with drift
constraints), `qpsolver` (operator-splitting solver), `simulator`
(closed loop), `config`/`cli`/`report` (experiments and artifacts).
"""

__version__ = "0.1.0"

from .channel import IIDChannel, MarkovChannel, Protocol
from .model import LinearSystem, NoiseModel
from .moments import SaturationSpec
from .simulator import SimConfig, run_paths

__all__ = [
    "IIDChannel", "MarkovChannel", "Protocol", "LinearSystem", "NoiseModel",
    "SaturationSpec", "SimConfig", "run_paths", "__version__",
]
