"""Multi-agent Sim(3) submap alignment and occupancy-aware map fusion.

Modules
-------
liegroup      Sim(3) group operations, Jacobians and batched variants.
summary       Compact submap summaries, retrieval and their wire format.
registration  Matching, Umeyama/RANSAC, ICP and the verification gates.
posegraph     The submap graph, its robust cost, the LM solver and PGBA rewrites.
fusion        Gaussian transforms, voxel occupancy, ray carving, dedup, exposure.
simworld      Deterministic synthetic scenes and agents.
coordinator   Message stream, run loop, evaluation and exports.
"""

from .liegroup import Sim3

__version__ = "0.1.0"

__all__ = ["Sim3", "__version__"]
