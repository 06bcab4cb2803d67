"""Multi-view RGB-D diffusion policy with geometry-guided token fusion.

The package is organized bottom-up:

- numcore: seeded RNG streams, numeric helpers, gradient checking
- camgeom: pinhole cameras, rigs, depth bins, token-pyramid geometry
- config: dataclass run configuration + semantic hashing
- layers: shared attention / MLP building blocks
- mvfusion: RGB-D pair fusion and geometry-guided cross-view aggregation
- langread: language-grounded perceiver readout
- kinematics: dual-arm serial chains, differentiable FK
- diffusion: cosine noise schedule, forward process, deterministic sampler
- decoder: joint-centric diffusion action decoder
- model: the assembled PolicyModel
- losses: diffusion / FK-consistency / depth-distillation objectives
- synthworld: deterministic synthetic tabletop world + oracles
- dataio / checkpoint: episode and checkpoint serialization
- trainer / evalloop: optimization loop and closed-loop evaluation
- gradchecks / inspect_tools: numerical audits and perception diagnostics
- cli: the `mvpolicy` command
"""

from .config import RunConfig
from .kinematics import KinematicChain, dual_arm_chain, forward_kinematics
from .model import PolicyModel, build_model
from .numcore import Rng
from .synthworld import FAMILIES, default_rig, generate_episode, sample_scene

__version__ = "0.1.0"

__all__ = [
    "FAMILIES",
    "KinematicChain",
    "PolicyModel",
    "Rng",
    "RunConfig",
    "build_model",
    "default_rig",
    "dual_arm_chain",
    "forward_kinematics",
    "generate_episode",
    "sample_scene",
    "__version__",
]
