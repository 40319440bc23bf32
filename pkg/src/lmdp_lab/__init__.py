"""Reinforcement learning in latent MDPs: planning, optimistic learning, spectral
initialization and hard instances."""

__version__ = "0.1.0"

from .core import LMDPModel, Trajectory, make_rng  # noqa: E402

__all__ = ["LMDPModel", "Trajectory", "make_rng", "__version__"]
