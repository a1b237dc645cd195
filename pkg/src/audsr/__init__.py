"""Facial action-unit detection with landmark-guided domain separation and
cross-cycle reconstruction, built on a small float64 reverse-mode autodiff core."""

from . import datapipe, diffcore, evalmod, losses, netblocks, trainer

__version__ = "0.1.0"

__all__ = ["datapipe", "diffcore", "evalmod", "losses", "netblocks", "trainer", "__version__"]
