"""Nonparametric smoothed-likelihood mixture clustering of expression profiles."""

__version__ = "0.1.0"

from .errors import NpclustError  # noqa: E402
from .evalviz import ari, viz_table  # noqa: E402
from .gaussmix import select_m  # noqa: E402
from .npmsl import BlockSpec, FitConfig, fit  # noqa: E402

__all__ = ["BlockSpec", "FitConfig", "NpclustError", "ari", "fit", "select_m", "viz_table", "__version__"]
