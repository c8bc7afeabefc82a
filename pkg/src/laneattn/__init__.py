"""Lane-attention trajectory prediction on numpy."""

from . import dataset, diffcore, mapgeom, metrics, network, synthetic, training

__all__ = ["dataset", "diffcore", "mapgeom", "metrics", "network", "synthetic", "training"]
__version__ = "0.1.0"
