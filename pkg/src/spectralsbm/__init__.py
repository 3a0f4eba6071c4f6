"""Spectral embeddings and collapsed MCMC for stochastic blockmodels."""

from .embed import Embedding, ase, lse, scree, svd_embed
from .graph import Graph, GraphError, degrees, laplacian, load_edgelist, write_edgelist
from .model import ClusterStats, HyperParams

__all__ = [
    "ClusterStats", "Embedding", "Graph", "GraphError", "HyperParams", "ase", "degrees",
    "laplacian", "load_edgelist", "lse", "scree", "svd_embed", "write_edgelist",
]
__version__ = "0.1.0"
