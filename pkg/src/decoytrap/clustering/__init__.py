"""Non-parametric clustering used to pick representative files."""
from .affinity import (
    SimilarityMatrix,
    affinity_propagation,
    net_similarity,
    similarity_matrix,
)
from .gmm import GmmModel, aic, bic, gmm_em, gmm_fit_orders, gmm_select, n_free_parameters
from .meanshift import estimate_bandwidth, mean_shift, shift_vector
from .optics import (
    ReachabilityOrdering,
    dbcv,
    dbcv_details,
    default_minpts_candidates,
    extract_clusters,
    optics,
    reachability_distance,
    select_minpts,
)
from .result import ClusterResult

__all__ = [
    "ClusterResult",
    "GmmModel",
    "ReachabilityOrdering",
    "SimilarityMatrix",
    "affinity_propagation",
    "aic",
    "bic",
    "dbcv",
    "dbcv_details",
    "default_minpts_candidates",
    "estimate_bandwidth",
    "extract_clusters",
    "gmm_em",
    "gmm_fit_orders",
    "gmm_select",
    "mean_shift",
    "n_free_parameters",
    "net_similarity",
    "optics",
    "reachability_distance",
    "select_minpts",
    "shift_vector",
    "similarity_matrix",
]
