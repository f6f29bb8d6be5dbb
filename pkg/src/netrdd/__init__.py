"""Regression discontinuity estimation under network interference."""
from .bandwidth import BandwidthChoice, mse_optimal_h, pilot_bandwidth
from .boundary import BoundarySpec, boundary_distances, build_boundary, min_distance
from .estimators import (
    Dataset,
    EffectEstimate,
    EffectRequest,
    estimate,
    estimate_boundary_direct_subset,
    estimate_boundary_effect,
    estimate_overall_direct,
    estimate_overall_indirect,
)
from .exposure import FRACTION_TREATED, ONE_TREATED, SUM_TREATED, ExposureMapping
from .graph import (
    DependencyGraph,
    InterferenceSets,
    Network,
    dependency_graph,
    interference_from_clusters,
    interference_from_network,
)
from .kernel_fit import Kernel, local_poly_fit
from .simulate import DgpConfig, generate, run_monte_carlo, watts_strogatz

__version__ = "0.1.0"
