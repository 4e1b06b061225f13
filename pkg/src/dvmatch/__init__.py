"""Dense correspondence between non-rigidly deforming point clouds.

Registration couples an embedded deformation graph (farthest-point-sampled
nodes with 6D rotations and translations) with alternating correspondence
refreshes; losses combine chamfer alignment, local rigidity, correspondence
smoothness, and heat-method geodesic similarity. Per-point features blend
sinusoidal positional encodings with optional multi-view visual features
pulled back from depth projections.
"""

from .core import (
    PointCloud,
    NormalizationRecord,
    SelectionMatrix,
    chamfer,
    farthest_point_sample,
    knn,
    normalize_cloud,
    one_sided_chamfer,
)
from .deformation import (
    DeformationGraph,
    TransformSet,
    arap_energy,
    build_deformation_graph,
    deform,
    deformation_loss,
    identity_transforms,
    rotation_from_6d,
    rotations_from_6d,
)
from .geodesics import (
    GeodesicMatrix,
    PointCloudLaplacian,
    build_laplacian,
    geodesic_similarity_loss,
    heat_geodesic_matrix,
    heat_geodesics,
)
from .matching import (
    LossWeights,
    SoftCorrespondence,
    hard_match,
    pull_back,
    smoothness_loss,
    soft_correspondence,
    total_loss,
)
from .metrics import accuracy, euclidean_error, geodesic_error
from .projection import (
    ColorImage,
    DepthImage,
    FeatureBlend,
    FeatureImage,
    ProjectionRecord,
    assemble_visual_features,
    compose_input_features,
    positional_encoding,
    project_depth,
    pull_back_features,
    smooth_and_colorize,
)
from .solver import SolveReport, SolverConfig, match_pair, register

__version__ = "0.1.0"
