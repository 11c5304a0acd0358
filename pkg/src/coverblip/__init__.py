"""Cover-tree accelerated iterative projected gradient reconstruction."""

from .covertree import AnnsResult, CoverTree, aspect_ratio, build
from .dictionary import (
    CompressedDictionary,
    Dictionary,
    ParameterGrid,
    generate_fingerprints,
    load_dictionary,
    save_dictionary,
    svd_compress,
)
from .forward_model import (
    ForwardOperator,
    MrfImage,
    SamplingPattern,
    estimate_bilipschitz,
    estimate_spectral_norm,
    make_cartesian_operator,
    make_epi_pattern,
    make_gaussian_operator,
)
from .harness import (
    Metrics,
    Phantom,
    build_phantom,
    compute_metrics,
    run_experiment,
    simulate_measurements,
)
from .projection import ConeProjection, project_cone_ann, project_cone_exact
from .solver import (
    ConvergenceCertificate,
    ParameterMaps,
    SolverConfig,
    SolverError,
    SolveTrace,
    certificate,
    solve,
    solve_compressed,
    step_shrinkage,
)

__version__ = "0.1.0"
