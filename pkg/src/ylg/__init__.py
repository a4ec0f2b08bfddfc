"""Two-dimensional local sparse attention: masks, grid re-indexing, information
flow graphs, reference attention and saliency-weighted inversion."""

from .attention import (
    AttentionOutput,
    AttentionWeights,
    attention_backward,
    dense_attention,
    masked_attention,
    multihead_attention,
    two_step_attention,
)
from .grid import (
    GridEnumeration,
    apply_enumeration,
    apply_esa_to_factorization,
    esa_enumeration,
    row_major,
)
from .ifg import (
    InformationFlowGraph,
    build_ifg,
    edge_stats,
    full_information,
    pair_flow,
    reachability,
    star_topology,
)
from .inversion import (
    InversionConfig,
    SaliencyMap,
    invert,
    lookahead_step,
    multihead_weighted_loss,
    project_saliency,
    saliency_from_map,
    truncated_normal,
    weighted_embedding_loss,
)
from .patterns import (
    AttentionMask,
    PatternFactorization,
    expand_nonsquare,
    head_assignment,
    make_fixed,
    make_ltr,
    make_pattern,
    make_rtl,
    make_strided,
    make_strided_full,
)

__version__ = "0.1.0"
