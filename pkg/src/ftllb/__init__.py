"""Fault-tolerant local load balancing on well-connected graphs.

A deterministic round-synchronous simulator plus library: spectral
certification of communication graphs, the averaging/outlier-fixing
balancing protocol under crash and omission faults, its applications
(almost-everywhere counting, consensus under both fault models), and
centralized reference processes that turn the convergence analysis into
executable trace audits.
"""
from .graph import (
    CoreBoundViolation,
    DegenerateGraph,
    Graph,
    NoConvergence,
    SpectralReport,
    WellConnectedParams,
    WellConnectedVerdict,
    check_well_connected,
    core_subgraph,
    edge_density_bound,
    gnp_probability,
    internal_edges,
    boundary_edges,
    lambda2,
    sample_gnp,
    volume,
)
from .llb import (
    InvalidRatio,
    LLBConfig,
    LLBProtocol,
    LLBRun,
    NodeOutcome,
    config_with_fallback,
    derive_config,
    fault_tolerant_llb,
    fix_outliers,
    llb_update,
    run_llb,
)
from .oracle import (
    ideal_run,
    remainder_shrinkage_check,
    sandwich_check,
    skewed_runs,
)
from .protocols import (
    ConsensusConfig,
    ConsensusResult,
    CountingResult,
    InvalidDensity,
    ae_counting,
    consensus_crash,
    consensus_omission,
    decide_threshold,
    set_graph,
    set_graph_probability,
)
from .simnet import (
    Adversary,
    BudgetExceeded,
    DeliveryDecision,
    RoundEngine,
    SimContext,
    TraceData,
    TraceError,
    crash_adversary,
    omission_adversary,
)

__version__ = "0.1.0"
