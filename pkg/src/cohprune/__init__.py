"""Coherence-guided token skipping for diffusion-transformer token lattices."""
from .accounting import FlopsReport, ModelConfig, attention_flops, model_flops, overhead_flops
from .attention import (
    AttentionWeights,
    BlockConfig,
    attention_column_importance,
    block_forward_dense,
    block_forward_pruned,
    mhsa,
    stack_forward,
)
from .coherence import CoherenceMap, GridMeans, coherence_fast, coherence_oracle, grid_means, normalize_tokens
from .estimators import CoherencePruner, ProgressivePruningScheduler, SpatialCoherence
from .lattice import (
    GridPartition,
    SubGridPartition,
    TokenLattice,
    load_lattice,
    new_lattice,
    partition,
    save_lattice,
    subpartition,
)
from .reconstruction import approximation_residual, passthrough_skip, reconstruct_exact, reconstruct_sc
from .scheduler import PruneSchedule, ScheduleTrace, block_redundancy, effective_K, run_progressive, schedule_step
from .selection import Selection, protected_mask, select_random, select_tokens

__version__ = "0.1.0"
