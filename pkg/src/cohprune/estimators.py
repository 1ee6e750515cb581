"""scikit-learn style wrappers around the functional core.

Lattice batches are ``(n_samples, H, W, D)`` arrays; a single ``(H, W, D)``
lattice is treated as a batch of one.
"""
from __future__ import annotations

import itertools

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_block_lattices, check_lattices, check_positive_int, check_ratio
from .attention import AttentionWeights, BlockConfig, alternating_configs, block_forward_dense, block_forward_pruned
from .coherence import DEFAULT_EPSILON, coherence_fast, coherence_oracle
from .lattice import TokenLattice, partition
from .reconstruction import DEFAULT_FLOOR
from .scheduler import PruneSchedule, StackSpec, effective_K, run_progressive


class SpatialCoherence(TransformerMixin, BaseEstimator):
    """Map each lattice to its per-token coherence scores, shape ``(n, H, W)``.

    Parameters
    ----------
    grid_width : int, default=8
        Side of the square grids scores are computed over.
    epsilon : float, default=1e-12
        Tokens with a smaller L2 norm are treated as degenerate (score 1).
    method : {"fast", "oracle"}, default="fast"
        Grid-mean identity or explicit pairwise cosines.
    """

    def __init__(self, grid_width=8, epsilon=DEFAULT_EPSILON, method="fast"):
        self.grid_width = grid_width
        self.epsilon = epsilon
        self.method = method

    def fit(self, X, y=None):
        X = check_lattices(X)
        check_positive_int("grid_width", self.grid_width)
        if self.method not in ("fast", "oracle"):
            raise ValueError(f"method must be 'fast' or 'oracle', got {self.method!r}")
        self.lattice_shape_ = tuple(X.shape[1:])
        self.n_features_in_ = X.shape[-1]
        self.partition_ = partition(X.shape[1:3], self.grid_width)
        return self

    def transform(self, X):
        check_is_fitted(self, "partition_")
        X = check_lattices(X, shape=self.lattice_shape_)
        fn = coherence_fast if self.method == "fast" else coherence_oracle
        h, w = self.lattice_shape_[:2]
        out = np.empty((X.shape[0], h, w), dtype=np.float64)
        for k, arr in enumerate(X):
            out[k] = fn(TokenLattice.from_array(arr), self.partition_, self.epsilon).scores.reshape(h, w)
        return out


class CoherencePruner(TransformerMixin, BaseEstimator):
    """One attention block that skips the most coherent tokens.

    ``fit`` draws the attention weights (unless ``weights`` is given) and
    fixes the skip count; ``transform`` returns the block output lattices.

    Parameters
    ----------
    prune_ratio : float, default=0.3
        Fraction of tokens to skip; ``K = round(prune_ratio * N)``.
    heads, weight_seed, weight_scale
        Random weight initialisation (std ``weight_scale / sqrt(D)``).
    grid_width, sub_width, stride, block_index
        Scoring grid, reconstruction sub-grid, protection pattern.
    selection : {"coherence", "random", "none"}
    reconstruction : {"sc_weighted", "exact", "skip_passthrough"}
    """

    def __init__(
        self,
        prune_ratio=0.3,
        *,
        heads=2,
        weight_seed=0,
        weight_scale=1.0,
        grid_width=8,
        sub_width=3,
        stride=2,
        block_index=0,
        selection="coherence",
        reconstruction="sc_weighted",
        floor=DEFAULT_FLOOR,
        random_state=0,
        weights=None,
    ):
        self.prune_ratio = prune_ratio
        self.heads = heads
        self.weight_seed = weight_seed
        self.weight_scale = weight_scale
        self.grid_width = grid_width
        self.sub_width = sub_width
        self.stride = stride
        self.block_index = block_index
        self.selection = selection
        self.reconstruction = reconstruction
        self.floor = floor
        self.random_state = random_state
        self.weights = weights

    def fit(self, X, y=None):
        X = check_lattices(X)
        check_ratio("prune_ratio", self.prune_ratio)
        _, h, w, d = X.shape
        self.lattice_shape_ = (h, w, d)
        self.n_features_in_ = d
        if self.weights is None:
            self.weights_ = AttentionWeights.random(d, self.heads, self.weight_seed, self.weight_scale)
        else:
            if self.weights.dim != d:
                raise ValueError(f"weights are {self.weights.dim}-dimensional, lattices have D={d}")
            self.weights_ = self.weights
        self.config_ = BlockConfig(
            grid_width=self.grid_width,
            sub_width=self.sub_width,
            stride=self.stride,
            block_index=self.block_index,
            selection_mode=self.selection,
            reconstruction_mode=self.reconstruction,
            floor=self.floor,
            seed=self.random_state,
        )
        self.n_skip_ = int(round(self.prune_ratio * h * w))
        return self

    def _forward(self, X):
        check_is_fitted(self, "weights_")
        X = check_lattices(X, shape=self.lattice_shape_)
        for arr in X:
            yield block_forward_pruned(TokenLattice.from_array(arr), self.weights_, self.config_, self.n_skip_)

    def transform(self, X):
        return np.stack([out.data for out, _, _ in self._forward(X)])

    def selections(self, X):
        """Selection objects chosen for each lattice in ``X``."""
        return [sel for _, sel, _ in self._forward(X)]

    def dense_transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_lattices(X, shape=self.lattice_shape_)
        return np.stack([block_forward_dense(TokenLattice.from_array(a), self.weights_).data for a in X])

    def score(self, X, y=None):
        """Negative mean relative error against the dense block (higher is better)."""
        pruned = self.transform(X).astype(np.float64)
        dense = self.dense_transform(X).astype(np.float64)
        errs = [np.linalg.norm(d - p) / np.linalg.norm(d) for d, p in zip(dense, pruned)]
        return -float(np.mean(errs))


class ProgressivePruningScheduler(BaseEstimator):
    """Learn per-block skip counts by greedy coherence-guided increments.

    ``fit`` takes per-block inputs shaped ``(n_samples, n_blocks, H, W, D)``;
    sample ``t`` is drawn at iteration ``t`` (cycling when exhausted).

    Attributes
    ----------
    schedule_ : PruneSchedule
    trace_ : ScheduleTrace
    """

    def __init__(
        self,
        delta_k=64,
        interval=15,
        cap_ratio=0.6,
        late_decay=0.25,
        total_steps=20,
        late_steps=5,
        grid_sizes=(16, 9),
        sub_width=3,
        stride=2,
        target_ratio=None,
        max_iterations=None,
    ):
        self.delta_k = delta_k
        self.interval = interval
        self.cap_ratio = cap_ratio
        self.late_decay = late_decay
        self.total_steps = total_steps
        self.late_steps = late_steps
        self.grid_sizes = grid_sizes
        self.sub_width = sub_width
        self.stride = stride
        self.target_ratio = target_ratio
        self.max_iterations = max_iterations

    def fit(self, X, y=None):
        X = check_block_lattices(X)
        n_samples, n_blocks, h, w, d = X.shape
        n = h * w
        check_ratio("cap_ratio", self.cap_ratio)
        if not 0 <= self.late_steps <= self.total_steps:
            raise ValueError(f"late_steps={self.late_steps} must lie in [0, total_steps={self.total_steps}]")
        schedule = PruneSchedule(
            blocks=n_blocks,
            token_count=n,
            cap_ratio=self.cap_ratio,
            delta_k=check_positive_int("delta_k", self.delta_k),
            interval=check_positive_int("interval", self.interval),
            phase_boundary=self.total_steps - self.late_steps,
            late_decay=self.late_decay,
            total_steps=self.total_steps,
        )
        configs = alternating_configs(n_blocks, list(self.grid_sizes), sub_width=self.sub_width, stride=self.stride)
        stack = StackSpec([(None, cfg) for cfg in configs])
        lattices = [[TokenLattice.from_array(a) for a in sample] for sample in X]
        iterations = self.max_iterations
        if iterations is None:
            iterations = self.interval * n_blocks * (schedule.cap // self.delta_k + 1)
        target = None if self.target_ratio is None else int(round(self.target_ratio * n * n_blocks))
        self.trace_ = run_progressive(stack, itertools.cycle(lattices), schedule, iterations, target_total=target)
        self.schedule_ = self.trace_.schedule
        self.n_blocks_ = n_blocks
        self.token_count_ = n
        return self

    def effective_counts(self, step):
        """Skip count of every block at denoising step ``step``."""
        check_is_fitted(self, "schedule_")
        return np.array([effective_K(self.schedule_, l, step) for l in range(self.n_blocks_)])

    def pruning_ratios(self):
        check_is_fitted(self, "schedule_")
        return np.asarray(self.schedule_.ratios())
