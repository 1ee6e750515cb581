import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohprune.attention import (
    AttentionWeights,
    BlockConfig,
    alternating_configs,
    attention_column_importance,
    block_forward_dense,
    block_forward_pruned,
    dense_stack,
    load_weights,
    mhsa,
    relative_error,
    save_weights,
    stack_forward,
)
from cohprune.lattice import new_lattice, partition
from cohprune.reconstruction import EmptyNeighbourhoodError
from cohprune.scheduler import PruneSchedule
from cohprune.selection import BudgetError
from cohprune.synthetic import grid_coherent_lattice, iid_lattice


def naive_mhsa(x, wts):
    n, d = x.shape
    dk = d // wts.heads
    out = np.zeros((n, d))
    for hd in range(wts.heads):
        cols = slice(hd * dk, (hd + 1) * dk)
        for i in range(n):
            q = wts.wq[cols] @ x[i]
            logits = np.array([q @ (wts.wk[cols] @ x[j]) / np.sqrt(dk) for j in range(n)])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[i, cols] = sum(p[j] * (wts.wv[cols] @ x[j]) for j in range(n))
    return out @ wts.wo.T


def test_single_token():
    w = AttentionWeights.random(6, 2, seed=1)
    x = np.random.default_rng(0).standard_normal((1, 6))
    assert np.allclose(mhsa(x, w), (w.wo @ (w.wv @ x[0]))[None])


def test_identity_two_identical_tokens():
    x = np.array([[0.5, -1.0, 2.0, 0.0]] * 2)
    assert np.allclose(mhsa(x, AttentionWeights.identity(4, 2)), x)


def test_matches_naive_loop():
    w = AttentionWeights.random(8, 4, seed=3, scale=2.0)
    x = np.random.default_rng(1).standard_normal((8, 8))
    assert np.abs(mhsa(x, w) - naive_mhsa(x, w)).max() <= 1e-5


def test_dimension_mismatch():
    w = AttentionWeights.random(4, 2)
    with pytest.raises(ValueError):
        mhsa(np.zeros((3, 5)), w)
    with pytest.raises(ValueError):
        mhsa(np.zeros((0, 4)), w)
    with pytest.raises(ValueError):
        AttentionWeights.random(6, 4)
    with pytest.raises(ValueError):
        AttentionWeights(np.eye(3), np.eye(3), np.eye(2), np.eye(3))


def test_large_logits_are_stable():
    w = AttentionWeights.identity(2)
    x = np.array([[300.0, 0.0], [0.0, 300.0]])
    assert np.isfinite(mhsa(x, w)).all()


def test_column_importance():
    w = AttentionWeights.random(4, 2, seed=0)
    assert np.allclose(attention_column_importance(np.ones((5, 4)), w), 1.0)
    assert np.allclose(attention_column_importance(np.ones((1, 4)), w), [1.0])
    x = np.random.default_rng(2).standard_normal((7, 4))
    assert abs(attention_column_importance(x, w).sum() - 7) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    w = AttentionWeights.random(8, 2, seed=seed % 97, scale=1.5)
    x = rng.standard_normal((n, 8))
    perm = rng.permutation(n)
    assert np.abs(mhsa(x[perm], w) - mhsa(x, w)[perm]).max() <= 1e-5


def test_weights_file_round_trip(tmp_path):
    w = AttentionWeights.random(6, 3, seed=4)
    manifest = save_weights(w, tmp_path / "w.cprl")
    back = load_weights(manifest)
    assert back.heads == 3
    for name in ("wq", "wk", "wv", "wo"):
        assert np.array_equal(back.__dict__[name], getattr(w, name).astype(np.float32))


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(grid_width=2, sub_width=3)
    with pytest.raises(ValueError):
        BlockConfig(grid_width=8, sub_width=2, stride=3)
    with pytest.raises(ValueError):
        BlockConfig(grid_width=8, selection_mode="learned")
    BlockConfig(grid_width=8, sub_width=2, stride=3, reconstruction_mode="skip_passthrough")


def test_dense_zero_weights_is_identity():
    lat = iid_lattice(4, 4, 4, seed=0)
    assert np.array_equal(block_forward_dense(lat, AttentionWeights.zeros(4)).data, lat.data)


@pytest.mark.parametrize("mode", ["sc_weighted", "exact", "skip_passthrough"])
def test_k0_bitwise_equals_dense(mode):
    lat = iid_lattice(9, 7, 8, seed=2)
    w = AttentionWeights.random(8, 2, seed=2)
    out, sel, _ = block_forward_pruned(lat, w, BlockConfig(grid_width=4, reconstruction_mode=mode), 0)
    assert sel.K == 0
    assert np.array_equal(out.data, block_forward_dense(lat, w).data)


def test_pruned_shape_and_finiteness():
    lat = iid_lattice(8, 8, 8, seed=1)
    w = AttentionWeights.random(8, 2, seed=1)
    out, sel, coh = block_forward_pruned(lat, w, BlockConfig(grid_width=4), 20)
    assert out.shape == lat.shape and np.isfinite(out.data).all()
    assert sel.K == 20 and len(coh) == 64


def test_skipped_tokens_are_the_coherent_ones():
    lat = grid_coherent_lattice(8, 8, 8, 4, 0.3, seed=0)
    cfg = BlockConfig(grid_width=4)
    _, sel, coh = block_forward_pruned(lat, AttentionWeights.random(8, 2), cfg, 10)
    free = np.setdiff1d(sel.retained, sel.protected)
    assert coh.scores[sel.skipped].min() >= coh.scores[free].max()


def test_uniform_lattice_exact_for_any_k():
    # every token identical: all attention outputs coincide
    lat = grid_coherent_lattice(8, 8, 8, 8, 0.0, seed=4)
    w = AttentionWeights.random(8, 2, seed=4, scale=2.0)
    dense = block_forward_dense(lat, w)
    for K in (0, 8, 20, 32):
        out, _, _ = block_forward_pruned(lat, w, BlockConfig(grid_width=8), K)
        assert relative_error(dense, out) <= 1e-4


def test_infeasible_k():
    lat = iid_lattice(4, 4, 4)
    with pytest.raises(BudgetError):
        block_forward_pruned(lat, AttentionWeights.random(4, 2), BlockConfig(grid_width=4), 9)


def test_missing_anchor_surfaces_from_reconstruction():
    lat = iid_lattice(4, 4, 4)
    cfg = BlockConfig(grid_width=4, sub_width=3, stride=2, block_index=1, fallback_anchors=False)
    with pytest.raises(EmptyNeighbourhoodError):
        block_forward_pruned(lat, AttentionWeights.random(4, 2), cfg, 8)


def test_random_selection_respects_protection_and_seed():
    lat = iid_lattice(8, 8, 4)
    cfg = BlockConfig(grid_width=4, selection_mode="random", seed=3)
    _, a, _ = block_forward_pruned(lat, AttentionWeights.random(4, 2), cfg, 16)
    _, b, _ = block_forward_pruned(lat, AttentionWeights.random(4, 2), cfg, 16)
    assert np.array_equal(a.skipped, b.skipped)
    assert set(a.skipped.tolist()).isdisjoint(a.protected.tolist())


def test_selection_none_ignores_k():
    lat = iid_lattice(4, 4, 4)
    w = AttentionWeights.random(4, 2)
    out, sel, _ = block_forward_pruned(lat, w, BlockConfig(grid_width=4, selection_mode="none"), 5)
    assert sel.K == 0 and np.array_equal(out.data, block_forward_dense(lat, w).data)


def make_stack(n, dim=8, grids=(4, 3)):
    configs = alternating_configs(n, list(grids), sub_width=3, stride=2)
    return [(AttentionWeights.random(dim, 2, seed=l), c) for l, c in enumerate(configs)]


def test_alternating_configs():
    configs = alternating_configs(4, [16, 9])
    assert [c.grid_width for c in configs] == [16, 9, 16, 9]
    assert [c.block_index for c in configs] == [0, 1, 2, 3]
    assert partition((64, 64), 16).borders() != partition((64, 64), 9).borders()


def test_one_block_stack_is_block_forward():
    lat = iid_lattice(6, 6, 8, seed=3)
    blocks = make_stack(1)
    sched = PruneSchedule.uniform(1, 36, 10, total_steps=1, phase_boundary=1)
    out, _, _ = block_forward_pruned(lat, *blocks[0], 10)
    assert np.array_equal(stack_forward(lat, blocks, sched, 1).data, out.data)


def test_zero_schedule_is_dense_stack():
    lat = iid_lattice(6, 6, 8, seed=3)
    blocks = make_stack(3)
    sched = PruneSchedule(3, 36)
    assert np.array_equal(stack_forward(lat, blocks, sched, 1).data, dense_stack(lat, blocks).data)
    assert np.array_equal(stack_forward(lat, blocks).data, dense_stack(lat, blocks).data)


def test_stack_uses_late_phase_counts():
    lat = iid_lattice(6, 6, 8, seed=3)
    blocks = make_stack(2)
    sched = PruneSchedule(2, 36, (8, 12), cap_ratio=1.0, phase_boundary=1, total_steps=2)
    record = []
    stack_forward(lat, blocks, sched, 2, record=record)
    assert [r[1].K for r in record] == [2, 3]


def test_stack_schedule_block_mismatch():
    with pytest.raises(ValueError):
        stack_forward(iid_lattice(4, 4, 8), make_stack(2), PruneSchedule(3, 16), 1)


def test_error_grows_with_k_on_average():
    w = AttentionWeights.random(8, 2, seed=0)
    cfg = BlockConfig(grid_width=4)
    errs = np.zeros(4)
    for seed in range(100):
        lat = grid_coherent_lattice(8, 8, 8, 4, 0.3, seed=seed)
        dense = block_forward_dense(lat, w)
        for k, K in enumerate((0, 8, 16, 24)):
            errs[k] += relative_error(dense, block_forward_pruned(lat, w, cfg, K)[0])
    assert (np.diff(errs) >= 0).all()


def test_coherence_beats_random_with_one_high_variance_grid():
    wins, errs = 0, np.zeros(2)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        part = partition((16, 16), 8)
        tokens = rng.standard_normal((part.n_grids, 16))[part.token_to_grid] + 0.1 * rng.standard_normal((256, 16))
        noisy = part.cells[int(rng.integers(part.n_grids))]
        tokens[noisy] = 2 * rng.standard_normal((noisy.size, 16))
        lat = new_lattice(16, 16, 16, tokens)
        w = AttentionWeights.random(16, 2, seed=seed)
        dense = block_forward_dense(lat, w)
        coh = relative_error(dense, block_forward_pruned(lat, w, BlockConfig(grid_width=8), 64)[0])
        rnd = relative_error(
            dense, block_forward_pruned(lat, w, BlockConfig(grid_width=8, selection_mode="random", seed=seed), 64)[0]
        )
        wins += coh < rnd
        errs += (coh, rnd)
    assert errs[0] < errs[1] and wins >= 90
