"""Oracle suites run by ``cohprune verify``.

Each suite returns a :class:`SuiteResult`. ``fault`` injects a known defect
so the suites can be shown to catch it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionWeights, BlockConfig, alternating_configs, block_forward_dense, block_forward_pruned
from .coherence import CoherenceMap, coherence_fast, coherence_oracle, grid_residuals
from .lattice import new_lattice, partition, subpartition
from .scheduler import PruneSchedule, StackSpec, run_progressive
from .selection import anchor_mask, protected_mask, uncovered_subgrids
from .synthetic import redundancy_lattice

FAULTS = ("skip-normalization", "drop-anchors", "greedy-argmin")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _random_lattice(rng: np.random.Generator, hmax=32, dmax=64):
    h, w = rng.integers(4, hmax + 1, size=2)
    d = int(rng.integers(2, dmax + 1))
    return new_lattice(int(h), int(w), d, rng.standard_normal((h, w, d)))


def _unnormalized_sc(lattice, part) -> CoherenceMap:
    x = np.asarray(lattice.tokens, dtype=np.float64)
    order, offsets = part.order()
    means = np.add.reduceat(x[order], offsets, axis=0) / part.sizes()[:, None]
    return CoherenceMap(np.einsum("nd,nd->n", x, means[part.token_to_grid]), part.grid_width)


def sc_equivalence(cases: int = 1000, seed: int = 0, tol: float = 1e-5, fault: str | None = None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    fast = _unnormalized_sc if fault == "skip-normalization" else coherence_fast
    worst = 0.0
    for _ in range(cases):
        lat = _random_lattice(rng)
        w = int(rng.integers(2, min(8, lat.height, lat.width) + 1))
        part = partition(lat, w)
        diff = np.max(np.abs(fast(lat, part).scores - coherence_oracle(lat, part).scores))
        worst = max(worst, float(diff))
    return SuiteResult("sc_equivalence", worst <= tol, cases, {"max_abs_diff": worst, "tolerance": tol})


def residual_bound(pairs: int = 100_000, seed: int = 0, tol: float = 1e-6, fault: str | None = None) -> SuiteResult:
    """|cos(x_i, x_j) - SC(x_j)| <= ||x̂_i - ĝ_i|| + tol for same-grid pairs."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst = -np.inf
    done = 0
    while done < pairs:
        lat = _random_lattice(rng, hmax=16, dmax=16)
        # mixing in a shared direction spreads residuals from ~0 to ~1
        shared = rng.standard_normal(lat.dim)
        x = lat.tokens + rng.uniform(0, 3) * shared
        lat = new_lattice(lat.height, lat.width, lat.dim, x)
        part = partition(lat, int(rng.integers(2, min(8, lat.height, lat.width) + 1)))
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        eps = grid_residuals(lat, part)
        sc = coherence_fast(lat, part).scores
        batch = min(2000, pairs - done)
        i = rng.integers(0, lat.n_tokens, size=batch)
        cells = [part.members(t) for t in i]
        j = np.array([c[rng.integers(0, c.size)] for c in cells])
        cos = np.einsum("nd,nd->n", unit[i], unit[j])
        gap = np.abs(cos - sc[j]) - eps[i]
        violations += int(np.count_nonzero(gap > tol))
        worst = max(worst, float(gap.max()))
        done += batch
    return SuiteResult("residual_bound", violations == 0, pairs, {"violations": violations, "max_excess": worst})


def anchor_guarantee(fault: str | None = None, stride_only: bool = False) -> SuiteResult:
    """Every sub-grid holds a protected token, H, W in 4..32, m in 1..4, w_s in m..6, l in 0..7."""
    failures = []
    checked = 0
    for h in range(4, 33):
        for w in range(4, 33):
            for m in range(1, 5):
                for ws in range(m, 7):
                    if ws > min(h, w):
                        continue
                    sub = subpartition((h, w), ws)
                    for l in range(8):
                        if stride_only or fault == "drop-anchors":
                            prot = protected_mask(h, w, l, m)
                        else:
                            prot = anchor_mask(sub, l, m)
                        checked += 1
                        bad = uncovered_subgrids(sub, prot)
                        if bad:
                            failures.append({"H": h, "W": w, "m": m, "w_s": ws, "l": l, "subgrids": bad})
    name = "anchor_guarantee_stride_only" if stride_only else "anchor_guarantee"
    detail = {"failures": len(failures), "examples": failures[:5]}
    return SuiteResult(name, not failures, checked, detail)


def k0_equivalence(cases: int = 100, seed: int = 0, fault: str | None = None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for c in range(cases):
        h, w = (int(v) for v in rng.integers(4, 17, size=2))
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 9))
        lat = new_lattice(h, w, d, rng.standard_normal((h, w, d)))
        weights = AttentionWeights.random(d, heads, seed=int(rng.integers(1 << 31)))
        gw = int(rng.integers(3, min(h, w) + 1))
        cfg = BlockConfig(grid_width=gw, sub_width=3, stride=int(rng.integers(1, 4)), block_index=c % 4)
        dense = block_forward_dense(lat, weights)
        pruned, _, _ = block_forward_pruned(lat, weights, cfg, 0)
        if dense.data.tobytes() != pruned.data.tobytes():
            mismatches += 1
    return SuiteResult("k0_equivalence", mismatches == 0, cases, {"mismatches": mismatches})


def scheduler_greedy(seed: int = 0, fault: str | None = None) -> SuiteResult:
    """Replay a simulated schedule and re-check every recorded decision."""
    rhos = (0.9, 0.6, 0.3)
    h = w = 32
    sched = PruneSchedule(blocks=3, token_count=h * w, delta_k=16, interval=3, cap_ratio=0.4)
    stack = StackSpec([(None, cfg) for cfg in alternating_configs(3, [8, 6])])

    def draws():
        t = 0
        while True:
            t += 1
            yield [redundancy_lattice(h, w, 16, 8, r, seed=seed * 100_003 + t * 7 + l) for l, r in enumerate(rhos)]

    trace = run_progressive(stack, draws(), sched, 200)
    problems = []
    prev = [0, 0, 0]
    for e in trace.entries:
        eligible = [v for v in e.delta_r if v != -np.inf]
        chosen = e.chosen
        if fault == "greedy-argmin":
            chosen = int(np.argmin([v if v != -np.inf else np.inf for v in e.delta_r]))
        if e.delta_r[chosen] < max(eligible):
            problems.append(f"iter {e.iteration}: chose block {chosen} with non-maximal delta_r")
        if sum(e.k) - sum(prev) != sched.delta_k:
            problems.append(f"iter {e.iteration}: total grew by {sum(e.k) - sum(prev)}")
        if any(k < p for k, p in zip(e.k, prev)) or max(e.k) > sched.cap:
            problems.append(f"iter {e.iteration}: counts {e.k} not monotone or above cap")
        prev = e.k
    detail = {"updates": len(trace), "final_counts": prev, "problems": problems[:5]}
    return SuiteResult("scheduler_greedy", not problems and len(trace) > 0, len(trace), detail)


def run_all(fault: str | None = None, quick: bool = False, seed: int = 0) -> list[SuiteResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    scale = 10 if quick else 1
    return [
        sc_equivalence(1000 // scale, seed, fault=fault),
        residual_bound(100_000 // scale, seed, fault=fault),
        anchor_guarantee(fault=fault),
        k0_equivalence(100 // scale, seed, fault=fault),
        scheduler_greedy(seed, fault=fault),
    ]
