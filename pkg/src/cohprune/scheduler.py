"""Progressive block-adaptive pruning schedule.

Every ``interval`` iterations the block whose next ``delta_k`` prune
candidates have the largest summed coherence receives another ``delta_k``
tokens, subject to a per-block cap. At inference the per-block counts are
used unchanged for the first ``phase_boundary`` steps and scaled by
``late_decay`` afterwards.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .lattice import TokenLattice

INELIGIBLE = -math.inf


@dataclass(frozen=True)
class PruneSchedule:
    blocks: int
    token_count: int
    base_counts: tuple[int, ...] = ()
    cap_ratio: float = 0.6
    delta_k: int = 64
    interval: int = 15
    phase_boundary: int = 15
    late_decay: float = 0.25
    total_steps: int = 20

    def __post_init__(self):
        counts = tuple(int(k) for k in self.base_counts) or (0,) * self.blocks
        object.__setattr__(self, "base_counts", counts)
        if self.blocks < 1 or len(counts) != self.blocks:
            raise ValueError(f"need {self.blocks} base counts, got {len(counts)}")
        if not 0.0 <= self.cap_ratio <= 1.0:
            raise ValueError(f"cap_ratio must lie in [0, 1], got {self.cap_ratio}")
        if self.delta_k < 1 or self.interval < 1:
            raise ValueError("delta_k and interval must be positive")
        if not 0.0 < self.late_decay < 1.0:
            raise ValueError(f"late_decay must lie in (0, 1), got {self.late_decay}")
        if not 0 <= self.phase_boundary <= self.total_steps or self.total_steps < 1:
            raise ValueError(
                f"need 0 <= phase_boundary ({self.phase_boundary}) <= total_steps ({self.total_steps})"
            )
        cap = self.cap
        for l, k in enumerate(counts):
            if not 0 <= k <= cap:
                raise ValueError(f"block {l}: K={k} outside [0, cap={cap}]")

    @property
    def cap(self) -> int:
        """Largest per-block count allowed by ``cap_ratio``."""
        return int(math.floor(self.cap_ratio * self.token_count + 1e-9))

    @property
    def total(self) -> int:
        return sum(self.base_counts)

    def ratios(self) -> list[float]:
        return [k / self.token_count for k in self.base_counts]

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "token_count": self.token_count,
            "base_counts": list(self.base_counts),
            "cap_ratio": self.cap_ratio,
            "delta_k": self.delta_k,
            "interval": self.interval,
            "phase_boundary": self.phase_boundary,
            "late_decay": self.late_decay,
            "total_steps": self.total_steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "PruneSchedule":
        return cls(**{**obj, "base_counts": tuple(obj.get("base_counts", ()))})

    @classmethod
    def from_json(cls, text: str) -> "PruneSchedule":
        return cls.from_dict(json.loads(text))

    @classmethod
    def uniform(cls, blocks: int, token_count: int, K: int, **kwargs) -> "PruneSchedule":
        kwargs.setdefault("cap_ratio", 1.0)
        return cls(blocks, token_count, (K,) * blocks, **kwargs)


@dataclass
class TraceEntry:
    iteration: int
    chosen: int
    delta_r: list[float]
    k: list[int]

    def to_dict(self) -> dict:
        # -inf is not valid JSON; ineligible blocks serialise as null
        return {
            "iter": self.iteration,
            "chosen": self.chosen,
            "delta_r": [None if math.isinf(v) else v for v in self.delta_r],
            "k": list(self.k),
        }


@dataclass
class ScheduleTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    saturated: bool = False
    schedule: PruneSchedule | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.entries)

    @staticmethod
    def parse_jsonl(text: str) -> list[dict]:
        return [json.loads(line) for line in text.splitlines() if line.strip()]


def block_redundancy(sorted_scores, K_current: int, delta_k: int) -> float:
    """Summed coherence of candidates ranked ``K+1 .. K+delta_k`` (1-indexed).

    Returns ``-inf`` when fewer than ``K + delta_k`` candidates exist.
    """
    s = np.asarray(sorted_scores, dtype=np.float64)
    if K_current + delta_k > s.size:
        return INELIGIBLE
    return float(s[K_current : K_current + delta_k].sum())


def schedule_step(
    schedule: PruneSchedule, per_block_sorted_scores: Sequence
) -> tuple[PruneSchedule, int | None, list[float]]:
    """Give ``delta_k`` more tokens to the most redundant eligible block.

    A block is eligible while ``K + delta_k`` stays within both the cap and
    its candidate count, so every accepted update adds exactly ``delta_k``.
    Returns ``(schedule, chosen, delta_r)``; ``chosen`` is ``None`` once every
    block is saturated, in which case the schedule is returned unchanged.
    """
    if len(per_block_sorted_scores) != schedule.blocks:
        raise ValueError(f"got scores for {len(per_block_sorted_scores)} blocks, expected {schedule.blocks}")
    dk, cap = schedule.delta_k, schedule.cap
    delta_r = []
    for k, scores in zip(schedule.base_counts, per_block_sorted_scores):
        delta_r.append(INELIGIBLE if k + dk > cap else block_redundancy(scores, k, dk))
    best = max(range(schedule.blocks), key=lambda l: (delta_r[l], -l))
    if delta_r[best] == INELIGIBLE:
        return schedule, None, delta_r
    counts = list(schedule.base_counts)
    counts[best] = min(counts[best] + dk, cap)
    return replace(schedule, base_counts=tuple(counts)), best, delta_r


def effective_K(schedule: PruneSchedule, block: int, step: int) -> int:
    """Tokens skipped in ``block`` at denoising step ``step`` (1-indexed)."""
    if not 1 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [1, {schedule.total_steps}]")
    k = schedule.base_counts[block]
    if step <= schedule.phase_boundary:
        return k
    # round() is round-half-to-even
    return min(int(round(schedule.late_decay * k)), k)


def sorted_candidates(scores: np.ndarray, protected=()) -> np.ndarray:
    """Coherence of unprotected tokens, descending."""
    mask = np.ones(scores.size, dtype=bool)
    mask[np.asarray(protected, dtype=np.int64)] = False
    return np.sort(scores[mask])[::-1]


def _block_scores(stack, draw) -> list[np.ndarray]:
    """Per-block descending candidate scores for one lattice or minibatch."""
    from .attention import stack_forward
    from .coherence import coherence_fast
    from .lattice import partition

    items = list(draw) if isinstance(draw, Minibatch) else [draw]
    per_block: list[list[np.ndarray]] = [[] for _ in stack.blocks]
    for item in items:
        if isinstance(item, TokenLattice):
            record: list = []
            stack_forward(item, stack.blocks, stack.schedule, 1, record=record)
            inputs = [r[0] for r in record]
            cohs = [r[2] for r in record]
        else:
            inputs = list(item)
            if len(inputs) != len(stack.blocks):
                raise ValueError(f"got {len(inputs)} per-block lattices for {len(stack.blocks)} blocks")
            cohs = [coherence_fast(x, partition(x, cfg.grid_width)) for x, (_, cfg) in zip(inputs, stack.blocks)]
        for l, (x, coh) in enumerate(zip(inputs, cohs)):
            cfg = stack.blocks[l][1]
            per_block[l].append(sorted_candidates(coh.scores, cfg.protected(x.height, x.width)))
    # minibatch: average the rank-wise scores
    return [np.mean(np.stack(v), axis=0) for v in per_block]


@dataclass
class StackSpec:
    """Blocks the schedule is learned for, with the schedule currently in force."""

    blocks: list
    schedule: PruneSchedule | None = None


class Minibatch(list):
    """Several draws whose rank-wise candidate scores are averaged."""


def run_progressive(
    stack_cfg,
    data_source: Iterable,
    schedule: PruneSchedule,
    total_iterations: int,
    *,
    target_total: int | None = None,
    callback=None,
) -> ScheduleTrace:
    """Simulate progressive pruning without weight updates.

    ``data_source`` yields one item per iteration: a :class:`TokenLattice`
    (pushed through the stack under the current schedule), a sequence of
    per-block lattices, or a list of either forming a minibatch. Items are
    only scored at update iterations ``T, 2T, ...``. The loop stops early
    when every block saturates or ``target_total`` skipped tokens are reached.
    """
    if isinstance(stack_cfg, StackSpec):
        stack = stack_cfg
    else:
        stack = StackSpec(list(stack_cfg))
    if len(stack.blocks) != schedule.blocks:
        raise ValueError(f"schedule has {schedule.blocks} blocks, stack has {len(stack.blocks)}")
    trace = ScheduleTrace(schedule=schedule)
    it = iter(data_source)
    for iteration in range(1, total_iterations + 1):
        draw = next(it)
        if iteration % schedule.interval:
            continue
        if target_total is not None and schedule.total >= target_total:
            break
        stack.schedule = schedule
        scores = _block_scores(stack, draw)
        schedule, chosen, delta_r = schedule_step(schedule, scores)
        if chosen is None:
            trace.saturated = True
            break
        entry = TraceEntry(iteration, chosen, delta_r, list(schedule.base_counts))
        trace.entries.append(entry)
        if callback is not None:
            callback(entry, schedule)
    trace.schedule = schedule
    return trace
