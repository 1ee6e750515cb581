"""Analytic FLOPs model for dense vs pruned self-attention.

Convention: one multiply-accumulate counts as 2 FLOPs. Headline attention
counts cover the Q/K/V/O projections and the two score/value matmuls;
softmax is reported separately and excluded from the reductions.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .scheduler import PruneSchedule, effective_K

CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; attention = 8*n*D^2 (QKVO projections) "
    "+ 4*n^2*D (scores and weighted sum); softmax counted separately and "
    "excluded from reductions"
)


def attention_flops(n: int, D: int, h: int = 1) -> int:
    """Matmul FLOPs of multi-head self-attention over ``n`` tokens.

    Independent of the head count: heads split ``D`` without changing totals.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return 8 * n * D * D + 4 * n * n * D


def softmax_flops(n: int, h: int) -> int:
    # max, subtract, exp, sum, divide per score
    return 5 * h * n * n


def overhead_flops(N: int, K: int, D: int, w_s: int) -> dict[str, int]:
    """Itemised cost of coherence scoring and reconstruction.

    Scoring: squared norms and scaling (3ND), grid sums (ND), one dot
    product per token (2ND) and one division per token (N); none of this
    depends on the grid width. Reconstruction: at most ``w_s**2`` weighted
    accumulations of a D-vector per skipped token plus weight normalisation.
    """
    nbrs = w_s * w_s
    items = {
        "normalize": 3 * N * D,
        "grid_reduce": N * D,
        "score": 2 * N * D + N,
        "reconstruct": K * (2 * nbrs * D + 2 * nbrs + D),
    }
    items["coherence"] = items["normalize"] + items["grid_reduce"] + items["score"]
    items["total"] = items["coherence"] + items["reconstruct"]
    return items


@dataclass(frozen=True)
class ModelConfig:
    blocks: int
    tokens: int
    dim: int
    heads: int
    steps: int
    non_attention_flops_per_block: int = 0
    include_overhead: bool = False
    sub_width: int = 3

    def __post_init__(self):
        for name in ("blocks", "tokens", "dim", "heads", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.non_attention_flops_per_block < 0:
            raise ValueError("non_attention_flops_per_block must be non-negative")


def pixart_alpha_profile(**overrides) -> ModelConfig:
    """28 blocks, 64x64 tokens, D=1152, 20 steps; attention is half of compute.

    The 50% share comes from pairing a 48% attention reduction with a 24%
    end-to-end reduction, so non-attention work per block equals dense
    attention work per block.
    """
    base = dict(blocks=28, tokens=4096, dim=1152, heads=16, steps=20)
    base.update(overrides)
    base.setdefault("non_attention_flops_per_block", attention_flops(base["tokens"], base["dim"]))
    return ModelConfig(**base)


PRESETS = {"pixart-alpha": pixart_alpha_profile}


@dataclass
class PhaseRow:
    block: int
    phase: str
    steps: int
    K: int
    retained: int
    attention_dense: int
    attention_pruned: int
    overhead: int
    softmax_dense: int
    softmax_pruned: int


@dataclass
class FlopsReport:
    rows: list[PhaseRow] = field(default_factory=list)
    attention_dense: int = 0
    attention_pruned: int = 0
    overhead: int = 0
    non_attention: int = 0
    softmax_dense: int = 0
    softmax_pruned: int = 0

    @property
    def end_to_end_dense(self) -> int:
        return self.attention_dense + self.non_attention

    @property
    def end_to_end_pruned(self) -> int:
        return self.attention_pruned + self.overhead + self.non_attention

    @property
    def attention_reduction(self) -> float:
        return 1.0 - self.attention_pruned / self.attention_dense

    @property
    def end_to_end_reduction(self) -> float:
        return 1.0 - self.end_to_end_pruned / self.end_to_end_dense

    def per_block(self) -> dict[int, dict[str, int]]:
        out: dict[int, dict[str, int]] = {}
        for r in self.rows:
            b = out.setdefault(r.block, {"attention_dense": 0, "attention_pruned": 0, "overhead": 0})
            b["attention_dense"] += r.attention_dense
            b["attention_pruned"] += r.attention_pruned
            b["overhead"] += r.overhead
        return out

    def to_dict(self) -> dict:
        return {
            "convention": CONVENTION,
            "totals": {
                "attention_dense": self.attention_dense,
                "attention_pruned": self.attention_pruned,
                "overhead": self.overhead,
                "non_attention": self.non_attention,
                "end_to_end_dense": self.end_to_end_dense,
                "end_to_end_pruned": self.end_to_end_pruned,
                "softmax_dense": self.softmax_dense,
                "softmax_pruned": self.softmax_pruned,
                "attention_reduction": self.attention_reduction,
                "end_to_end_reduction": self.end_to_end_reduction,
            },
            "per_block": {str(k): v for k, v in self.per_block().items()},
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CONVENTION}\n")
        names = list(PhaseRow.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow(asdict(r))
        return buf.getvalue()


def model_flops(cfg: ModelConfig, schedule: PruneSchedule) -> FlopsReport:
    """Aggregate attention FLOPs over blocks and denoising steps.

    Steps within a phase share one retained count, so each block contributes
    one row per phase weighted by that phase's step count.
    """
    if schedule.blocks != cfg.blocks:
        raise ValueError(f"schedule has {schedule.blocks} blocks, model has {cfg.blocks}")
    if schedule.token_count != cfg.tokens:
        raise ValueError(f"schedule is for {schedule.token_count} tokens, model has {cfg.tokens}")
    if schedule.total_steps != cfg.steps:
        raise ValueError(f"schedule has {schedule.total_steps} steps, model has {cfg.steps}")
    N, D = cfg.tokens, cfg.dim
    dense = attention_flops(N, D, cfg.heads)
    soft_dense = softmax_flops(N, cfg.heads)
    early = schedule.phase_boundary
    phases = [("early", early, 1), ("late", cfg.steps - early, early + 1)]
    report = FlopsReport()
    for l in range(cfg.blocks):
        for phase, steps, first in phases:
            if steps == 0:
                continue
            K = effective_K(schedule, l, first)
            n = N - K
            over = overhead_flops(N, K, D, cfg.sub_width)["total"] if cfg.include_overhead and K else 0
            row = PhaseRow(
                block=l,
                phase=phase,
                steps=steps,
                K=K,
                retained=n,
                attention_dense=steps * dense,
                attention_pruned=steps * attention_flops(n, D, cfg.heads),
                overhead=steps * over,
                softmax_dense=steps * soft_dense,
                softmax_pruned=steps * softmax_flops(n, cfg.heads),
            )
            report.rows.append(row)
            report.attention_dense += row.attention_dense
            report.attention_pruned += row.attention_pruned
            report.overhead += row.overhead
            report.softmax_dense += row.softmax_dense
            report.softmax_pruned += row.softmax_pruned
    report.non_attention = cfg.blocks * cfg.steps * cfg.non_attention_flops_per_block
    return report


def uniform_count(N: int, ratio: float) -> int:
    """Skipped tokens for a uniform ratio, keeping ``ceil((1 - ratio) * N)``."""
    return N - math.ceil(round((1.0 - ratio) * N, 9))
