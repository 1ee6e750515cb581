"""``cohprune`` command-line driver.

Exit codes: 0 success, 2 usage/config error, 3 verification failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import math
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import verify as verify_suites
from .accounting import PRESETS, ModelConfig, attention_flops, model_flops, uniform_count
from .attention import AttentionWeights, BlockConfig, alternating_configs, dense_stack, relative_error, stack_forward
from .coherence import coherence_fast, coherence_oracle
from .config import ConfigError, ExperimentConfig, load_config
from .lattice import atomic_write_bytes, partition, save_lattice
from .scheduler import PruneSchedule, StackSpec, run_progressive
from .synthetic import iid_lattice, make_lattice, redundancy_lattice

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "COHPRUNE_OUTPUT_DIR"
QUALITY_NOTE = (
    "quality proxy: relative L2 error between the dense and pruned toy attention "
    "stack outputs; perceptual metrics are not computed"
)


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def build_stack(cfg: ExperimentConfig):
    st = cfg.stack
    configs = alternating_configs(st.blocks, st.grid_sizes, sub_width=st.sub_width, stride=st.stride)
    return [
        (AttentionWeights.random(cfg.lattice.dim, st.heads, seed=st.weight_seed * 10_007 + l, scale=st.weight_scale), c)
        for l, c in enumerate(configs)
    ]


def _lattice(cfg: ExperimentConfig, seed: int):
    lat = cfg.lattice
    return make_lattice(lat.structure, lat.height, lat.width, lat.dim, seed, lat.grid_width, lat.sigma)


# -- commands -----------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> int:
    out = _out(cfg) / "lattices"
    files = []
    for k in range(cfg.lattice.count):
        lat = _lattice(cfg, cfg.lattice.seed + k)
        name = f"lattice_{k:03d}.cprl"
        save_lattice(lat, out / name)
        sc = coherence_fast(lat, partition(lat, cfg.lattice.grid_width)).scores
        files.append({"file": name, "sc_mean": float(sc.mean()), "sc_min": float(sc.min()), "sc_max": float(sc.max())})
    _write_json(_out(cfg) / "gen.json", {"config": cfg.to_dict()["lattice"], "files": files})
    print(f"wrote {len(files)} lattice(s) to {out}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, fault: str | None = None, quick: bool = False) -> int:
    results = verify_suites.run_all(fault=fault, quick=quick, seed=cfg.lattice.seed)
    summary = {
        "passed": all(r.passed for r in results),
        "fault": fault,
        "suites": [r.to_dict() for r in results],
    }
    _write_json(_out(cfg) / "verify.json", summary)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.cases} cases)")
    print(json.dumps({"passed": summary["passed"], "failed": [r.name for r in results if not r.passed]}))
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def toy_model(cfg: ExperimentConfig) -> ModelConfig:
    n, d = cfg.lattice.height * cfg.lattice.width, cfg.lattice.dim
    return ModelConfig(
        blocks=cfg.stack.blocks,
        tokens=n,
        dim=d,
        heads=cfg.stack.heads,
        steps=cfg.schedule.total_steps,
        # same attention share as the default PixArt-alpha profile
        non_attention_flops_per_block=attention_flops(n, d),
        include_overhead=True,
        sub_width=cfg.stack.sub_width,
    )


def cmd_schedule(cfg: ExperimentConfig) -> int:
    sc = cfg.schedule
    if sc.target_budget is None:
        raise ConfigError("schedule.target_budget", "required for `schedule` (average skip ratio, e.g. 0.4)")
    lat_cfg = cfg.lattice
    n = lat_cfg.height * lat_cfg.width
    blocks = build_stack(cfg)
    schedule = PruneSchedule(
        blocks=cfg.stack.blocks,
        token_count=n,
        cap_ratio=sc.cap,
        delta_k=sc.delta_k,
        interval=sc.interval,
        phase_boundary=sc.total_steps - sc.late_steps,
        late_decay=sc.decay,
        total_steps=sc.total_steps,
    )
    target_total = int(round(sc.target_budget * n * cfg.stack.blocks))
    iterations = sc.iterations or sc.interval * (math.ceil(target_total / sc.delta_k) + 1)

    def draws():
        t = 0
        while True:
            t += 1
            seed = lat_cfg.seed * 1_000_003 + t
            if sc.block_redundancy is not None:
                # generated on each block's own scoring grid so rho is what the block sees
                yield [
                    redundancy_lattice(
                        lat_cfg.height, lat_cfg.width, lat_cfg.dim, cfg_l.grid_width, rho, seed * 31 + l
                    )
                    for l, (rho, (_, cfg_l)) in enumerate(zip(sc.block_redundancy, blocks))
                ]
            else:
                yield _lattice(cfg, seed)

    model = toy_model(cfg)
    eval_lattice = _lattice(cfg, lat_cfg.seed)
    dense_out = dense_stack(eval_lattice, blocks)
    curve = []

    def record(entry, current):
        rep = model_flops(model, current)
        pruned = stack_forward(eval_lattice, blocks, current, 1)
        curve.append(
            {
                "iter": entry.iteration,
                "total_k": current.total,
                "retained_ratio": 1.0 - current.total / (n * current.blocks),
                "attention_flops": rep.attention_pruned + rep.overhead,
                "end_to_end_flops": rep.end_to_end_pruned,
                "attention_reduction": rep.attention_reduction,
                "end_to_end_reduction": rep.end_to_end_reduction,
                "relative_error": relative_error(dense_out, pruned),
            }
        )

    trace = run_progressive(
        StackSpec(blocks), draws(), schedule, iterations, target_total=target_total, callback=record
    )
    out = _out(cfg)
    _write_text(out / "trace.jsonl", trace.to_jsonl())
    _write_text(out / "schedule.json", trace.schedule.to_json() + "\n")
    _write_text(out / "curve.jsonl", "".join(json.dumps(row, sort_keys=True) + "\n" for row in curve))
    buf = io.StringIO()
    if curve:
        writer = csv.DictWriter(buf, fieldnames=list(curve[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(curve)
    _write_text(out / "curve.csv", buf.getvalue())
    final = trace.schedule
    order = sorted(range(final.blocks), key=lambda l: (-final.base_counts[l], l))
    summary = {
        "updates": len(trace),
        "saturated": trace.saturated,
        "target_total": target_total,
        "final_counts": list(final.base_counts),
        "final_ratios": final.ratios(),
        "block_order_by_k": order,
        "block_redundancy": sc.block_redundancy,
        "note": QUALITY_NOTE,
    }
    _write_json(out / "schedule_summary.json", summary)
    print(f"{len(trace)} updates; final K = {list(final.base_counts)}; saturated = {trace.saturated}")
    return EXIT_OK


def cmd_flops(
    cfg: ExperimentConfig,
    schedule_path: str | None = None,
    preset: str = "pixart-alpha",
    uniform_ratio: float | None = None,
    include_overhead: bool = False,
) -> int:
    if preset == "toy":
        model = toy_model(cfg)
    elif preset in PRESETS:
        model = PRESETS[preset](steps=cfg.schedule.total_steps)
    else:
        raise ConfigError("preset", f"unknown preset {preset!r}; expected toy or one of {sorted(PRESETS)}")
    model = dataclasses.replace(model, include_overhead=include_overhead)
    if schedule_path is not None:
        schedule = PruneSchedule.from_json(Path(schedule_path).read_text())
    else:
        ratio = 0.45 if uniform_ratio is None else uniform_ratio
        schedule = PruneSchedule.uniform(
            model.blocks,
            model.tokens,
            uniform_count(model.tokens, ratio),
            phase_boundary=model.steps,
            total_steps=model.steps,
        )
    try:
        report = model_flops(model, schedule)
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from None
    out = _out(cfg)
    _write_text(out / "flops.json", report.to_json())
    _write_text(out / "flops.csv", report.to_csv())
    print(
        f"self-attention reduction {report.attention_reduction:.4f}; "
        f"end-to-end reduction {report.end_to_end_reduction:.4f}"
    )
    return EXIT_OK


def loglog_slope(sizes, times) -> float:
    x, y = np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float))
    return float(np.polyfit(x, y, 1)[0])


def _median_time(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cmd_bench(
    cfg: ExperimentConfig,
    sizes=(1024, 4096, 16384),
    block_sizes=(256, 1024, 4096),
    repeats: int = 20,
    dim: int = 256,
    grid_width: int = 8,
) -> int:
    timings = {"coherence_fast": {}, "coherence_oracle": {}, "block_dense": {}, "block_pruned": {}}
    results = {"coherence_checksum": {}, "block_relative_error": {}}
    for n in sizes:
        side = math.isqrt(n)
        lat = iid_lattice(side, n // side, dim, seed=cfg.lattice.seed)
        part = partition(lat, grid_width)
        timings["coherence_fast"][n] = _median_time(lambda: coherence_fast(lat, part), repeats)
        timings["coherence_oracle"][n] = _median_time(lambda: coherence_oracle(lat, part), repeats)
        results["coherence_checksum"][n] = float(coherence_fast(lat, part).scores.sum())
    st = cfg.stack
    weights = build_stack(cfg)[0][0]
    for n in block_sizes:
        side = math.isqrt(n)
        lat = _lattice_for_bench(cfg, side, n // side)
        grid = min(st.grid_sizes[0], side)
        sub_width = min(st.sub_width, grid)
        blocks = [(weights, BlockConfig(grid_width=grid, sub_width=sub_width, stride=min(st.stride, sub_width)))]
        sched = PruneSchedule.uniform(1, n, n // 4, total_steps=1, phase_boundary=1)
        timings["block_dense"][n] = _median_time(lambda: dense_stack(lat, blocks), max(3, repeats // 4))
        timings["block_pruned"][n] = _median_time(lambda: stack_forward(lat, blocks, sched, 1), max(3, repeats // 4))
        results["block_relative_error"][n] = relative_error(dense_stack(lat, blocks), stack_forward(lat, blocks, sched, 1))
    slope = loglog_slope(list(sizes), [timings["coherence_fast"][n] for n in sizes])
    slope_ok = 0.8 <= slope <= 1.3
    doc = {
        "repeats": repeats,
        "dim": dim,
        "grid_width": grid_width,
        "timings_s": {k: {str(n): v for n, v in d.items()} for k, d in timings.items()},
        "fast_loglog_slope": slope,
        "slope_ok": slope_ok,
        "results": {k: {str(n): v for n, v in d.items()} for k, d in results.items()},
    }
    out = _out(cfg)
    _write_json(out / "bench.json", doc)
    _write_json(out / "bench_results.json", doc["results"])
    for n in sizes:
        print(
            f"N={n}: fast {timings['coherence_fast'][n] * 1e3:.3f} ms, "
            f"oracle {timings['coherence_oracle'][n] * 1e3:.3f} ms"
        )
    print(f"coherence_fast log-log slope {slope:.3f} ({'ok' if slope_ok else 'outside [0.8, 1.3]'})")
    return EXIT_OK if slope_ok else EXIT_VERIFY


def _lattice_for_bench(cfg: ExperimentConfig, h: int, w: int):
    lat = cfg.lattice
    return make_lattice(lat.structure, h, w, lat.dim, lat.seed, min(lat.grid_width, h, w), lat.sigma)


def cmd_report(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    lines = ["# cohprune report", ""]
    doc: dict = {}
    verify_path = out / "verify.json"
    if verify_path.exists():
        v = json.loads(verify_path.read_text())
        doc["verify"] = {s["name"]: s["passed"] for s in v["suites"]}
        lines += ["## Verification", ""]
        lines += [f"- {s['name']}: {'pass' if s['passed'] else 'FAIL'} ({s['cases']} cases)" for s in v["suites"]]
        lines.append("")
    summary_path = out / "schedule_summary.json"
    if summary_path.exists():
        s = json.loads(summary_path.read_text())
        doc["schedule"] = {k: s[k] for k in ("updates", "final_counts", "saturated")}
        lines += ["## Progressive schedule", ""]
        lines.append(f"- updates: {s['updates']}, saturated: {s['saturated']}")
        lines.append(f"- final per-block skip counts: {s['final_counts']}")
        lines.append(f"- {s['note']}")
        curve_path = out / "curve.jsonl"
        if curve_path.exists():
            rows = [json.loads(x) for x in curve_path.read_text().splitlines() if x]
            if rows:
                last = rows[-1]
                lines.append(
                    f"- last update: attention reduction {last['attention_reduction']:.4f}, "
                    f"relative error {last['relative_error']:.4g}"
                )
        lines.append("")
    flops_path = out / "flops.json"
    if flops_path.exists():
        f = json.loads(flops_path.read_text())
        t = f["totals"]
        doc["flops"] = {k: t[k] for k in ("attention_reduction", "end_to_end_reduction")}
        lines += ["## FLOPs", "", f"- convention: {f['convention']}"]
        lines.append(f"- self-attention reduction: {t['attention_reduction']:.4f}")
        lines.append(f"- end-to-end reduction: {t['end_to_end_reduction']:.4f}")
        lines.append("")
    bench_path = out / "bench.json"
    if bench_path.exists():
        b = json.loads(bench_path.read_text())
        doc["bench"] = {"slope_ok": b["slope_ok"]}
        lines += ["## Benchmark (timing-dependent)", "", f"- coherence_fast log-log slope: {b['fast_loglog_slope']:.3f}", ""]
    if not doc:
        print(f"nothing to report in {out}", file=sys.stderr)
        return EXIT_IO
    _write_text(out / "report.md", "\n".join(lines))
    _write_json(out / "report.json", doc)
    print("\n".join(lines))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

_FLAGS = [
    # (flag, section, field, type)
    ("--height", "lattice", "height", int),
    ("--width", "lattice", "width", int),
    ("--dim", "lattice", "dim", int),
    ("--seed", "lattice", "seed", int),
    ("--structure", "lattice", "structure", str),
    ("--sigma", "lattice", "sigma", float),
    ("--lattice-grid", "lattice", "grid_width", int),
    ("--count", "lattice", "count", int),
    ("--blocks", "stack", "blocks", int),
    ("--heads", "stack", "heads", int),
    ("--weight-seed", "stack", "weight_seed", int),
    ("--weight-scale", "stack", "weight_scale", float),
    ("--grid-sizes", "stack", "grid_sizes", "intlist"),
    ("--sub-width", "stack", "sub_width", int),
    ("--stride", "stack", "stride", int),
    ("--delta-k", "schedule", "delta_k", int),
    ("--interval", "schedule", "interval", int),
    ("--cap", "schedule", "cap", float),
    ("--decay", "schedule", "decay", float),
    ("--total-steps", "schedule", "total_steps", int),
    ("--late-steps", "schedule", "late_steps", int),
    ("--target-budget", "schedule", "target_budget", float),
    ("--iterations", "schedule", "iterations", int),
    ("--block-redundancy", "schedule", "block_redundancy", "floatlist"),
]


def _list_of(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__}s, got {text!r}")

    return parse


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--output-dir", help=f"output directory (env {OUTPUT_ENV} also overrides)")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    for flag, _, _, kind in _FLAGS:
        conv = {"intlist": _list_of(int), "floatlist": _list_of(float)}.get(kind, kind)
        common.add_argument(flag, type=conv, default=None)

    parser = argparse.ArgumentParser(prog="cohprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write synthetic lattices")
    p = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    p.add_argument("--fault", choices=verify_suites.FAULTS, help="inject a known defect")
    p.add_argument("--quick", action="store_true", help="run 1/10 of the randomised cases")
    sub.add_parser("schedule", parents=[common], help="simulate progressive pruning")
    p = sub.add_parser("flops", parents=[common], help="FLOPs report for a schedule")
    p.add_argument("--schedule", dest="schedule_path", help="PruneSchedule JSON file")
    p.add_argument("--preset", default="pixart-alpha", help="pixart-alpha or toy")
    p.add_argument("--uniform-ratio", type=float, help="uniform skip ratio when no schedule file is given")
    p.add_argument("--include-overhead", action="store_true")
    p = sub.add_parser("bench", parents=[common], help="micro-benchmarks")
    p.add_argument("--sizes", type=_list_of(int), default=[1024, 4096, 16384])
    p.add_argument("--block-sizes", type=_list_of(int), default=[256, 1024, 4096])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--bench-dim", type=int, default=256)
    p.add_argument("--bench-grid", type=int, default=8)
    sub.add_parser("report", parents=[common], help="summarise an output directory")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for flag, section, name, _ in _FLAGS:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    if os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg.validate()


def _threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        with _threads(args.threads):
            if args.command == "gen":
                return cmd_gen(cfg)
            if args.command == "verify":
                return cmd_verify(cfg, args.fault, args.quick)
            if args.command == "schedule":
                return cmd_schedule(cfg)
            if args.command == "flops":
                return cmd_flops(cfg, args.schedule_path, args.preset, args.uniform_ratio, args.include_overhead)
            if args.command == "bench":
                return cmd_bench(cfg, args.sizes, args.block_sizes, args.repeats, args.bench_dim, args.bench_grid)
            return cmd_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
