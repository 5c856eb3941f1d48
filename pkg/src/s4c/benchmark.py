"""Speedup, accepted-length and memory-efficiency measurements.

The harness runs plain autoregressive decoding and draft-then-verify
decoding on identical prompts, seeds and token budgets, and reports per-task
speedups, mean accepted tokens, accepted-length histograms and the
efficiency ratio ``r = speedup / extra memory (GB)``. Desk-scale timings
depend entirely on the host; they are not comparable to GPU figures.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import sys
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ArgumentError, MeasurementError
from .stats import GenStats
from .verify import RESIDUAL, autoregressive_generate, generate

GB = 1e9


def measure_speedup(baseline_ns: float, s4c_ns: float) -> float:
    if not (baseline_ns > 0 and s4c_ns > 0):
        raise MeasurementError("durations must be positive")
    return baseline_ns / s4c_ns


def mean_accepted(stats: GenStats) -> float:
    return stats.mean_accepted


def efficiency_ratio(accel: float, extra_memory_gb: float) -> float:
    if not extra_memory_gb > 0:
        raise ArgumentError("extra memory must be positive")
    return accel / extra_memory_gb


def format_ratio(r: float, places: int = 4) -> str:
    """Render ``r`` truncated (not rounded) to ``places`` decimals."""
    return str(Decimal(repr(float(r))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_DOWN))


@dataclass
class TaskSpec:
    name: str
    prompts: list[str]
    max_new: int
    corpus_path: str | None = None


@dataclass
class Suite:
    tasks: list[TaskSpec]
    temperatures: list[float] = field(default_factory=lambda: [0.0])
    seeds: list[int] = field(default_factory=lambda: [0])


def load_suite(path) -> Suite:
    """Read a suite JSON; relative corpus/prompt paths resolve against its directory.

    A missing file raises ``FileNotFoundError`` naming the path.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"suite file not found: {path}")
    raw = json.loads(path.read_text())
    tasks = []
    for t in raw.get("tasks", []):
        corpus = path.parent / t["corpus_path"] if t.get("corpus_path") else None
        if corpus is not None and not corpus.is_file():
            raise FileNotFoundError(f"corpus file not found: {corpus}")
        prompts = t.get("prompts", [])
        if isinstance(prompts, str):
            ppath = path.parent / prompts
            if not ppath.is_file():
                raise FileNotFoundError(f"prompt file not found: {ppath}")
            prompts = json.loads(ppath.read_text())
        tasks.append(TaskSpec(t["name"], list(prompts), int(t.get("max_new", 64)),
                              None if corpus is None else str(corpus)))
    return Suite(tasks, [float(x) for x in raw.get("temperatures", [0.0])],
                 [int(x) for x in raw.get("seeds", [0])])


@dataclass
class BenchRow:
    task: str
    temperature: float
    speedup: float | None
    mean_accepted: float
    baseline_ns: int | None
    s4c_ns: int | None
    rounds: int
    tokens: int
    accepted_lengths: dict[int, int]
    mean_accepted_per_seed: list[float]

    def to_dict(self) -> dict:
        d = {"task": self.task, "temperature": self.temperature, "mean_accepted": self.mean_accepted,
             "rounds": self.rounds, "tokens": self.tokens,
             "accepted_lengths": {str(k): v for k, v in sorted(self.accepted_lengths.items())},
             "mean_accepted_per_seed": self.mean_accepted_per_seed}
        if self.speedup is not None:
            d.update(speedup=self.speedup, baseline_ns=self.baseline_ns, s4c_ns=self.s4c_ns)
        return d


@dataclass
class BenchReport:
    rows: list[BenchRow]
    overall_speedup: float | None
    mean_accepted: float | None
    extra_memory_bytes: int
    efficiency_r: float | None
    config: dict
    environment: dict

    def to_dict(self) -> dict:
        d = {"rows": [r.to_dict() for r in self.rows], "mean_accepted": self.mean_accepted,
             "extra_memory_gb": self.extra_memory_bytes / GB, "extra_memory_bytes": self.extra_memory_bytes,
             "config": self.config, "environment": self.environment}
        if self.overall_speedup is not None:
            d.update(overall_speedup=self.overall_speedup, efficiency_r=self.efficiency_r)
        return d


def environment_echo() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "numba": _kernels.USE_NUMBA,
            "machine": platform.machine(), "cpus": os.cpu_count() or 1,
            "note": "speedups are specific to this host and toy model size"}


def _encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def _run_all(fn, prompts, seed) -> tuple[list[list[int]], GenStats]:
    outs, total = [], GenStats()
    for i, p in enumerate(prompts):
        out, st = fn(p, seed * 1_000_003 + i)
        outs.append(out)
        total = total.merge(st)
    return outs, total


def _timed(fn, prompts, seed, reps: int) -> tuple[list[list[int]], GenStats, int]:
    """Warm-up run discarded, then the median total wall time of ``reps`` runs."""
    outs, stats = _run_all(fn, prompts, seed)
    times = []
    for _ in range(reps):
        again, st = _run_all(fn, prompts, seed)
        if again != outs:
            raise MeasurementError("repeated run produced different tokens")
        times.append(st.wall_time_ns)
    return outs, stats, int(statistics.median(times))


def run_benchmark(suite: Suite, target, draft, temperatures: Sequence[float] | None = None,
                  seeds: Sequence[int] | None = None, cfg=None, reps: int = 5, timing: bool = True,
                  eot: int | None = None, correction: str = RESIDUAL) -> BenchReport:
    """Baseline vs draft-then-verify on every (task, temperature).

    ``timing=False`` skips the timed repetitions and leaves every clock-derived
    field out, which makes the report a pure function of its inputs.
    """
    temps = list(suite.temperatures if temperatures is None else temperatures)
    seeds = list(suite.seeds if seeds is None else seeds)
    if not seeds:
        raise ArgumentError("need at least one seed")
    if timing and reps < 5:
        raise ArgumentError("timing needs at least 5 repetitions")
    cfg = cfg or draft.cfg
    rows: list[BenchRow] = []
    peak = 0
    base_total = s4c_total = 0
    for task in suite.tasks:
        prompts = [_encode(p) for p in task.prompts]
        for temp in temps:
            def spec_fn(p, s, temp=temp, task=task):
                return generate(target, draft, p, task.max_new, temp, cfg, s, eot=eot, correction=correction)

            def base_fn(p, s, temp=temp, task=task):
                return autoregressive_generate(target, p, task.max_new, temp, s, eot=eot)

            merged = GenStats()
            per_seed = []
            b_ns = s_ns = 0
            for seed in seeds:
                if timing:
                    s_out, s_stats, s_med = _timed(spec_fn, prompts, seed, reps)
                    b_out, _, b_med = _timed(base_fn, prompts, seed, reps)
                    b_ns += b_med
                    s_ns += s_med
                else:
                    s_out, s_stats = _run_all(spec_fn, prompts, seed)
                    b_out = _run_all(base_fn, prompts, seed)[0] if temp == 0 else None
                if temp == 0 and b_out != s_out:
                    raise MeasurementError(f"greedy outputs differ on task {task.name!r}")
                per_seed.append(s_stats.mean_accepted if s_stats.rounds else 0.0)
                merged = merged.merge(s_stats)
            peak = max(peak, merged.peak_extra_bytes)
            base_total += b_ns
            s4c_total += s_ns
            rows.append(BenchRow(task.name, temp, measure_speedup(b_ns, s_ns) if timing else None,
                                 merged.mean_accepted if merged.rounds else 0.0,
                                 b_ns if timing else None, s_ns if timing else None,
                                 merged.rounds, merged.tokens_emitted, dict(merged.accepted_lengths),
                                 per_seed))
    rounds = sum(r.rounds for r in rows)
    overall = measure_speedup(base_total, s4c_total) if timing and rows else None
    config = {"draft": cfg.to_dict(), "temperatures": temps, "seeds": seeds, "reps": reps if timing else 0,
              "tasks": [{"name": t.name, "prompts": len(t.prompts), "max_new": t.max_new} for t in suite.tasks],
              "correction": correction, "timing": timing}
    return BenchReport(rows, overall, (sum(r.tokens for r in rows) / rounds) if rounds else None, peak,
                       efficiency_ratio(overall, peak / GB) if overall is not None and peak > 0 else None,
                       config, environment_echo() if timing else {})


def temperature_sweep(suite: Suite, target, draft, temperatures=(0.0, 0.5, 1.0), seeds=(0, 1, 2, 3, 4),
                      cfg=None) -> dict[float, float]:
    """Median over seeds of mean accepted tokens at each temperature, all tasks pooled."""
    out = {}
    for temp in temperatures:
        per_seed = []
        for seed in seeds:
            rep = run_benchmark(suite, target, draft, [temp], [seed], cfg, timing=False)
            per_seed.append(rep.mean_accepted)
        out[float(temp)] = float(statistics.median(per_seed))
    return out


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def report_json(report: BenchReport) -> str:
    return json.dumps(_round_floats(report.to_dict()), sort_keys=True, indent=2) + "\n"


def _fmt(x, spec: str = ".2f") -> str:
    return "-" if x is None else format(x, spec)


def report_markdown(report: BenchReport, model_name: str = "S4C (toy)") -> str:
    """Per-task speedups, mean accepted tokens and overall speedup, then the efficiency table."""
    tasks = list(dict.fromkeys(r.task for r in report.rows))
    temps = list(dict.fromkeys(r.temperature for r in report.rows))
    header = ["Model", "Temperature", *tasks, "Mean Accepted Tokens", "Overall"]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for temp in temps:
        rows = {r.task: r for r in report.rows if r.temperature == temp}
        rnd = sum(r.rounds for r in rows.values())
        mean = sum(r.tokens for r in rows.values()) / rnd if rnd else None
        b = sum(r.baseline_ns or 0 for r in rows.values())
        s = sum(r.s4c_ns or 0 for r in rows.values())
        overall = b / s if s else None
        cells = [model_name, f"{temp:g}"]
        cells += [_fmt(rows[t].speedup) + ("x" if rows[t].speedup is not None else "") for t in tasks]
        cells += [_fmt(mean), _fmt(overall) + ("x" if overall is not None else "")]
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "| Model | Extra Memory (GB) | Acceleration | Efficiency r |", "|---|---|---|---|",
              f"| {model_name} | {report.extra_memory_bytes / GB:.6f} | {_fmt(report.overall_speedup)} | "
              f"{'-' if report.efficiency_r is None else format_ratio(report.efficiency_r)} |"]
    return "\n".join(lines) + "\n"


def efficiency_table(entries: Sequence[tuple[str, float, float]]) -> str:
    """Markdown efficiency table from ``(model, extra_memory_gb, acceleration)`` triples."""
    lines = ["| Model | Extra Memory (GB) | Acceleration | Efficiency r |", "|---|---|---|---|"]
    for name, mem, acc in entries:
        lines.append(f"| {name} | {mem:.2f} | {acc:.2f}x | {format_ratio(efficiency_ratio(acc, mem))} |")
    return "\n".join(lines) + "\n"


def emit_report(report: BenchReport, fmt: str = "json", path=None) -> str:
    if fmt == "json":
        text = report_json(report)
    elif fmt == "md":
        text = report_markdown(report)
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")
    return text
