"""Benchmark harness: seeded synthetic workloads, latency bucketing by
(batch, sequence length), and profiling reports in three categories:
GEMM, cache refreshing, and other.

``other`` is total minus the two instrumented categories, so the three
proportions sum to one by construction. Timings come from a monotonic
clock around instrumented regions; medians over ``reps`` repetitions are
reported after ``warmup`` discarded runs. All non-timing report fields
are deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decode import DecodeConfig
from .engine import Session
from .model import ModelConfig, ModelWeights

REPORT_SCHEMA_VERSION = 1

_DECODE_METHODS = {"beam": "beam", "diverse": "diverse_beam", "topk": "top_k",
                   "topp": "top_p", "greedy": "greedy"}


@dataclass(frozen=True)
class BenchSettings:
    engine: str = "fused"
    task: str = "translate"           # translate | generate | classify
    decode: str = "beam"              # beam | diverse | topk | topp | greedy
    batch: int = 2
    seq_len: int = 16
    beam_size: int = 4
    diversity_groups: int = 2
    diversity_penalty: float = 0.5
    topk: int = 32
    topp: float = 0.75
    max_steps: int | None = None
    seed: int = 0
    reps: int = 3
    warmup: int = 1
    parallel_sessions: int = 1
    profile: bool = False

    def decode_config(self, vocab_size: int) -> DecodeConfig:
        steps = self.max_steps if self.max_steps is not None else self.seq_len
        method = _DECODE_METHODS[self.decode]
        if self.task == "generate" and method == "beam":
            method = "top_p"
        return DecodeConfig(method=method, beam_size=self.beam_size,
                            diversity_groups=self.diversity_groups,
                            diversity_penalty=self.diversity_penalty,
                            sample_k=self.topk, sample_p=self.topp,
                            max_steps=steps, eos_token=2, seed=self.seed)


def synthetic_tokens(batch: int, seq: int, vocab: int, seed: int) -> np.ndarray:
    """Seeded random token ids; ids below 3 are reserved (pad/bos/eos)."""
    rng = np.random.default_rng(seed)
    lo = min(3, vocab - 1)
    return rng.integers(lo, vocab, size=(batch, seq), dtype=np.int64)


def _run_workload(session: Session, settings: BenchSettings, src: np.ndarray):
    cfg = settings.decode_config(session.config.vocab_size)
    if settings.task in ("translate", "generate"):
        hyps = session.generate(src, cfg)
        return [list(h[0].tokens) if h else [] for h in hyps]
    if settings.task == "classify":
        labels, _ = session.classify(src)
        return [int(x) for x in labels]
    raise ValueError(f"unknown task {settings.task!r}")


def run_bench(config: ModelConfig, weights: ModelWeights, settings: BenchSettings) -> dict:
    """Run the workload ``warmup + reps`` times on one session; report the
    median repetition."""
    if settings.batch > config.max_batch or settings.seq_len > config.max_seq_len:
        from .errors import CapacityError
        raise CapacityError(
            f"batch {settings.batch} x seq {settings.seq_len} exceeds model maxima "
            f"({config.max_batch} x {config.max_seq_len})")
    src = synthetic_tokens(settings.batch, settings.seq_len, config.vocab_size,
                           settings.seed)

    def one_session(_idx: int) -> dict:
        session = Session(config, weights, engine=settings.engine)
        runs = []
        outputs = None
        for rep in range(settings.warmup + settings.reps):
            session.counters.reset()
            session.timers.reset()
            t0 = time.perf_counter()
            out = _run_workload(session, settings, src)
            total = time.perf_counter() - t0
            if outputs is None:
                outputs = out
            elif out != outputs:
                raise AssertionError("non-deterministic outputs within a session")
            if rep >= settings.warmup:
                runs.append({
                    "total_s": total,
                    "gemm_s": session.timers.get("gemm"),
                    "cache_s": session.timers.get("cache_refresh"),
                    "counters": session.counters.snapshot(),
                })
        runs.sort(key=lambda r: r["total_s"])
        med = runs[len(runs) // 2]
        return {"median": med, "outputs": outputs, "session": session}

    if settings.parallel_sessions > 1:
        with ThreadPoolExecutor(max_workers=settings.parallel_sessions) as ex:
            results = list(ex.map(one_session, range(settings.parallel_sessions)))
        for r in results[1:]:
            if r["outputs"] != results[0]["outputs"]:
                raise AssertionError("parallel sessions disagree; arena isolation broken")
        picked = results[0]
    else:
        picked = one_session(0)

    med, outputs, session = picked["median"], picked["outputs"], picked["session"]
    total_ms = med["total_s"] * 1e3
    gemm_ms = med["gemm_s"] * 1e3
    cache_ms = med["cache_s"] * 1e3
    other_ms = max(total_ms - gemm_ms - cache_ms, 0.0)
    denom = gemm_ms + cache_ms + other_ms
    snap = med["counters"]
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "engine": settings.engine,
        "task": settings.task,
        "config": {
            "model": config.to_dict(),
            "batch": settings.batch,
            "seq_len": settings.seq_len,
            "decode": settings.decode,
            "beam_size": settings.beam_size,
            "topk": settings.topk,
            "topp": settings.topp,
            "max_steps": settings.max_steps,
            "seed": settings.seed,
            "reps": settings.reps,
            "warmup": settings.warmup,
            "parallel_sessions": settings.parallel_sessions,
        },
        "total_ms": total_ms,
        "breakdown": {
            "gemm_ms": gemm_ms,
            "cache_refresh_ms": cache_ms,
            "other_ms": other_ms,
        },
        "proportions": {
            "gemm": gemm_ms / denom if denom else 0.0,
            "cache_refresh": cache_ms / denom if denom else 0.0,
            "other": other_ms / denom if denom else 0.0,
        },
        "counters": {
            "gemm_calls": snap.gemm_calls,
            "fused_passes": snap.fused_passes,
            "naive_passes": snap.naive_passes,
            "bytes_moved_estimate": snap.bytes_moved_estimate,
        },
        "outputs": outputs,
    }
    if settings.profile:
        report["counters"]["fused_kind_counts"] = snap.fused_kind_counts
        report["counters"]["naive_kind_counts"] = snap.naive_kind_counts
    if session.plan is not None:
        rep = session.plan.report()
        report["arena"] = {k: rep[k] for k in ("arena_bytes", "no_share_bytes", "sharing_ratio")}
    return report


def run_compare(config: ModelConfig, weights: ModelWeights, settings: BenchSettings,
                buckets: list[tuple[int, int]]) -> dict:
    """Median fused-vs-naive speedup per (batch, seq_len) bucket; asserts
    output equivalence between the engines for every bucket."""
    import dataclasses as _dc
    rows = []
    for batch, seq in buckets:
        per_engine = {}
        for engine in ("fused", "naive"):
            s = _dc.replace(settings, engine=engine, batch=batch, seq_len=seq)
            per_engine[engine] = run_bench(config, weights, s)
        match = per_engine["fused"]["outputs"] == per_engine["naive"]["outputs"]
        rows.append({
            "batch": batch,
            "seq_len": seq,
            "fused_ms": per_engine["fused"]["total_ms"],
            "naive_ms": per_engine["naive"]["total_ms"],
            "speedup": per_engine["naive"]["total_ms"] / per_engine["fused"]["total_ms"],
            "outputs_match": bool(match),
            "fused_gemm_proportion": per_engine["fused"]["proportions"]["gemm"],
            "naive_gemm_proportion": per_engine["naive"]["proportions"]["gemm"],
        })
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task": settings.task,
        "decode": settings.decode,
        "seed": settings.seed,
        "buckets": rows,
    }


def render_compare_table(result: dict) -> str:
    header = f"{'bucket':>10} {'fused ms':>10} {'naive ms':>10} {'speedup':>8} " \
             f"{'match':>6} {'gemm% f':>8} {'gemm% n':>8}"
    lines = [header, "-" * len(header)]
    for r in result["buckets"]:
        bucket = "({},{})".format(r["batch"], r["seq_len"])
        lines.append(
            f"{bucket:>10} {r['fused_ms']:>10.2f} "
            f"{r['naive_ms']:>10.2f} {r['speedup']:>8.2f} "
            f"{str(r['outputs_match']):>6} {r['fused_gemm_proportion']*100:>7.1f}% "
            f"{r['naive_gemm_proportion']*100:>7.1f}%")
    return "\n".join(lines)


def dump_report(report: dict, out_path: str | None):
    text = json.dumps(report, indent=2)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
