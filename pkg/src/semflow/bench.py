"""Forward-latency harness for the three decoder variants."""
from __future__ import annotations

import csv
import io
import platform
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .errors import ConfigError, NonFiniteError
from .net import ModelConfig, SegModel, build_model, count_params, decoder_param_count, load_checkpoint
from .tensor import Tensor

TARGETS = ("fpn_baseline", "sfnet", "sfnet_lite")
CSV_HEADER = ("target", "params", "min_ms", "median_ms", "mean_ms", "max_ms", "fps")
MIN_WARMUP, MIN_RUNS = 5, 30


@dataclass
class TimingStats:
    warmup: int
    runs: int
    min_ms: float
    median_ms: float
    mean_ms: float
    max_ms: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.median_ms


@dataclass
class BenchReport:
    config_id: str
    target: str
    input_extents: tuple
    stats: TimingStats
    params: int
    decoder_params: int
    env_note: str
    miou: Optional[float] = None


def time_forward(model: SegModel, image: Tensor, warmup: int = 10, runs: int = 50) -> TimingStats:
    """Untimed warmup forwards, then ``runs`` timed forwards on the same input."""
    if warmup < MIN_WARMUP or runs < MIN_RUNS:
        raise ConfigError(f"need warmup >= {MIN_WARMUP} and runs >= {MIN_RUNS}")
    model.eval()
    for _ in range(warmup):
        model(image)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        out = model(image)
        times.append((time.perf_counter_ns() - t0) / 1e6)
        if not np.all(np.isfinite(out.logits.data)):
            raise NonFiniteError("model produced non-finite logits during timing")
    return TimingStats(warmup, runs, min(times), statistics.median(times), statistics.fmean(times), max(times))


def environment_note(threads: Optional[int]) -> str:
    blas = ",".join(sorted({i.get("internal_api", "?") for i in threadpool_info()})) or "none"
    mode = f"threads={threads}" if threads else "threads=1 (deterministic)"
    return f"python {platform.python_version()}; numpy {np.__version__}; blas {blas}; {mode}; {platform.machine()}"


def compare_decoders(
    base: ModelConfig,
    extents: tuple = (256, 512),
    warmup: int = 10,
    runs: int = 50,
    checkpoints: Optional[dict] = None,
    threads: Optional[int] = None,
    config_id: str = "toy",
) -> list:
    """Time the bilinear FPN, 3-FAM and lite decoders on one shared encoder.

    All three models use the same seed; parameters with equal names (the whole
    encoder and PPM) therefore hold equal values. ``checkpoints`` may map a
    target to ``(checkpoint_path, miou)`` to fill the accuracy column.
    """
    h, w = extents
    image = Tensor(np.random.default_rng(0).random((1, 3, h, w), dtype=np.float32))
    reports = []
    with threadpool_limits(limits=threads or 1):
        note = environment_note(threads)
        for target in TARGETS:
            cfg = ModelConfig(**{**base.__dict__, "variant": target})
            model = build_model(cfg)
            miou = None
            if checkpoints and target in checkpoints:
                path, miou = checkpoints[target]
                load_checkpoint(path, model)
            stats = time_forward(model, image, warmup, runs)
            total, _ = count_params(model)
            reports.append(
                BenchReport(config_id, target, (1, 3, h, w), stats, total, decoder_param_count(model), note, miou)
            )
    return reports


def format_table(reports: list) -> str:
    lines = [
        f"config {reports[0].config_id}, input {'x'.join(map(str, reports[0].input_extents))}, "
        f"warmup {reports[0].stats.warmup}, runs {reports[0].stats.runs}",
        f"{'method':<14}{'params':>10}{'dec params':>12}{'median ms':>11}{'FPS':>8}{'mIoU':>8}",
    ]
    for r in reports:
        miou = f"{100 * r.miou:.1f}" if r.miou is not None else "-"
        lines.append(
            f"{r.target:<14}{r.params:>10}{r.decoder_params:>12}{r.stats.median_ms:>11.2f}{r.stats.fps:>8.2f}{miou:>8}"
        )
    lines.append(f"env: {reports[0].env_note}")
    return "\n".join(lines) + "\n"


def format_csv(reports: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        s = r.stats
        writer.writerow([r.target, r.params, f"{s.min_ms:.4f}", f"{s.median_ms:.4f}", f"{s.mean_ms:.4f}",
                         f"{s.max_ms:.4f}", f"{s.fps:.4f}"])
    return buf.getvalue()


def write_reports(reports: list, out_dir) -> tuple:
    """Write ``bench_NNNN.txt`` and ``bench_NNNN.csv`` under the next unused index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = 0
    while (out / f"bench_{index:04d}.txt").exists() or (out / f"bench_{index:04d}.csv").exists():
        index += 1
    txt, csv_path = out / f"bench_{index:04d}.txt", out / f"bench_{index:04d}.csv"
    with open(txt, "x") as fh:
        fh.write(format_table(reports))
    with open(csv_path, "x") as fh:
        fh.write(format_csv(reports))
    return txt, csv_path
