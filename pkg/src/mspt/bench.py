"""Cost-model validation: analytic FLOPs, peak memory, wall-clock sweeps.

Sweeps time the patch-attention forward pass alone (no tape) one
configuration at a time, so the allocator high-water mark describes a single
run. Timings on CPU validate scaling trends, never absolute figures; every
report carries that caveat in its header.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import balltree as bt
from . import numerics as nm
from . import pmsa
from .errors import ConfigError

CSV_CAVEAT = (
    "# CPU timings validate scaling trends only; absolute numbers are "
    "hardware-specific."
)
CSV_COLUMNS = (
    "n", "k", "l", "q", "f", "heads", "threads",
    "flops_analytic", "bytes_peak", "ms_median", "status",
)


@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple
    k_values: tuple
    q_values: tuple = (1,)
    f_values: tuple = (64,)
    head_values: tuple = (4,)
    repetitions: int = 3
    warmup: int = 2
    precision: str = "f32"
    mem_cap_bytes: int | None = None

    def __post_init__(self):
        for name in ("n_values", "k_values", "q_values", "f_values", "head_values"):
            vals = tuple(int(v) for v in getattr(self, name))
            if not vals or any(v < 1 for v in vals):
                raise ConfigError(f"{name} must be a nonempty list of positive ints")
            object.__setattr__(self, name, vals)
        if self.repetitions < 3:
            raise ConfigError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.precision not in nm.DTYPES:
            raise ConfigError(
                f"precision must be one of {sorted(nm.DTYPES)}, got {self.precision!r}"
            )

    def configurations(self):
        for n, k, q, f, heads in product(
            self.n_values, self.k_values, self.q_values, self.f_values, self.head_values
        ):
            if k <= n and f % heads == 0:
                yield n, k, q, f, heads


def thread_count():
    """Threads available to numerical kernels, as recorded in reports."""
    env = os.environ.get("OMP_NUM_THREADS")
    if env:
        return int(env)
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _estimate_bytes(n_padded, k, l, q, f, heads, itemsize):
    # Dominant live tensors of one forward pass: input, three projections
    # over local plus pooled rows, one logits chunk, and the output.
    sq = k * q
    rows = n_padded + sq
    chunk = max(1, min(k, pmsa._CHUNK_TARGET // max(1, heads * l * (l + sq))))
    logits = chunk * heads * l * (l + sq)
    return itemsize * (2 * n_padded * f + 4 * rows * f + 2 * logits)


def measure_configuration(n, k, q, f, heads, spec, rng):
    """Time and meter one forward configuration; returns a CSV row dict."""
    l = -(-n // k)
    n_padded = k * l
    dtype = nm.resolve_dtype(spec.precision)
    flops = pmsa.flop_count(n_padded, k, l, q, f, heads)
    row = {
        "n": n, "k": k, "l": l, "q": q, "f": f, "heads": heads,
        "threads": thread_count(),
        "flops_analytic": flops,
        "bytes_peak": "", "ms_median": "", "status": "ok",
    }
    if spec.mem_cap_bytes is not None:
        estimate = _estimate_bytes(n_padded, k, l, q, f, heads, np.dtype(dtype).itemsize)
        if estimate > spec.mem_cap_bytes:
            row["status"] = "skipped"
            return row

    layout = bt.grid_passthrough_layout(n, k)
    cfg = pmsa.PmsaConfig(n_heads=heads, q_per_patch=q, pooling="mean")
    h = nm.Tensor(rng.normal(size=(n_padded, f)), dtype=spec.precision)
    params = {
        name: nm.Tensor(rng.normal(0, 0.1, size=(f, f)), dtype=spec.precision)
        for name in ("w_q", "w_k", "w_v", "w_o")
    }

    with nm.AllocationTracker() as tracker:
        out = pmsa.pmsa_forward(h, layout, cfg, params)
        del out
    row["bytes_peak"] = tracker.peak

    times = []
    for i in range(spec.warmup + spec.repetitions):
        t0 = time.perf_counter()
        pmsa.pmsa_forward(h, layout, cfg, params)
        elapsed = time.perf_counter() - t0
        if i >= spec.warmup:
            times.append(elapsed)
    row["ms_median"] = statistics.median(times) * 1e3
    return row


def run_sweep(spec, csv_path, seed=0):
    """Run every configuration in the spec, appending rows to the CSV.

    The caveat comment and column header are written only when the file does
    not already hold data, keeping the log append-only.
    """
    rng = np.random.default_rng(seed)
    rows = [
        measure_configuration(n, k, q, f, heads, spec, rng)
        for n, k, q, f, heads in spec.configurations()
    ]
    fresh = not (os.path.exists(csv_path) and os.path.getsize(csv_path) > 0)
    with open(csv_path, "a", newline="") as fh:
        if fresh:
            fh.write(CSV_CAVEAT + "\n")
            fh.write(",".join(CSV_COLUMNS) + "\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        for row in rows:
            writer.writerow(row)
    return rows


def read_sweep(csv_path):
    """Parse a sweep CSV back into row dicts, skipping comment lines."""
    rows = []
    with open(csv_path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        rows.append(row)
    return rows


def tradeoff_table(n, k_values, q=1, f=64, n_heads=4):
    """Analytic cost versus patch count at fixed N.

    Each row pads N up to K*L exactly as the forward pass would. The local
    term shrinks with K while the pooled-token term grows, so the column has
    an interior minimum over a wide K range.
    """
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    rows = []
    for k in k_values:
        k = int(k)
        if not 1 <= k <= n:
            raise ConfigError(f"k={k} outside [1, {n}]")
        l = -(-n // k)
        rows.append(
            {
                "k": k,
                "l": l,
                "n_padded": k * l,
                "flops_analytic": pmsa.flop_count(k * l, k, l, q, f, n_heads),
            }
        )
    return rows
