"""Wall-clock forward-pass latency of configured sub-networks on this host.

The timed region covers exactly one forward pass: shape application, batch
construction, and warmup happen outside it. Median and median absolute
deviation are reported instead of the mean so scheduler spikes don't skew
records. By default the encoder (embeddings + elastic layers) is timed and
the masked-LM projection is excluded: deployed sub-networks swap that
pre-training head for small task heads, and at desk scale the vocab
projection would otherwise drown the shape signal.

Timing assumes exclusive, single-threaded use of the process; concurrent
load voids the record. On hosts with drifting background load,
``build_latency_dataset`` can interleave measurement rounds across shapes so
the drift affects every shape equally.
"""

import json
import platform
import time
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError
from .supernet import count_params
from .training import sample_random, shape_str
from .surrogate import SurrogateSample

DEFAULT_WARMUP = 5
DEFAULT_REPS = 30


def host_device_label():
    return f"{platform.machine()} {platform.system()} python{platform.python_version()}"


@dataclass
class LatencyRecord:
    shape: tuple
    params: int
    median_ms: float
    mad_ms: float
    reps: int
    warmup: int
    batch_size: int
    seq_len: int
    device: str
    resolution_warning: bool = False

    def to_doc(self):
        doc = asdict(self)
        doc["shape"] = shape_str(self.shape)
        return doc


def _make_batch(model, batch_size, seq_len):
    vocab = model.config.vocab_size
    return (np.arange(batch_size * seq_len, dtype=np.int64) % vocab).reshape(
        batch_size, seq_len
    )


def _record_from_times(model, shape, times_ms, warmup, batch_size, seq_len,
                       clock_resolution, device):
    median = float(np.median(times_ms))
    mad = float(np.median(np.abs(np.asarray(times_ms) - median)))
    warning = bool(
        clock_resolution is not None
        and median > 0
        and clock_resolution * 1e3 > 0.01 * median
    )
    return LatencyRecord(
        shape=tuple(shape),
        params=count_params(model.config, shape),
        median_ms=median,
        mad_ms=mad,
        reps=len(times_ms),
        warmup=warmup,
        batch_size=batch_size,
        seq_len=seq_len,
        device=device or host_device_label(),
        resolution_warning=warning,
    )


def measure_latency(model, shape, batch_size=1, seq_len=64,
                    warmup=DEFAULT_WARMUP, reps=DEFAULT_REPS,
                    clock=None, clock_resolution=None, device=None,
                    include_head=False):
    """Median/MAD forward latency in ms for one configured sub-network.

    ``clock`` may be injected for tests; it must be monotonic and return
    seconds. A resolution warning is attached when the clock cannot resolve
    1% of the median.
    """
    if warmup < 1:
        raise ConfigError("warmup must be >= 1")
    if reps < 3:
        raise ConfigError("reps must be >= 3")
    if clock is None:
        clock = time.perf_counter
        clock_resolution = time.get_clock_info("perf_counter").resolution
    model.apply_shape(shape)
    forward = model.forward if include_head else model.hidden_states
    ids = _make_batch(model, batch_size, seq_len)
    for _ in range(warmup):
        forward(ids)
    times_ms = np.empty(reps)
    for i in range(reps):
        t0 = clock()
        forward(ids)
        times_ms[i] = (clock() - t0) * 1e3
    return _record_from_times(
        model, shape, times_ms, warmup, batch_size, seq_len,
        clock_resolution, device,
    )


@dataclass
class BenchParams:
    batch_size: int = 1
    seq_len: int = 64
    warmup: int = DEFAULT_WARMUP
    reps: int = DEFAULT_REPS
    rounds: int = 1
    include_head: bool = False


def build_latency_dataset(model, design_space, n, bench, rng, device=None):
    """Measure n uniform-random shapes; failed rows are skipped and counted.

    With ``bench.rounds > 1`` the repetitions are interleaved round-robin
    across shapes (one warmup forward per shape per round), so slow drift in
    host load biases every shape equally instead of the tail of the sweep.
    Returns (samples in the surrogate dataset format, records, skipped).
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if bench.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    shapes = [sample_random(design_space, rng) for _ in range(n)]
    if bench.rounds == 1:
        records = []
        failed = 0
        for shape in shapes:
            try:
                records.append(measure_latency(
                    model, shape, batch_size=bench.batch_size,
                    seq_len=bench.seq_len, warmup=bench.warmup,
                    reps=bench.reps, device=device,
                    include_head=bench.include_head,
                ))
            except Exception:
                failed += 1
    else:
        records, failed = _interleaved_records(
            model, shapes, bench, device
        )
    samples = [
        SurrogateSample(dims=r.shape, params=r.params, target=r.median_ms)
        for r in records
    ]
    return samples, records, failed


def _interleaved_records(model, shapes, bench, device):
    if bench.reps < 3:
        raise ConfigError("reps must be >= 3")
    per_round = max(1, bench.reps // bench.rounds)
    forward = model.forward if bench.include_head else model.hidden_states
    ids = _make_batch(model, bench.batch_size, bench.seq_len)
    resolution = time.get_clock_info("perf_counter").resolution
    times = {i: [] for i in range(len(shapes))}
    dead = set()
    for _ in range(bench.rounds):
        for i, shape in enumerate(shapes):
            if i in dead:
                continue
            try:
                model.apply_shape(shape)
                forward(ids)
                for _ in range(per_round):
                    t0 = time.perf_counter()
                    forward(ids)
                    times[i].append((time.perf_counter() - t0) * 1e3)
            except Exception:
                dead.add(i)
    records = []
    for i, shape in enumerate(shapes):
        if i in dead or len(times[i]) < 3:
            dead.add(i)
            continue
        records.append(_record_from_times(
            model, shape, times[i], bench.rounds, bench.batch_size,
            bench.seq_len, resolution, device,
        ))
    return records, len(dead)


def sidecar_doc(bench, device=None, skipped=0):
    return {
        "format_version": 1,
        "device": device or host_device_label(),
        "batch_size": bench.batch_size,
        "seq_len": bench.seq_len,
        "warmup": bench.warmup,
        "reps": bench.reps,
        "rounds": bench.rounds,
        "include_head": bench.include_head,
        "skipped": skipped,
        "clock": {
            "name": "perf_counter",
            "resolution_s": time.get_clock_info("perf_counter").resolution,
        },
    }


def write_sidecar(path, bench, device=None, skipped=0):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(sidecar_doc(bench, device=device, skipped=skipped), f,
                  sort_keys=True, indent=2)
