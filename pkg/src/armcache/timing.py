"""Timing sources and hit/miss threshold calibration.

A timer turns the simulator's true cycle counts into the ticks an
unprivileged process would read.  Four sources are modelled: the cycle
register (root only on ARM), the perf_event_open syscall, the POSIX
monotonic clock and a dedicated counter thread.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIMER_KINDS = ("cycle_register", "perf_syscall", "posix_clock", "counter_thread")


class CalibrationFailed(Exception):
    pass


@dataclass(frozen=True)
class TimerModel:
    kind: str
    scale: float = 1.0
    granularity: int = 1
    overhead: float = 0.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in TIMER_KINDS:
            raise ValueError(f"unknown timer kind {self.kind!r}")
        if self.scale <= 0 or self.granularity < 1:
            raise ValueError("scale must be positive and granularity at least 1")

    def observe(self, true_cycles, rng: np.random.Generator | None = None):
        """Ticks read for an event lasting ``true_cycles``.

        Works element-wise on arrays.  The jitter is exponential with mean
        ``self.jitter`` scaled units; with jitter 0 no generator is needed.
        """
        x = np.asarray(true_cycles, dtype=np.float64)
        if np.any(x < 0):
            raise ValueError("negative cycle count")
        t = self.scale * x + self.overhead
        if self.jitter > 0:
            if rng is None:
                raise ValueError("a generator is required for a jittery timer")
            t = t + rng.exponential(self.jitter, size=x.shape)
        g = self.granularity
        ticks = np.floor(t / g).astype(np.int64) * g
        if np.ndim(true_cycles) == 0:
            return int(ticks)
        return ticks


# preset values are model parameters, not measurements
PRESETS = {
    "register": TimerModel("cycle_register"),
    "syscall": TimerModel("perf_syscall", overhead=16.0, jitter=2.0),
    "clock": TimerModel("posix_clock", granularity=24, overhead=40.0, jitter=4.0),
    "counterthread": TimerModel("counter_thread", scale=0.05, overhead=0.5, jitter=0.3),
}


def timer(name: str) -> TimerModel:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown timer preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class Threshold:
    value: float
    error_rate: float = 0.0

    def classify(self, ticks) -> bool | np.ndarray:
        """True for a hit."""
        return np.asarray(ticks) < self.value if np.ndim(ticks) else bool(ticks < self.value)


def classify(threshold: Threshold, ticks) -> str:
    return "hit" if ticks < threshold.value else "miss"


def calibrate(hit_samples, miss_samples, max_error: float = 0.25) -> Threshold:
    """Threshold minimising total misclassification of two labelled samples.

    Candidates are the midpoints between consecutive distinct sample values
    (plus one beyond each end).  Ties go to the larger threshold.
    """
    hits = np.sort(np.asarray(hit_samples, dtype=np.float64))
    misses = np.sort(np.asarray(miss_samples, dtype=np.float64))
    if hits.size == 0 or misses.size == 0:
        raise ValueError("both sample sets must be non-empty")
    values = np.unique(np.concatenate([hits, misses]))
    cands = np.concatenate([[values[0] - 1], (values[:-1] + values[1:]) / 2, [values[-1] + 1]])
    # hit iff ticks < threshold
    hit_wrong = hits.size - np.searchsorted(hits, cands, side="left")
    miss_wrong = np.searchsorted(misses, cands, side="left")
    errors = hit_wrong + miss_wrong
    best = errors.min()
    idx = np.flatnonzero(errors == best)[-1]
    rate = best / (hits.size + misses.size)
    if rate > max_error:
        raise CalibrationFailed(f"best threshold still misclassifies {rate:.1%} of samples")
    return Threshold(float(cands[idx]), float(rate))


@dataclass
class Histogram:
    bin_width: float
    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def of(cls, samples, bin_width: float, lo: float | None = None, hi: float | None = None) -> "Histogram":
        s = np.asarray(samples, dtype=np.float64)
        lo = np.floor(s.min() / bin_width) * bin_width if lo is None else lo
        hi = s.max() + bin_width if hi is None else hi
        edges = np.arange(lo, hi + bin_width, bin_width)
        counts, edges = np.histogram(s, bins=edges)
        return cls(bin_width, edges, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mode(self) -> float:
        i = int(np.argmax(self.counts))
        return float(self.edges[i] + self.bin_width / 2)
