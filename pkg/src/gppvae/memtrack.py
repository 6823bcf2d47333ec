"""Allocation instrumentation hook used by the memory-contract checks.

While a :class:`MemoryProbe` is active, every tensor constructed by
:mod:`gppvae.tensor` and every protocol-level array registered through
:func:`record` reports its size, and ``tracemalloc`` tracks the peak of
live numpy allocations.  Outside a probe the hook costs a single global
lookup.
"""

import tracemalloc
from contextlib import contextmanager

_active = []


class MemoryProbe:
    def __init__(self):
        self.largest_bytes = 0
        self.largest_label = None
        self.largest_shape = None
        self.peak_bytes = 0
        self.step_peaks = {}

    def _see(self, arr, label):
        nbytes = arr.nbytes
        if nbytes > self.largest_bytes:
            self.largest_bytes = nbytes
            self.largest_label = label
            self.largest_shape = tuple(arr.shape)

    @contextmanager
    def step(self, name):
        """Record the tracemalloc peak (relative to entry) for one protocol step."""
        base, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        try:
            yield
        finally:
            _, peak = tracemalloc.get_traced_memory()
            self.step_peaks[name] = max(self.step_peaks.get(name, 0), peak - base)


def record(arr, label="array"):
    if _active:
        for probe in _active:
            probe._see(arr, label)
    return arr


def current():
    return _active[-1] if _active else None


@contextmanager
def probe():
    """Activate instrumentation; yields the :class:`MemoryProbe`."""
    p = MemoryProbe()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    _active.append(p)
    try:
        yield p
    finally:
        _active.remove(p)
        _, peak = tracemalloc.get_traced_memory()
        p.peak_bytes = peak - base
        if started:
            tracemalloc.stop()


@contextmanager
def step(name):
    p = current()
    if p is None:
        yield
    else:
        with p.step(name):
            yield
