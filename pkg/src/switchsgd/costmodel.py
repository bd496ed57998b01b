"""Analytic throughput model for the bit-serial training engine.

Computing throughput is peak bandwidth scaled by pipeline utilization:
one mini-batch occupies (B/8) * ceil(M/(64*F*G)) * s cycles of useful
work per engine, amortizing the fixed pipeline fill (40 + 2s cycles)
and one network round trip. Memory throughput is an empirical table by
precision. An engine runs at the lower of the two; machines and engines
then multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

PEAK_GBPS = 19.2  # 512 bits/cycle at 300 MHz
DEFAULT_RTT_CYCLES = 1000

# measured effective memory bandwidth by precision, GB/s
MEM_GBPS = {1: 10.2, 2: 13.3, 3: 13.8, 4: 14.8}


@dataclass(frozen=True)
class CostParams:
    n_fpgas: int
    n_engines: int
    n_features: int
    minibatch: int
    precision: int
    rtt_cycles: int = DEFAULT_RTT_CYCLES
    peak_gbps: float = PEAK_GBPS
    mem_gbps: dict = field(default_factory=lambda: dict(MEM_GBPS))

    def __post_init__(self):
        if min(self.n_fpgas, self.n_engines, self.n_features) < 1:
            raise ValueError("machine, engine, and feature counts must be positive")
        if not 1 <= self.precision <= 8:
            raise ValueError(f"precision must be in [1,8], got {self.precision}")
        if self.minibatch < 8:
            # the work term counts (B/8) bank-parallel sample groups
            raise ValueError(f"mini-batch must be >= 8, got {self.minibatch}")
        if self.rtt_cycles < 0:
            raise ValueError("round-trip cycles must be nonnegative")

    @property
    def fill_cycles(self) -> int:
        return 40 + 2 * self.precision


def th_comp(p: CostParams) -> float:
    """Compute-side throughput of one engine in GB/s."""
    work = (p.minibatch / 8.0) * math.ceil(
        p.n_features / (64 * p.n_fpgas * p.n_engines)
    ) * p.precision
    return work / (work + p.fill_cycles + p.rtt_cycles) * p.peak_gbps


def th_mem(precision: int, table: dict | None = None) -> float:
    """Measured memory-side throughput of one engine in GB/s."""
    if precision < 1:
        raise ValueError(f"precision must be >= 1, got {precision}")
    table = MEM_GBPS if table is None else table
    return table[min(precision, 4)]


def th_engine(p: CostParams) -> float:
    return min(th_comp(p), th_mem(p.precision, p.mem_gbps))


def th_all(p: CostParams) -> float:
    return th_engine(p) * p.n_fpgas * p.n_engines
