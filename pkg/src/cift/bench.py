"""Fusion-activation accounting and measured peak memory for both joint networks.

Peak memory is the tracemalloc high-water mark (numpy reports its buffers
to tracemalloc) across one forward and backward pass of the full training
loss on a synthetic batch.
"""

from __future__ import annotations

import gc
import tracemalloc
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import Batch
from .model import ModelConfig, forward_loss, init_params

MB = 1 << 20


@dataclass
class AnalyticCounts:
    rnnt_elements: int  # B*T*(U+1)*(V+1+d): broadcast joint hidden + logits
    cift_elements: int  # B*U*(V+d): aligned joint hidden + logits
    logits_ratio: float  # T*(U+1)/U * (V+1)/V

    @property
    def ratio(self) -> float:
        return self.rnnt_elements / self.cift_elements


def analytic_counts(T: int, U: int, V: int, d: int, batch: int = 1) -> AnalyticCounts:
    return AnalyticCounts(
        rnnt_elements=batch * T * (U + 1) * (V + 1 + d),
        cift_elements=batch * U * (V + d),
        logits_ratio=T * (U + 1) / U * (V + 1) / V,
    )


def synthetic_batch(batch: int, T: int, U: int, V: int, feat_dim: int, seed: int = 0) -> Batch:
    """Random batch whose encoder output has exactly T frames (T0 = 4T inputs)."""
    rng = np.random.default_rng(seed)
    t0 = 4 * T
    targets = rng.integers(V, size=(batch, U))
    return Batch(ids=[f"b{i}" for i in range(batch)], features=rng.normal(size=(batch, t0, feat_dim)),
                 feature_lengths=np.full(batch, t0, dtype=np.int64), targets=targets.astype(np.int64),
                 target_lengths=np.full(batch, U, dtype=np.int64), spans=[None] * batch)


def measure_peak(mode: str, batch: int, T: int, U: int, V: int, d: int, feat_dim: int = 16,
                 seed: int = 0, config: Optional[ModelConfig] = None) -> int:
    """Peak bytes allocated during one forward + backward (parameters and inputs excluded)."""
    cfg = config or ModelConfig(vocab_size=V, feat_dim=feat_dim, d_model=d)
    params = init_params(cfg, mode, seed)
    b = synthetic_batch(batch, T, U, V, cfg.feat_dim, seed)
    gc.collect()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        out = forward_loss(params, b)
        out.total.backward()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


@dataclass
class FeasibleSearch:
    mode: str
    max_batch: int
    probes: Dict[int, int] = field(default_factory=dict)  # batch -> peak bytes


def max_feasible_batch(mode: str, cap_bytes: int, T: int, U: int, V: int, d: int, feat_dim: int = 16,
                       limit: int = 1024, seed: int = 0) -> FeasibleSearch:
    """Largest batch whose measured peak stays within ``cap_bytes``: doubling, then bisection."""
    probes: Dict[int, int] = {}

    def fits(b: int) -> bool:
        if b not in probes:
            probes[b] = measure_peak(mode, b, T, U, V, d, feat_dim, seed)
        return probes[b] <= cap_bytes

    if not fits(1):
        return FeasibleSearch(mode, 0, probes)
    lo = 1
    hi = None
    while lo < limit:
        nxt = min(lo * 2, limit)
        if fits(nxt):
            lo = nxt
        else:
            hi = nxt
            break
    if hi is None:
        return FeasibleSearch(mode, lo, probes)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return FeasibleSearch(mode, lo, probes)


@dataclass
class BenchReport:
    T: int
    U: int
    V: int
    d: int
    batch: int
    cap_mb: float
    analytic: AnalyticCounts
    peak_bytes: Dict[str, int]
    feasible: Dict[str, FeasibleSearch]

    @property
    def feasible_ratio(self) -> float:
        rn = self.feasible["rnnt"].max_batch
        ci = self.feasible["cift"].max_batch
        if rn == 0:
            return float("inf") if ci > 0 else float("nan")
        return ci / rn

    def as_dict(self) -> dict:
        return {
            "T": self.T, "U": self.U, "V": self.V, "d": self.d, "batch": self.batch, "cap_mb": self.cap_mb,
            "analytic": {**asdict(self.analytic), "ratio": self.analytic.ratio},
            "peak_bytes": dict(self.peak_bytes),
            "max_batch": {m: s.max_batch for m, s in self.feasible.items()},
            "feasible_ratio": self.feasible_ratio,
        }

    def table(self) -> List[str]:
        a = self.analytic
        return [
            f"T={self.T} U={self.U} V={self.V} d={self.d} B={self.batch} cap={self.cap_mb:g} MB",
            f"{'':24s}{'rnnt':>16s}{'cift':>16s}{'ratio':>10s}",
            f"{'fusion activations':24s}{a.rnnt_elements:16d}{a.cift_elements:16d}{a.ratio:10.1f}",
            f"{'peak MB (measured)':24s}{self.peak_bytes['rnnt'] / MB:16.1f}{self.peak_bytes['cift'] / MB:16.1f}"
            f"{self.peak_bytes['rnnt'] / max(self.peak_bytes['cift'], 1):10.1f}",
            f"{'max feasible batch':24s}{self.feasible['rnnt'].max_batch:16d}{self.feasible['cift'].max_batch:16d}"
            f"{self.feasible_ratio:10.1f}",
            f"logits-element ratio T(U+1)/U*(V+1)/V = {a.logits_ratio:.1f}",
        ]


def bench_mem(T: int = 400, U: int = 30, V: int = 500, d: int = 64, batch: int = 1, cap_mb: float = 256.0,
              feat_dim: int = 16, seed: int = 0, search: bool = True) -> BenchReport:
    cap = int(cap_mb * MB)
    peaks = {m: measure_peak(m, batch, T, U, V, d, feat_dim, seed) for m in ("rnnt", "cift")}
    feasible = {}
    if search:
        feasible = {m: max_feasible_batch(m, cap, T, U, V, d, feat_dim, seed=seed) for m in ("rnnt", "cift")}
    return BenchReport(T, U, V, d, batch, cap_mb, analytic_counts(T, U, V, d, batch), peaks, feasible)
