"""Deterministic floating-point operation counter.

Counts multiply-add work of the two kernels that dominate a forward pass:
sparse-dense products ("message" FLOPs, 2*nnz*D per product) and dense
matmuls (2*m*k*n). Elementwise work (activations, normalization) is not
counted. The counter is a plain process-global tally; it is independent of
thread count because both kernels run single-threaded.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class FlopCounter:
    total: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, n: int) -> None:
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n

    def get(self, kind: str) -> int:
        return self.by_kind.get(kind, 0)

    def reset(self) -> None:
        self.total = 0
        self.by_kind.clear()


COUNTER = FlopCounter()


def add(kind: str, n: int) -> None:
    COUNTER.add(kind, n)


def reset() -> None:
    COUNTER.reset()


def total() -> int:
    return COUNTER.total


def message_flops() -> int:
    """FLOPs spent in sparse-dense products so far."""
    return COUNTER.get("spmm")


def matmul_flops() -> int:
    return COUNTER.get("matmul")
