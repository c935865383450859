"""Exact FLOP accounting for instrumented kernels.

Counting convention:
  * a matrix product of shapes (a x b) @ (b x c) contributes a*b*c
    multiply-adds (1 MAC = 2 FLOPs);
  * each softmax entry contributes one exponential, reported separately;
  * "select" records log scan work of top-k index selection and
    contributes neither MACs nor exponentials.

Counts are the mathematical cost of the declared operation.  Kernels may
pad or batch internally for speed; they still record the exact shapes the
math requires.  Traces are plain caller-owned lists, never global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field


_KNOWN_KINDS = ("matmul", "softmax", "select")


@dataclass(frozen=True)
class OpRecord:
    """One primitive operation: `count` repetitions of kind with dims.

    dims is (a, b, c) for matmul, (n,) for softmax and select.
    """

    kind: str
    dims: tuple
    count: int = 1
    tag: str = ""


@dataclass(frozen=True)
class FlopCount:
    """Aggregated cost; total = 2 * multiply_adds + exponentials."""

    multiply_adds: int
    exponentials: int

    def __post_init__(self):
        if self.multiply_adds < 0 or self.exponentials < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return 2 * self.multiply_adds + self.exponentials

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(
            self.multiply_adds + other.multiply_adds,
            self.exponentials + other.exponentials,
        )


ZERO_FLOPS = FlopCount(0, 0)


class FlopTrace:
    """Append-only record buffer owned by the caller."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def add(self, kind: str, dims, count: int = 1, tag: str = ""):
        self.records.append(OpRecord(kind, tuple(int(x) for x in dims), int(count), tag))

    def extend(self, other: "FlopTrace"):
        self.records.extend(other.records)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def flop_ledger(trace, tag: str | None = None) -> FlopCount:
    """Tally a trace into a FlopCount; optionally restrict to one tag.

    Raises ValueError naming any record kind the convention does not cover.
    """
    macs = 0
    exps = 0
    for rec in trace:
        if rec.kind not in _KNOWN_KINDS:
            raise ValueError(f"unknown primitive in trace: {rec.kind!r}")
        if tag is not None and rec.tag != tag:
            continue
        if rec.kind == "matmul":
            a, b, c = rec.dims
            macs += rec.count * a * b * c
        elif rec.kind == "softmax":
            (n,) = rec.dims
            exps += rec.count * n
        # "select" is bookkeeping only
    return FlopCount(macs, exps)
