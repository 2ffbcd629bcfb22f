"""Aggregation of bottom-level series into summary series."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DataError


@dataclass(frozen=True)
class Hierarchy:
    """A 0/1 aggregation matrix ``A`` of shape ``(n_upper, n_bottom)``.

    Row ``r`` sums the bottom series that belong to summary ``r``. Groups may
    overlap.
    """

    A: np.ndarray
    bottom_labels: tuple[str, ...]
    upper_labels: tuple[str, ...]

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2:
            raise ContractViolation(f"aggregation matrix must be 2-D, got shape {A.shape}")
        m, n = A.shape
        if m > n:
            raise ContractViolation(f"{m} summaries for {n} bottom series (need M <= N)")
        if not np.all((A == 0) | (A == 1)):
            raise ContractViolation("aggregation matrix entries must be 0 or 1")
        if np.any(A.sum(axis=1) == 0):
            raise ContractViolation("every summary must aggregate at least one bottom series")
        if len(self.bottom_labels) != n or len(self.upper_labels) != m:
            raise ContractViolation("label counts do not match the aggregation matrix")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "bottom_labels", tuple(self.bottom_labels))
        object.__setattr__(self, "upper_labels", tuple(self.upper_labels))

    @property
    def n_bottom(self) -> int:
        return self.A.shape[1]

    @property
    def n_upper(self) -> int:
        return self.A.shape[0]

    def groups(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.A]

    def __eq__(self, other):
        return (
            isinstance(other, Hierarchy)
            and np.array_equal(self.A, other.A)
            and self.bottom_labels == other.bottom_labels
            and self.upper_labels == other.upper_labels
        )

    __hash__ = None


def from_groups(
    groups: Sequence[Iterable[int]],
    n_bottom: int,
    bottom_labels: Sequence[str] | None = None,
    upper_labels: Sequence[str] | None = None,
) -> Hierarchy:
    A = np.zeros((len(groups), n_bottom))
    for r, g in enumerate(groups):
        g = list(g)
        if not g:
            raise ContractViolation(f"group {r} is empty")
        for i in g:
            if not 0 <= i < n_bottom:
                raise ContractViolation(f"group {r} index {i} out of range for {n_bottom} series")
            A[r, i] = 1.0
    if bottom_labels is None:
        bottom_labels = [f"x{i + 1}" for i in range(n_bottom)]
    if upper_labels is None:
        upper_labels = ["u"] if len(groups) == 1 else [f"u{r + 1}" for r in range(len(groups))]
    return Hierarchy(A, tuple(bottom_labels), tuple(upper_labels))


def apply(h: Hierarchy, x) -> np.ndarray:
    """``A @ x``; ``x`` may also be ``(n_bottom, T)`` to aggregate whole series."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != h.n_bottom:
        raise ContractViolation(f"expected {h.n_bottom} bottom values, got {x.shape[0]}")
    return h.A @ x


def parse_hierarchy(text: str) -> Hierarchy:
    """Parse ``upper: bottom,bottom,...`` lines.

    ``#`` starts a comment, labels are whitespace-trimmed, and blank lines are
    skipped. Bottom series are ordered by first appearance.
    """
    uppers: list[str] = []
    members: list[list[str]] = []
    bottom: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"hierarchy line {lineno}: expected 'upper: bottom,...'")
        up, rest = line.split(":", 1)
        up = up.strip()
        if not up:
            raise DataError(f"hierarchy line {lineno}: empty upper label")
        if up in uppers:
            raise DataError(f"hierarchy line {lineno}: duplicate upper label {up!r}")
        labels = [s.strip() for s in rest.split(",")]
        if not labels or any(not s for s in labels):
            raise DataError(f"hierarchy line {lineno}: empty bottom label")
        if len(set(labels)) != len(labels):
            raise DataError(f"hierarchy line {lineno}: repeated bottom label")
        uppers.append(up)
        members.append(labels)
        for s in labels:
            if s not in bottom:
                bottom.append(s)
    if not uppers:
        raise DataError("hierarchy file defines no summaries")
    index = {s: i for i, s in enumerate(bottom)}
    try:
        return from_groups([[index[s] for s in m] for m in members], len(bottom), bottom, uppers)
    except ContractViolation as exc:
        raise DataError(f"invalid hierarchy: {exc}") from exc


def load_hierarchy(path) -> Hierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"))


def format_hierarchy(h: Hierarchy) -> str:
    lines = [
        f"{up}: {','.join(h.bottom_labels[i] for i in g)}"
        for up, g in zip(h.upper_labels, h.groups())
    ]
    return "\n".join(lines) + "\n"
