# wemp/services/wavelets.py
"""
Haar hierarchies on the sides of coarse neighborhoods.

A side with L fine segments carries the scaling function L_edge^{-1/2} and the
wavelets psi_{j,k}, j < level, each +/- 2^{j/2} L_edge^{-1/2} on the two halves
of its dyadic interval. Every function is constant on blocks of
L / 2^level fine segments, so it is stored both by breakpoints and by its
value on every fine segment.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from wemp.exceptions import AlignmentError, MeshError
from wemp.services.grid import Edge

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HaarFunction:
    """Piecewise constant on [breakpoints[k], breakpoints[k+1]) with values[k], in arc length."""

    breakpoints: Tuple[float, ...]
    values: Tuple[float, ...]
    level: int
    shift: int

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        index = np.clip(np.searchsorted(self.breakpoints, s, side="right") - 1, 0, len(self.values) - 1)
        return np.asarray(self.values)[index]


@dataclass(frozen=True, eq=False)
class EdgeWaveletBasis:
    edge: Edge
    level: int
    length: float
    functions: Tuple[HaarFunction, ...]
    segment_values: np.ndarray  # (2^level, n_segments)

    @property
    def size(self) -> int:
        return len(self.functions)

    @property
    def n_segments(self) -> int:
        return self.segment_values.shape[1]

    def gram(self) -> np.ndarray:
        """Exact L2(edge) Gram matrix from segment sums."""
        h = self.length / self.n_segments
        return h * self.segment_values @ self.segment_values.T


def max_level(n_segments: int) -> int:
    """Largest level with 2^level dividing n_segments."""
    level = 0
    while n_segments % (2 ** (level + 1)) == 0:
        level += 1
    return level


def haar_segment_values(n_segments: int, length: float, level: int) -> np.ndarray:
    """Values of the 2^level orthonormal Haar functions on each fine segment."""
    if level < 0:
        raise AlignmentError("wavelet level must be nonnegative", max_level(n_segments), {"level": level})
    if n_segments % (2 ** level):
        raise AlignmentError(
            f"2^{level} does not divide the {n_segments} fine segments of the edge",
            max_level(n_segments),
            {"level": level, "segments": n_segments},
        )
    rows: List[np.ndarray] = [np.full(n_segments, length ** -0.5)]
    for j in range(level):
        block = n_segments // 2 ** j
        half = block // 2
        amplitude = 2 ** (j / 2) * length ** -0.5
        for k in range(2 ** j):
            row = np.zeros(n_segments)
            row[k * block:k * block + half] = amplitude
            row[k * block + half:(k + 1) * block] = -amplitude
            rows.append(row)
    return np.vstack(rows)


def _as_function(row: np.ndarray, length: float, level: int, shift: int) -> HaarFunction:
    n_segments = len(row)
    h = length / n_segments
    breaks = [0.0]
    values = [float(row[0])]
    for k in range(1, n_segments):
        if row[k] != row[k - 1]:
            breaks.append(k * h)
            values.append(float(row[k]))
    breaks.append(length)
    return HaarFunction(breakpoints=tuple(breaks), values=tuple(values), level=level, shift=shift)


def build_haar_basis(edge: Edge, level: int) -> EdgeWaveletBasis:
    """
    Orthonormal Haar hierarchy up to `level` on one neighborhood side.

    Raises:
        AlignmentError: If 2^level does not divide the number of fine segments
            on the side; the largest admissible level is attached.
    """
    rows = haar_segment_values(edge.n_segments, edge.length, level)
    functions = [_as_function(rows[0], edge.length, -1, 0)]
    index = 1
    for j in range(level):
        for k in range(2 ** j):
            functions.append(_as_function(rows[index], edge.length, j, k))
            index += 1
    rows.setflags(write=False)
    return EdgeWaveletBasis(edge=edge, level=level, length=edge.length, functions=tuple(functions), segment_values=rows)


def segment_inner_products(segment_values: np.ndarray, length: float, trace: np.ndarray) -> np.ndarray:
    """Exact integrals of a piecewise-linear trace against piecewise-constant rows."""
    trace = np.asarray(trace, dtype=float)
    n_segments = segment_values.shape[1]
    if trace.shape[0] != n_segments + 1:
        raise MeshError("trace length does not match the edge", {"expected": n_segments + 1, "got": trace.shape[0]})
    h = length / n_segments
    segment_integrals = 0.5 * h * (trace[:-1] + trace[1:])
    return segment_values @ segment_integrals


def edge_inner_products(basis: EdgeWaveletBasis, trace: np.ndarray) -> np.ndarray:
    """(v, psi_j) over the side for a trace given at its fine nodes in increasing coordinate."""
    return segment_inner_products(basis.segment_values, basis.length, trace)


def wavelet_to_fine_trace(basis: EdgeWaveletBasis, index: int) -> np.ndarray:
    """
    Nodal Dirichlet data of function `index` on the side.

    A node takes the value of the segment on its lower-coordinate side; the
    first node takes the value of the first segment.
    """
    row = basis.segment_values[index]
    return np.concatenate([row[:1], row])


def nodal_traces(basis: EdgeWaveletBasis) -> np.ndarray:
    """(2^level, n_segments + 1) nodal data of all functions."""
    rows = basis.segment_values
    return np.hstack([rows[:, :1], rows])
