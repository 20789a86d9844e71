"""Truncated signatures of sampled paths.

A sampled path is interpreted as its piecewise-linear interpolant, whose
signature is exact: each segment contributes the tensor exponential of its
increment, and segments compose through the multiplicative (Chen) identity.
This is the geometric choice consistent with Stratonovich lifts, which is
what the volatility model downstream requires.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .tensor_algebra import TruncatedTensor, alphabet_dim, concat_product, get_labeling


@dataclass(frozen=True)
class SampledPath:
    """A d-dimensional path observed on a strictly increasing time grid.

    ``times`` has shape (m+1,), ``values`` shape (m+1, d); units of years.
    """

    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.shape[0]:
            raise ValueError(f"inconsistent shapes: times {t.shape}, values {v.shape}")
        if t.shape[0] < 1:
            raise ValueError("need at least one sample")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("times and values must be finite")
        t = t.copy(); t.setflags(write=False)
        v = v.copy(); v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n_segments(self) -> int:
        return self.times.shape[0] - 1


@dataclass(frozen=True)
class SignatureStream:
    """Prefix signatures of a path: sigs[k] is the signature on [t_0, t_k]."""

    grid: np.ndarray
    sigs: List[TruncatedTensor]

    def __post_init__(self):
        if len(self.sigs) != len(self.grid):
            raise ValueError("one signature per grid point required")

    def to_csv(self, path) -> None:
        """Debug dump: one row per grid point, t followed by all coefficients."""
        dim = self.sigs[0].coeffs.shape[0]
        with open(path, "w") as fh:
            fh.write("t," + ",".join(f"c{i}" for i in range(dim)) + "\n")
            for t, s in zip(self.grid, self.sigs):
                fh.write(f"{t:.17g}," + ",".join(f"{x:.17g}" for x in s.coeffs) + "\n")


def time_augment(p: SampledPath) -> SampledPath:
    """Prepend running time as coordinate 0, turning X_t into (t, X_t).

    Warns (but proceeds) if coordinate 0 already equals the grid, which
    usually means the path was augmented twice.
    """
    if p.d >= 1 and np.array_equal(p.values[:, 0], p.times):
        warnings.warn(
            "leading coordinate already equals the time grid; augmenting again",
            stacklevel=2,
        )
    vals = np.column_stack([p.times, p.values])
    return SampledPath(p.times, vals)


def segment_exp(increment: np.ndarray, cap: int) -> TruncatedTensor:
    """Tensor exponential of a level-1 element, truncated at the cap.

    Level k of the result is the k-fold tensor power of the increment
    divided by k!; equivalently the coefficient of a word is the product of
    the increment entries along its letters over the word length factorial.
    This is the exact signature of a single linear segment.
    """
    inc = np.atleast_1d(np.asarray(increment, dtype=float))
    if inc.ndim != 1:
        raise ValueError("increment must be a vector")
    if not np.all(np.isfinite(inc)):
        raise ValueError("increment must be finite")
    d = inc.shape[0]
    out = np.zeros(alphabet_dim(d, cap))
    out[0] = 1.0
    lab = get_labeling(d, cap)
    block = np.array([1.0])
    for k in range(1, cap + 1):
        # lexicographic order within a level == flattened outer product order
        block = np.outer(block, inc).ravel() / k
        out[lab.level_slice(k)] = block
    return TruncatedTensor(d, cap, out)


def signature(p: SampledPath, cap: int) -> TruncatedTensor:
    """Signature of the piecewise-linear interpolant of p, truncated at cap."""
    if p.n_segments < 1:
        raise ValueError("path needs at least one segment")
    increments = np.diff(p.values, axis=0)
    sig = segment_exp(increments[0], cap)
    for k in range(1, increments.shape[0]):
        sig = concat_product(sig, segment_exp(increments[k], cap), cap)
    return sig


def signature_stream(p: SampledPath, cap: int) -> SignatureStream:
    """All prefix signatures of p, built incrementally one segment at a time."""
    if p.n_segments < 1:
        raise ValueError("path needs at least one segment")
    increments = np.diff(p.values, axis=0)
    sigs = [TruncatedTensor.unit(p.d, cap)]
    for k in range(increments.shape[0]):
        sigs.append(concat_product(sigs[-1], segment_exp(increments[k], cap), cap))
    return SignatureStream(p.times, sigs)


def factorial_decay_profile(s: TruncatedTensor) -> np.ndarray:
    """Euclidean norm of each signature level, a numerical-health diagnostic.

    For the signature of a bounded-variation path, level k is bounded by
    the k-th power of the 1-variation over k!, so these norms should decay
    factorially; slower decay flags truncation or discretization trouble.
    """
    lab = s.labeling
    return np.array(
        [float(np.linalg.norm(s.coeffs[lab.level_slice(k)])) for k in range(s.cap + 1)]
    )


def path_one_variation(p: SampledPath) -> float:
    """1-variation of the piecewise-linear interpolant (sum of segment lengths)."""
    return float(np.sum(np.linalg.norm(np.diff(p.values, axis=0), axis=1)))
