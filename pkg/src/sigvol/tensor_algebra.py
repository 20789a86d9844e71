"""Arithmetic on the truncated tensor algebra over a finite alphabet.

Words are tuples of integer letters in ``{0, ..., d-1}``.  Elements of the
algebra are stored densely: a coefficient for every word of length at most
the cap, ordered graded-lexicographically (shorter words first, and within a
length plain lexicographic order with letter 0 smallest).  Letter 0 is the
time coordinate whenever the alphabet comes from a time-augmented path.

Shuffle products are kept as exact integer multiplicities until they are
paired with a coefficient vector, so the only floating-point work happens in
the final dot products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product as _iterprod
from typing import Dict, Tuple

import numpy as np

Word = Tuple[int, ...]

#: A formal integer combination of words, e.g. the expansion of a shuffle
#: product.  Multiplicities are positive ints.
WordSum = Dict[Word, int]


def alphabet_dim(d: int, cap: int) -> int:
    """Number of words of length <= cap on d letters (the dense vector size)."""
    if d == 1:
        return cap + 1
    return (d ** (cap + 1) - 1) // (d - 1)


@lru_cache(maxsize=None)
def get_labeling(d: int, cap: int) -> "Labeling":
    return Labeling(d, cap)


class Labeling:
    """Graded-lexicographic bijection between words and dense indices.

    The empty word gets index 0, the d single letters come next in letter
    order, and so on.  For d=2, cap=3 this enumerates the 15 basis words
    (empty), (0), (1), (0,0), (0,1), (1,0), (1,1), (0,0,0), ..., (1,1,1).
    """

    def __init__(self, d: int, cap: int):
        if d < 1 or cap < 0:
            raise ValueError(f"need d >= 1 and cap >= 0, got d={d}, cap={cap}")
        self.d = d
        self.cap = cap
        self.size = alphabet_dim(d, cap)
        # offsets[k] = index of the first word of length k
        self.level_offsets = np.array(
            [alphabet_dim(d, k - 1) if k > 0 else 0 for k in range(cap + 2)],
            dtype=np.int64,
        )
        words = [()]
        for n in range(1, cap + 1):
            words.extend(_iterprod(range(d), repeat=n))
        self.words: Tuple[Word, ...] = tuple(words)
        self._index = {w: i for i, w in enumerate(words)}

    def label(self, w: Word) -> int:
        """Dense index of a word; raises for words too long or bad letters."""
        w = tuple(w)
        if len(w) > self.cap:
            raise ValueError(f"word {w} longer than cap {self.cap}")
        if any(l < 0 or l >= self.d for l in w):
            raise ValueError(f"word {w} has letters outside 0..{self.d - 1}")
        return self._index[w]

    def unlabel(self, i: int) -> Word:
        if i < 0 or i >= self.size:
            raise ValueError(f"index {i} out of range 0..{self.size - 1}")
        return self.words[i]

    def level_slice(self, k: int) -> slice:
        """Slice of the dense vector holding all words of length k."""
        if k < 0 or k > self.cap:
            raise ValueError(f"level {k} outside 0..{self.cap}")
        return slice(int(self.level_offsets[k]), int(self.level_offsets[k + 1]))

    def to_csv(self, path) -> None:
        """Dump the word -> index table (debug aid for the CLI)."""
        with open(path, "w") as fh:
            fh.write("index,length,word\n")
            for i, w in enumerate(self.words):
                fh.write(f"{i},{len(w)},{''.join(map(str, w))}\n")


@dataclass(frozen=True)
class TruncatedTensor:
    """Dense element of the truncated tensor algebra.

    ``coeffs[labeling.label(w)]`` is the coefficient of word w.  Instances
    are immutable after construction; all operations return new tensors.
    """

    d: int
    cap: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        expected = alphabet_dim(self.d, self.cap)
        if c.shape != (expected,):
            raise ValueError(
                f"coefficient vector has shape {c.shape}, expected ({expected},)"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def labeling(self) -> Labeling:
        return get_labeling(self.d, self.cap)

    @classmethod
    def unit(cls, d: int, cap: int) -> "TruncatedTensor":
        c = np.zeros(alphabet_dim(d, cap))
        c[0] = 1.0
        return cls(d, cap, c)

    @classmethod
    def from_word(cls, w: Word, d: int, cap: int, coeff: float = 1.0) -> "TruncatedTensor":
        lab = get_labeling(d, cap)
        c = np.zeros(lab.size)
        c[lab.label(tuple(w))] = coeff
        return cls(d, cap, c)

    @classmethod
    def from_word_sum(cls, ws: WordSum, d: int, cap: int) -> "TruncatedTensor":
        lab = get_labeling(d, cap)
        c = np.zeros(lab.size)
        for w, m in ws.items():
            c[lab.label(w)] += m
        return cls(d, cap, c)

    def coeff(self, w: Word) -> float:
        return float(self.coeffs[self.labeling.label(tuple(w))])

    def level(self, k: int) -> np.ndarray:
        return self.coeffs[self.labeling.level_slice(k)]


@lru_cache(maxsize=None)
def _product_tables(d: int, cap_a: int, cap_b: int, cap_out: int):
    """Index triples (out, a, b) enumerating all splits w = u . v.

    u runs over words of length <= cap_a, v over length <= cap_b, and the
    concatenation is kept when its length is <= cap_out.
    """
    lab_a = get_labeling(d, cap_a)
    lab_b = get_labeling(d, cap_b)
    lab_o = get_labeling(d, cap_out)
    out_i, a_i, b_i = [], [], []
    for u in lab_a.words:
        for v in lab_b.words:
            if len(u) + len(v) > cap_out:
                continue
            out_i.append(lab_o.label(u + v))
            a_i.append(lab_a.label(u))
            b_i.append(lab_b.label(v))
    return (
        np.asarray(out_i, dtype=np.int64),
        np.asarray(a_i, dtype=np.int64),
        np.asarray(b_i, dtype=np.int64),
    )


def concat_product(a: TruncatedTensor, b: TruncatedTensor, cap: int | None = None) -> TruncatedTensor:
    """Truncated tensor (concatenation) product of two elements.

    The coefficient of a word w in the result is the sum of a[u] * b[v]
    over all splits w = u.v; words longer than the cap are dropped.
    """
    if a.d != b.d:
        raise ValueError(f"alphabet mismatch: {a.d} vs {b.d}")
    if cap is None:
        cap = min(a.cap, b.cap)
    out_i, a_i, b_i = _product_tables(a.d, a.cap, b.cap, cap)
    out = np.zeros(alphabet_dim(a.d, cap))
    np.add.at(out, out_i, a.coeffs[a_i] * b.coeffs[b_i])
    return TruncatedTensor(a.d, cap, out)


@lru_cache(maxsize=None)
def _shuffle_cached(I: Word, J: Word) -> Tuple[Tuple[Word, int], ...]:
    if not I:
        return ((J, 1),)
    if not J:
        return ((I, 1),)
    acc: Dict[Word, int] = {}
    for w, m in _shuffle_cached(I[:-1], J):
        w2 = w + (I[-1],)
        acc[w2] = acc.get(w2, 0) + m
    for w, m in _shuffle_cached(I, J[:-1]):
        w2 = w + (J[-1],)
        acc[w2] = acc.get(w2, 0) + m
    return tuple(sorted(acc.items()))


def shuffle_words(I: Word, J: Word) -> WordSum:
    """Shuffle product of two words as an integer word combination.

    Defined by the recursion (I' sh J) . i_n  +  (I sh J') . j_m with the
    empty word acting as identity; the total multiplicity is always
    binomial(|I| + |J|, |I|).
    """
    return dict(_shuffle_cached(tuple(I), tuple(J)))


def word_sum_append(ws: WordSum, letter: int) -> WordSum:
    """Right-concatenate a single letter onto every word of a word sum."""
    return {w + (letter,): m for w, m in ws.items()}


def pair(ell: TruncatedTensor, a: TruncatedTensor) -> float:
    """Bilinear pairing <ell, a> = sum over words of ell[w] * a[w].

    Runs over the common cap when the two tensors are truncated at
    different levels.
    """
    if ell.d != a.d:
        raise ValueError(f"alphabet mismatch: {ell.d} vs {a.d}")
    n = alphabet_dim(ell.d, min(ell.cap, a.cap))
    return float(np.dot(ell.coeffs[:n], a.coeffs[:n]))


def pair_word_sum(ws: WordSum, a: TruncatedTensor) -> float:
    """Pair an integer word combination against a tensor."""
    lab = a.labeling
    return float(sum(m * a.coeffs[lab.label(w)] for w, m in ws.items()))


def group_like_defect(a: TruncatedTensor, max_combined_degree: int) -> float:
    """Worst violation of the shuffle identity a[I]*a[J] = <I sh J, a>.

    Signatures of bounded-variation paths satisfy the identity exactly, so
    for a computed signature this measures numerical error; for an Ito-type
    lift it measures the correction term.  Word pairs are scanned with
    |I| + |J| <= max_combined_degree, which must not exceed the cap so the
    shuffles stay representable.
    """
    lab = a.labeling
    if abs(a.coeffs[0] - 1.0) > 0.0:
        raise ValueError("zeroth coefficient must be exactly 1 for a group-like test")
    if max_combined_degree > a.cap:
        raise ValueError(
            f"max_combined_degree {max_combined_degree} exceeds cap {a.cap}"
        )
    worst = 0.0
    for I in lab.words:
        if len(I) > max_combined_degree:
            continue
        for J in lab.words:
            if len(I) + len(J) > max_combined_degree:
                continue
            lhs = a.coeff(I) * a.coeff(J)
            rhs = pair_word_sum(shuffle_words(I, J), a)
            worst = max(worst, abs(lhs - rhs))
    return worst
