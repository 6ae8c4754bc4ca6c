"""Parsing and encoding of absorbed fixed-effect terms.

An absorb expression is a whitespace-separated list of terms:

    A           fixed intercept per level of A
    A#B         fixed intercept per observed (A, B) combination
    A#c.v       fixed slope on continuous v per level of A
    name=A      as A, but the recovered effect is saved under ``name``

At most one ``c.`` component is allowed per term, and every term needs at
least one categorical component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import SpecificationError


@dataclass(frozen=True)
class AbsorbTerm:
    """One absorbed term: intercepts, or slopes when ``slope_var`` is set."""

    factors: tuple[str, ...]
    slope_var: Optional[str] = None
    save_as: Optional[str] = None

    @property
    def is_slope(self) -> bool:
        return self.slope_var is not None

    @property
    def label(self) -> str:
        parts = list(self.factors)
        if self.slope_var is not None:
            parts.append(f"c.{self.slope_var}")
        return "#".join(parts)


@dataclass
class AbsorbSpec:
    """Ordered absorbed terms; category counts are filled in after encoding."""

    terms: list[AbsorbTerm] = field(default_factory=list)

    @property
    def n_intercept_terms(self) -> int:
        return sum(not t.is_slope for t in self.terms)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    def __len__(self) -> int:
        return len(self.terms)


def parse_absorb(text: str, known_columns: Optional[Iterable[str]] = None) -> AbsorbSpec:
    """Parse an absorb expression into an :class:`AbsorbSpec`.

    ``known_columns``, when given, turns references to unknown columns into
    errors at parse time instead of at encoding time.
    """
    terms: list[AbsorbTerm] = []
    known = set(known_columns) if known_columns is not None else None
    for raw in (text or "").split():
        save_as = None
        body = raw
        if "=" in raw:
            save_as, _, body = raw.partition("=")
            if not save_as or not body:
                raise SpecificationError(f"malformed absorb term {raw!r}")
            if not save_as.isidentifier():
                raise SpecificationError(f"invalid save name {save_as!r} in {raw!r}")
        factors: list[str] = []
        slope_var = None
        for part in body.split("#"):
            if not part:
                raise SpecificationError(f"malformed absorb term {raw!r}")
            if part.startswith("c."):
                name = part[2:]
                if not name:
                    raise SpecificationError(f"malformed absorb term {raw!r}")
                if slope_var is not None:
                    raise SpecificationError(
                        f"more than one c. variable in absorb term {raw!r}"
                    )
                slope_var = name
            else:
                factors.append(part)
        if not factors:
            raise SpecificationError(
                f"absorb term {raw!r} has no categorical component"
            )
        if known is not None:
            for name in factors + ([slope_var] if slope_var else []):
                if name not in known:
                    raise SpecificationError(f"unknown column {name!r} in absorb term")
        terms.append(AbsorbTerm(tuple(factors), slope_var, save_as))
    return AbsorbSpec(terms)


def encode_labels(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Dictionary-encode a label vector to dense codes 0..G-1."""
    _, codes = np.unique(values, return_inverse=True)
    codes = codes.astype(np.int64)
    n_groups = int(codes.max()) + 1 if codes.size else 0
    return codes, n_groups


def encode_term(
    term: AbsorbTerm, columns: Mapping[str, np.ndarray]
) -> tuple[np.ndarray, int]:
    """Encode a term's observed factor combinations to dense codes.

    Multi-factor terms encode the cross-product of observed level
    combinations only; the result is re-densified to 0..G-1.
    """
    codes = None
    for name in term.factors:
        if name not in columns:
            raise SpecificationError(f"unknown column {name!r} in absorb term")
        col_codes, g = encode_labels(np.asarray(columns[name]))
        if codes is None:
            codes = col_codes
        else:
            codes = codes * g + col_codes
            codes, _ = encode_labels(codes)
    assert codes is not None
    codes, n_groups = encode_labels(codes)
    return codes, n_groups


@dataclass
class EncodedTerm:
    """A term bound to data: dense group codes and, for slopes, the values."""

    term: AbsorbTerm
    codes: np.ndarray
    n_groups: int
    slope: Optional[np.ndarray] = None

    @property
    def is_slope(self) -> bool:
        return self.term.is_slope

    @property
    def label(self) -> str:
        return self.term.label

    def take(self, keep: np.ndarray) -> "EncodedTerm":
        """Restrict to kept rows, re-densifying group codes."""
        codes, n_groups = encode_labels(self.codes[keep])
        slope = self.slope[keep] if self.slope is not None else None
        return EncodedTerm(self.term, codes, n_groups, slope)


def bind_terms(
    spec: AbsorbSpec, columns: Mapping[str, np.ndarray]
) -> list[EncodedTerm]:
    """Encode every term of ``spec`` against the given columns."""
    encoded = []
    for term in spec.terms:
        codes, n_groups = encode_term(term, columns)
        slope = None
        if term.slope_var is not None:
            if term.slope_var not in columns:
                raise SpecificationError(
                    f"unknown column {term.slope_var!r} in absorb term"
                )
            slope = np.asarray(columns[term.slope_var], dtype=np.float64)
        encoded.append(EncodedTerm(term, codes, n_groups, slope))
    return encoded
