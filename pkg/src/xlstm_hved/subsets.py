"""Modality availability masks.

Bits are ordered (FLAIR, T1, T1c, T2) and written most-significant first, so
the mask string ``"1011"`` means FLAIR, T1c and T2 are present.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation

MODALITIES = ("FLAIR", "T1", "T1c", "T2")
SHORT_NAMES = ("fl", "t1", "t1c", "t2")
_ALIASES = {"fl": 0, "flair": 0, "t1": 1, "t1c": 2, "t1ce": 2, "t1gd": 2, "t1-gd": 2, "t2": 3}


@dataclass(frozen=True, order=True)
class ModalitySubset:
    bits: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.bits) != 4:
            raise ContractViolation(f"subset needs 4 bits, got {len(self.bits)}")
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_mask(cls, mask: str) -> "ModalitySubset":
        mask = mask.strip()
        if len(mask) != 4 or set(mask) - {"0", "1"}:
            raise ContractViolation(f"subset mask must be 4 binary digits, got {mask!r}")
        return cls(tuple(c == "1" for c in mask))

    @classmethod
    def from_names(cls, names: str) -> "ModalitySubset":
        bits = [False] * 4
        for raw in names.split(","):
            key = raw.strip().lower()
            if not key:
                continue
            if key not in _ALIASES:
                raise ContractViolation(f"unknown modality name {raw!r}")
            bits[_ALIASES[key]] = True
        return cls(tuple(bits))

    @classmethod
    def parse(cls, text: str) -> "ModalitySubset":
        """Accept either a 4-bit mask (``1011``) or names (``fl,t1c,t2``)."""
        text = text.strip()
        if len(text) == 4 and set(text) <= {"0", "1"}:
            return cls.from_mask(text)
        return cls.from_names(text)

    @classmethod
    def from_int(cls, value: int) -> "ModalitySubset":
        if not 0 <= value < 16:
            raise ContractViolation(f"subset integer out of range: {value}")
        return cls(tuple(bool(value >> (3 - i) & 1) for i in range(4)))

    @classmethod
    def full(cls) -> "ModalitySubset":
        return cls((True, True, True, True))

    def to_int(self) -> int:
        return sum(1 << (3 - i) for i, b in enumerate(self.bits) if b)

    @property
    def mask(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(SHORT_NAMES[i] for i in self.indices)

    @property
    def count(self) -> int:
        return sum(self.bits)

    def is_empty(self) -> bool:
        return not any(self.bits)

    def require_nonempty(self) -> "ModalitySubset":
        if self.is_empty():
            raise ContractViolation("modality subset 0000 is empty; at least one modality is required")
        return self

    def channel_mask(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)

    def __str__(self) -> str:
        return self.mask


def all_subsets() -> list[ModalitySubset]:
    """The 15 non-empty subsets in ascending mask order (0001 ... 1111)."""
    return [ModalitySubset.from_int(v) for v in range(1, 16)]
