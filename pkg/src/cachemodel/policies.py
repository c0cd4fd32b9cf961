"""Cache policy descriptors shared by the analytic and simulation engines."""
from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = ["PolicySpec", "POLICY_KINDS"]

POLICY_KINDS = ("lfu", "lru", "qlru", "fifo", "random", "klru")

_QLRU = re.compile(r"^q-?lru\(\s*([0-9.eE+-]+)\s*\)$")
_KLRU = re.compile(r"^(?:k-?lru\(\s*(\d+)\s*\)|(\d+)-?lru)(-rough)?$")


@dataclass(frozen=True)
class PolicySpec:
    """Which algorithm a cache runs, and its capacity in objects.

    ``q`` is the insertion probability of q-LRU and ``k`` the number of
    stages of k-LRU.  ``refined`` selects the exact 2-LRU chain model over
    the stage-independence recursion when ``k == 2``.
    """

    kind: str
    capacity: int
    q: float = 1.0
    k: int = 1
    refined: bool = True

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if int(self.capacity) != self.capacity or self.capacity < 1:
            raise ValueError(f"capacity must be a positive integer, got {self.capacity!r}")
        object.__setattr__(self, "capacity", int(self.capacity))
        if not 0 < self.q <= 1:
            raise ValueError(f"q must be in (0, 1], got {self.q!r}")
        if self.kind != "qlru" and self.q != 1:
            raise ValueError("q only applies to q-LRU")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        if self.kind != "klru" and self.k != 1:
            raise ValueError("k only applies to k-LRU")

    @classmethod
    def lru(cls, capacity):
        return cls("lru", capacity)

    @classmethod
    def qlru(cls, capacity, q):
        return cls("qlru", capacity, q=float(q))

    @classmethod
    def fifo(cls, capacity):
        return cls("fifo", capacity)

    @classmethod
    def random(cls, capacity):
        return cls("random", capacity)

    @classmethod
    def lfu(cls, capacity):
        return cls("lfu", capacity)

    @classmethod
    def klru(cls, capacity, k, refined=True):
        return cls("klru", capacity, k=int(k), refined=refined)

    @classmethod
    def parse(cls, text: str, capacity: int) -> "PolicySpec":
        """Build a spec from names like ``lru``, ``qlru(0.1)``, ``3lru``, ``klru(4)``."""
        s = text.strip().lower().replace("_", "-")
        if s in ("lru", "fifo", "random", "lfu"):
            return cls(s, capacity)
        m = _QLRU.match(s)
        if m:
            return cls.qlru(capacity, float(m.group(1)))
        m = _KLRU.match(s)
        if m:
            k = int(m.group(1) or m.group(2))
            return cls.klru(capacity, k, refined=m.group(3) is None)
        raise ValueError(f"cannot parse policy {text!r}")

    def with_capacity(self, capacity: int) -> "PolicySpec":
        return PolicySpec(self.kind, capacity, self.q, self.k, self.refined)

    @property
    def stages(self) -> int:
        return self.k if self.kind == "klru" else 1

    @property
    def label(self) -> str:
        if self.kind == "qlru":
            return f"qlru({self.q:g})"
        if self.kind == "klru":
            rough = "-rough" if self.k == 2 and not self.refined else ""
            return f"{self.k}lru{rough}"
        return self.kind
