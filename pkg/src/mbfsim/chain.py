"""State space and transition structure of the four birth-death chain variants.

State ``i`` is the number of compromised processes, ``0 <= i <= n``.  For the
discrete-time chain the per-state quantities are probabilities; for the three
continuous-time variants they are rates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

#: Tolerance on ``p + q + r == 1`` for the discrete-time chain.
SUM_TOL = 1e-12


class SpecError(ValueError):
    """Raised when chain parameters violate their invariants."""


class Variant(str, Enum):
    DTMC = "dtmc"
    CTMC_EXTERNAL = "ctmc-external"
    CTMC_INTERNAL = "ctmc-internal"
    CTMC_COORDINATED = "ctmc-coordinated"

    @property
    def is_ctmc(self) -> bool:
        return self is not Variant.DTMC

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise SpecError(f"unknown variant {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class StateTransitions:
    state: int
    down: float
    up: float
    stay: float = 0.0


@dataclass(frozen=True)
class ChainSpec:
    """One chain: variant, size and the (p, q, r) configuration.

    ``seed_rate`` is the infection rate out of state 0 for the INTERNAL and
    COORDINATED variants, where the literal formulas give zero.  It defaults
    to ``q``; pass ``0.0`` to keep state 0 absorbing.  Other variants ignore
    it.
    """

    n: int
    variant: Variant
    p: float
    q: float
    r: float = 0.0
    seed_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.seed_rate is None:
            object.__setattr__(self, "seed_rate", float(self.q))
        for name in ("p", "q", "r", "seed_rate"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise SpecError(f"{name} must be a nonnegative finite number, got {value!r}")
            object.__setattr__(self, name, float(value))
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 2:
            raise SpecError(f"n must be an integer >= 2, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

        if self.variant is Variant.DTMC:
            for name in ("p", "q", "r"):
                if getattr(self, name) > 1:
                    raise SpecError(f"{name} must lie in [0, 1] for the DTMC")
            total = self.p + self.q + self.r
            if abs(total - 1.0) > SUM_TOL:
                raise SpecError(f"p + q + r must equal 1 (got {total!r})")
        else:
            if self.r != 0:
                raise SpecError("r must be 0 for continuous-time variants")
            if self.p + self.q <= 0:
                raise SpecError("p + q must be positive for continuous-time variants")

    @classmethod
    def dtmc(cls, n: int, p: float, q: float, r: float | None = None,
             normalize: bool = False) -> "ChainSpec":
        """Build a DTMC spec, deriving ``r = 1 - p - q`` when omitted.

        With ``normalize=True`` the triple is rescaled to sum to one; this is
        the only place where inputs are ever rescaled.
        """
        if r is None:
            r = 1.0 - p - q
            if -SUM_TOL <= r < 0:
                r = 0.0
            elif r < 0:
                raise SpecError(f"dtmc needs p + q <= 1, got p={p}, q={q}")
        if normalize:
            total = p + q + r
            if total <= 0:
                raise SpecError("cannot normalize an all-zero triple")
            p, q, r = p / total, q / total, r / total
        return cls(n=n, variant=Variant.DTMC, p=p, q=q, r=r)

    # -- derived per-state quantities ------------------------------------

    @cached_property
    def _rates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        i = np.arange(n + 1, dtype=float)
        down = np.zeros(n + 1)
        up = np.zeros(n + 1)
        stay = np.zeros(n + 1)
        v = self.variant
        if v is Variant.DTMC:
            down[1:n] = self.p
            up[1:n] = self.q
            stay[1:n] = self.r
            r0 = self.r + self.p
            down[0], up[0], stay[0] = 0.0, 1.0 - r0, r0
            rn = self.r + self.q
            down[n], up[n], stay[n] = 1.0 - rn, 0.0, rn
        elif v is Variant.CTMC_EXTERNAL:
            down[1:] = self.p
            up[:n] = self.q
        else:
            down[1:] = self.p * i[1:]
            if v is Variant.CTMC_INTERNAL:
                up[1:n] = self.q * i[1:n] * (n - i[1:n]) / n
            else:
                up[1:n] = self.q * i[1:n]
            up[0] = self.seed_rate
        for a in (down, up, stay):
            a.flags.writeable = False
        return down, up, stay

    def rates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Read-only ``(down, up, stay)`` arrays of length ``n + 1``."""
        return self._rates

    def transitions(self, i: int) -> StateTransitions:
        return transitions(self, i)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {"n": self.n, "variant": self.variant.value, "p": self.p,
                "q": self.q, "r": self.r, "seed_rate": self.seed_rate}

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainSpec":
        unknown = set(doc) - {"n", "variant", "p", "q", "r", "seed_rate"}
        if unknown:
            raise SpecError(f"unknown chain fields: {sorted(unknown)}")
        try:
            return cls(n=doc["n"], variant=doc["variant"], p=doc["p"], q=doc["q"],
                       r=doc.get("r", 0.0), seed_rate=doc.get("seed_rate"))
        except KeyError as exc:
            raise SpecError(f"missing chain field {exc.args[0]!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChainSpec":
        return cls.from_dict(json.loads(text))


def transitions(spec: ChainSpec, i: int) -> StateTransitions:
    """Per-state (down, up, stay) values of ``spec`` at state ``i``."""
    if int(i) != i or not 0 <= i <= spec.n:
        raise SpecError(f"state {i!r} outside [0, {spec.n}]")
    i = int(i)
    down, up, stay = spec.rates()
    return StateTransitions(state=i, down=float(down[i]), up=float(up[i]), stay=float(stay[i]))


@dataclass(frozen=True)
class ThresholdPolicy:
    """Resilience threshold: a state is good iff it is ``<= f``."""

    f: int

    def __post_init__(self):
        if int(self.f) != self.f or self.f < 0:
            raise SpecError(f"threshold must be a nonnegative integer, got {self.f!r}")
        object.__setattr__(self, "f", int(self.f))

    @classmethod
    def from_fraction(cls, n: int, fraction: float) -> "ThresholdPolicy":
        """``f = floor(fraction * (n - 1))``; 1/3 of 200 nodes gives 66."""
        if not 0 < fraction < 1:
            raise SpecError(f"threshold fraction must lie in (0, 1), got {fraction!r}")
        # guard against 19.999999999999996 when fraction*(n-1) is integral
        return cls(math.floor(fraction * (n - 1) + 1e-9))

    def check(self, n: int) -> "ThresholdPolicy":
        if self.f > n:
            raise SpecError(f"threshold {self.f} exceeds n={n}")
        return self

    def is_good(self, state: int) -> bool:
        return state <= self.f
