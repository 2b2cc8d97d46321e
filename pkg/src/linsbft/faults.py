"""Adversary behaviours and the per-height honesty schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Crash:
    """Stops for good once the validator's own height reaches ``at_height``."""

    at_height: int = 0


@dataclass(frozen=True)
class Silent:
    pass


@dataclass(frozen=True)
class SelectiveSend:
    """Deliver only to ``targets``; None means the lower-index half of the honest validators."""

    targets: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Equivocate:
    pass


@dataclass(frozen=True)
class FutureVoteSpam:
    rate: int = 4


Behavior = Union[Crash, Silent, SelectiveSend, Equivocate, FutureVoteSpam]

BEHAVIORS = {
    "crash": Crash,
    "silent": Silent,
    "selective_send": SelectiveSend,
    "equivocate": Equivocate,
    "future_vote_spam": FutureVoteSpam,
}


@dataclass(frozen=True)
class FaultSpec:
    """``validator`` misbehaves for messages of heights in [from_height, to_height)."""

    validator: int
    behavior: Behavior
    from_height: int = 0
    to_height: int | None = None

    def __post_init__(self):
        if isinstance(self.behavior, Crash):
            object.__setattr__(self, "from_height", self.behavior.at_height)
            object.__setattr__(self, "to_height", None)
        if self.to_height is not None and self.to_height <= self.from_height:
            raise ScheduleError(f"empty fault interval for validator {self.validator}")

    def active(self, height: int) -> bool:
        return self.from_height <= height and (self.to_height is None or height < self.to_height)

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        d = dict(d)
        kind = d.pop("behavior")
        try:
            btype = BEHAVIORS[kind]
        except KeyError:
            raise ScheduleError(f"unknown behaviour {kind!r}") from None
        args = {}
        if btype is Crash:
            args["at_height"] = int(d.pop("at_height", d.get("from_height", 0)))
        elif btype is SelectiveSend and d.get("targets") is not None:
            args["targets"] = tuple(int(t) for t in d.pop("targets"))
        elif btype is FutureVoteSpam and "rate" in d:
            args["rate"] = int(d.pop("rate"))
        d.pop("targets", None)
        return cls(
            validator=int(d["validator"]),
            behavior=btype(**args),
            from_height=int(d.get("from_height", 0)),
            to_height=None if d.get("to_height") is None else int(d["to_height"]),
        )

    def to_dict(self) -> dict:
        name = next(k for k, v in BEHAVIORS.items() if isinstance(self.behavior, v))
        out = {"validator": self.validator, "behavior": name, "from_height": self.from_height, "to_height": self.to_height}
        out.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.behavior).items()})
        return out


class FaultSchedule:
    """All fault specs of a run, checked to never exceed f faulty validators at a height."""

    def __init__(self, specs: Iterable[FaultSpec], n: int, f: int):
        self.specs = list(specs)
        self.n = n
        self.f = f
        for spec in self.specs:
            if not 0 <= spec.validator < n:
                raise ScheduleError(f"validator {spec.validator} out of range")
        self._memo: dict[tuple[int, int], Behavior | None] = {}
        self._by_validator: dict[int, list[FaultSpec]] = {}
        for spec in self.specs:
            self._by_validator.setdefault(spec.validator, []).append(spec)
        self.validate()

    def validate(self) -> None:
        for v, specs in self._by_validator.items():
            ordered = sorted(specs, key=lambda s: s.from_height)
            for a, b in zip(ordered, ordered[1:]):
                if _overlap(a, b):
                    raise ScheduleError(f"validator {v} has overlapping fault intervals")
        # intervals of one validator are disjoint, so counting open intervals
        # counts faulty validators
        events = []
        for s in self.specs:
            events.append((s.from_height, 1))
            if s.to_height is not None:
                events.append((s.to_height, -1))
        active = 0
        for height, step in sorted(events):
            active += step
            if active > self.f:
                raise ScheduleError(f"{active} faulty validators at height {height} exceeds f={self.f}")

    def behavior(self, validator: int, height: int) -> Behavior | None:
        key = (validator, height)
        if key in self._memo:
            return self._memo[key]
        found = None
        for spec in self._by_validator.get(validator, ()):
            if spec.active(height):
                found = spec.behavior
                break
        self._memo[key] = found
        return found

    def faulty_at(self, height: int) -> list[int]:
        return [i for i in range(self.n) if self.behavior(i, height) is not None]

    def honest_at(self, height: int) -> list[int]:
        return [i for i in range(self.n) if self.behavior(i, height) is None]

    def crash_height(self, validator: int) -> int | None:
        for spec in self._by_validator.get(validator, ()):
            if isinstance(spec.behavior, Crash):
                return spec.behavior.at_height
        return None

    def spammers(self) -> list[FaultSpec]:
        return [s for s in self.specs if isinstance(s.behavior, FutureVoteSpam)]


def _overlap(a: FaultSpec, b: FaultSpec) -> bool:
    a_end = float("inf") if a.to_height is None else a.to_height
    b_end = float("inf") if b.to_height is None else b.to_height
    return a.from_height < b_end and b.from_height < a_end


def inject_fault(schedule: FaultSchedule, spec: FaultSpec) -> FaultSchedule:
    """A new schedule with ``spec`` added; rejected if it would exceed f."""
    return FaultSchedule(schedule.specs + [spec], schedule.n, schedule.f)
