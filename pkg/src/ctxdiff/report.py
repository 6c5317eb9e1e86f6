from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class CheckReport:
    check: str
    max_deviation: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.max_deviation = float(self.max_deviation)
        self.tolerance = float(self.tolerance)
        self.passed = bool(self.passed)

    @classmethod
    def compare(cls, check: str, deviation: float, tolerance: float, **details) -> "CheckReport":
        deviation = float(deviation)
        return cls(check, deviation, float(tolerance), bool(deviation < tolerance), details)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _plain(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True, default=_plain) + "\n"
