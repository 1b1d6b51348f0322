"""CVSS exploitability metrics used as leaf exploit probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional

# Metric weights from the CVSS v3.x and v2 specifications.
V3_AC = {"low": Decimal("0.77"), "high": Decimal("0.44")}
V3_UI = {"none": Decimal("0.85"), "required": Decimal("0.62")}
V2_AC = {"low": Decimal("0.71"), "medium": Decimal("0.61"), "high": Decimal("0.35")}
V2_AU = {"none": Decimal("0.704"), "single": Decimal("0.56"), "multiple": Decimal("0.45")}


@dataclass(frozen=True)
class CvssInfo:
    version: str
    ac: str
    ui_or_au: str
    explicit_probability: Optional[float] = None
    base_score: Optional[float] = None
    vuln_id: Optional[str] = None

    def __post_init__(self):
        if self.version not in ("v2", "v3"):
            raise ValueError(f"unknown CVSS version {self.version!r}")
        ac, second = (V3_AC, V3_UI) if self.version == "v3" else (V2_AC, V2_AU)
        if self.ac not in ac:
            raise ValueError(f"bad attack complexity {self.ac!r} for CVSS {self.version}")
        if self.ui_or_au not in second:
            raise ValueError(f"bad UI/Au value {self.ui_or_au!r} for CVSS {self.version}")
        p = self.explicit_probability
        if p is not None and not 0.0 <= p <= 1.0:
            raise ValueError(f"explicit probability {p} outside [0, 1]")

    def exploit_probability(self) -> float:
        if self.explicit_probability is not None:
            return float(self.explicit_probability)
        if self.version == "v3":
            raw = V3_AC[self.ac] * V3_UI[self.ui_or_au]
        else:
            raw = V2_AC[self.ac] * V2_AU[self.ui_or_au]
        return float(raw.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))

    def to_json(self) -> dict:
        d = {"version": self.version, "ac": self.ac, "ui_or_au": self.ui_or_au}
        if self.explicit_probability is not None:
            d["explicit_probability"] = self.explicit_probability
        if self.base_score is not None:
            d["base_score"] = self.base_score
        if self.vuln_id is not None:
            d["vuln_id"] = self.vuln_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CvssInfo":
        return cls(
            version=d["version"],
            ac=d["ac"],
            ui_or_au=d.get("ui_or_au", d.get("ui", d.get("au"))),
            explicit_probability=d.get("explicit_probability"),
            base_score=d.get("base_score"),
            vuln_id=d.get("vuln_id", d.get("id")),
        )
