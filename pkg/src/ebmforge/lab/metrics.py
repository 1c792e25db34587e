"""Per-step metrics records and their CSV / JSONL emission."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from typing import List, Optional

__all__ = ["MetricsRecord", "MetricsLog", "emit_metrics", "parse_metrics", "FIELDS"]


@dataclass
class MetricsRecord:
    step: int
    grad_norm_positive: float
    grad_norm_negative: float
    grad_norm_total: float
    grad_norm_clipped: float
    grad_norm_kl_entropy: Optional[float] = None
    grad_norm_kl_opt: Optional[float] = None
    mean_data_energy: Optional[float] = None
    mean_sample_energy: Optional[float] = None
    mode_coverage: Optional[float] = None
    mode_transition_rate: Optional[float] = None
    oracle_cosine: Optional[float] = None
    wall_time: float = 0.0


FIELDS = [f.name for f in dataclasses.fields(MetricsRecord)]


class MetricsLog:
    """Append-only list of records with strictly increasing steps."""

    def __init__(self, records=()):
        self._records: List[MetricsRecord] = []
        for r in records:
            self.append(r)

    def append(self, record: MetricsRecord):
        if self._records and record.step <= self._records[-1].step:
            raise ValueError(f"metrics step {record.step} does not follow {self._records[-1].step}")
        self._records.append(record)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def column(self, name):
        return [getattr(r, name) for r in self._records]

    def without_time(self):
        """Records as dicts with ``wall_time`` dropped (for determinism checks)."""
        return [{k: v for k, v in dataclasses.asdict(r).items() if k != "wall_time"} for r in self]


def _encode(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def emit_metrics(log, path, fmt: str = "csv") -> None:
    records = list(log)
    if not records:
        raise ValueError("nothing to emit")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELDS)
            for r in records:
                w.writerow([_encode(getattr(r, f)) for f in FIELDS])
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for r in records:
                row = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                       for k, v in dataclasses.asdict(r).items()}
                fh.write(json.dumps(row) + "\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def parse_metrics(path, fmt: Optional[str] = None) -> MetricsLog:
    fmt = fmt or ("jsonl" if str(path).endswith(".jsonl") else "csv")
    out = MetricsLog()
    if fmt == "csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            vals = {k: (None if v == "" else (int(v) if k == "step" else float(v))) for k, v in row.items()}
            out.append(MetricsRecord(**vals))
    else:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    out.append(MetricsRecord(**json.loads(line)))
    return out
