"""Uniformly sampled detuning sequences and their CSV interchange format.

The CSV contract shared by every module: header ``time_s,detuning_hz`` with
an optional third ``regime`` column whose values are ``stat`` or ``trans``.
Float fields are written with repr(), which round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

STATIONARY = "stat"
TRANSIENT = "trans"


@dataclass
class TimeSeries:
    """Scalar detuning samples in Hz at a fixed rate, optionally labeled."""

    sample_rate: float
    values: np.ndarray
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("time series contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.values):
                raise ContractError(
                    f"labels length {len(self.labels)} != values length {len(self.values)}"
                )
            bad = set(np.unique(self.labels)) - {STATIONARY, TRANSIENT}
            if bad:
                raise ContractError(f"unknown regime labels: {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.values)

    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) / self.sample_rate

    def segment(self, start: int, stop: int) -> "TimeSeries":
        labels = self.labels[start:stop] if self.labels is not None else None
        return TimeSeries(self.sample_rate, self.values[start:stop].copy(), labels)

    def regime_runs(self, regime: str) -> list[tuple[int, int]]:
        """Contiguous [start, stop) index runs carrying the given label."""
        if self.labels is None:
            return []
        mask = self.labels == regime
        runs = []
        start = None
        for i, flag in enumerate(mask):
            if flag and start is None:
                start = i
            elif not flag and start is not None:
                runs.append((start, i))
                start = None
        if start is not None:
            runs.append((start, len(mask)))
        return runs

    def longest_run(self, regime: str) -> "TimeSeries":
        runs = self.regime_runs(regime)
        if not runs:
            raise ContractError(f"series has no samples labeled {regime!r}")
        start, stop = max(runs, key=lambda r: r[1] - r[0])
        return self.segment(start, stop)


def write_timeseries_csv(path, series: TimeSeries) -> None:
    lines = []
    if series.labels is not None:
        lines.append("time_s,detuning_hz,regime")
        for i, v in enumerate(series.values):
            lines.append(f"{i / series.sample_rate!r},{v!r},{series.labels[i]}")
    else:
        lines.append("time_s,detuning_hz")
        for i, v in enumerate(series.values):
            lines.append(f"{i / series.sample_rate!r},{v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_timeseries_csv(path) -> TimeSeries:
    text = Path(path).read_text()
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not rows:
        raise ContractError(f"{path}: empty CSV")
    header = rows[0].split(",")
    if header[:2] != ["time_s", "detuning_hz"]:
        raise ContractError(f"{path}: expected header time_s,detuning_hz[,regime]")
    has_regime = len(header) >= 3 and header[2] == "regime"
    body = rows[1:]
    if not body:
        raise ContractError(f"{path}: no data rows")
    times = np.empty(len(body))
    values = np.empty(len(body))
    labels = [] if has_regime else None
    for i, row in enumerate(body):
        parts = row.split(",")
        times[i] = float(parts[0])
        values[i] = float(parts[1])
        if has_regime:
            labels.append(parts[2])
    if len(body) >= 2:
        dt = np.diff(times)
        if np.max(np.abs(dt - dt[0])) > 1e-9 * max(dt[0], 1e-12) + 1e-12:
            raise ContractError(f"{path}: sample times are not uniform")
        rate = 1.0 / dt[0]
    else:
        rate = 1.0
    return TimeSeries(rate, values, np.array(labels) if has_regime else None)
