"""Per-finger linear raw -> Newton force calibration (F = a * L_raw + b)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

RAW_MAX = 1000
SWEEP_COLUMNS = ("finger", "raw_set", "gauge_force_n", "repeat")

# Hardware reference fits (index, middle, thumb bend). Ring/pinky have none of their own.
REFERENCE_COEFFS: Dict[str, tuple] = {
    "index": (0.0075, -0.414, 0.987),
    "middle": (0.0065, 0.018, 0.986),
    "thumb": (0.0125, 0.384, 0.993),
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class SweepRecord:
    finger: str
    raw_set: float
    gauge_force: float
    repeat_index: int = 0

    def __post_init__(self):
        if not 0 <= self.raw_set <= RAW_MAX:
            raise CalibrationError(f"raw_set {self.raw_set} outside [0, {RAW_MAX}]")
        if self.gauge_force < 0:
            raise CalibrationError(f"negative gauge force {self.gauge_force}")


@dataclass(frozen=True)
class CalibrationModel:
    finger: str
    slope_a: float
    intercept_b: float
    r_squared: float = 1.0
    provenance: str = "fit"

    def __post_init__(self):
        if self.slope_a <= 0:
            raise CalibrationError("slope must be positive")
        if not 0.0 <= self.r_squared <= 1.0:
            raise CalibrationError("r_squared outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {"finger": self.finger, "a": self.slope_a, "b": self.intercept_b,
                "r2": self.r_squared, "provenance": self.provenance}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CalibrationModel":
        return cls(d["finger"], float(d["a"]), float(d["b"]), float(d.get("r2", 1.0)),
                   d.get("provenance", "fit"))


class Converted(NamedTuple):
    value: float
    clamped: bool


def reference_models() -> Dict[str, CalibrationModel]:
    """Table coefficients, with ring/pinky borrowing the middle-finger fit."""
    models = {f: CalibrationModel(f, a, b, r2, "reference") for f, (a, b, r2) in REFERENCE_COEFFS.items()}
    a, b, r2 = REFERENCE_COEFFS["middle"]
    for f in ("ring", "pinky"):
        models[f] = CalibrationModel(f, a, b, r2, "borrowed:middle")
    return models


def fit_linear(records: Sequence[SweepRecord]) -> CalibrationModel:
    """Ordinary least squares over all (raw_set, gauge_force) points, repeats pooled."""
    if not records:
        raise CalibrationError("no sweep records")
    fingers = {r.finger for r in records}
    if len(fingers) != 1:
        raise CalibrationError(f"records span several fingers: {sorted(fingers)}")
    x = np.array([r.raw_set for r in records], dtype=float)
    y = np.array([r.gauge_force for r in records], dtype=float)
    if np.ptp(x) == 0:
        raise CalibrationError("all raw_set values identical; slope undetermined")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    a = float(np.sum((x - xm) * (y - ym)) / sxx)
    b = float(ym - a * xm)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return CalibrationModel(records[0].finger, a, b, min(max(r2, 0.0), 1.0))


def fit_all(records: Iterable[SweepRecord]) -> Dict[str, CalibrationModel]:
    by_finger: Dict[str, List[SweepRecord]] = {}
    for r in records:
        by_finger.setdefault(r.finger, []).append(r)
    return {f: fit_linear(rs) for f, rs in sorted(by_finger.items())}


def raw_to_newtons(model: CalibrationModel, raw: float) -> Converted:
    f = model.slope_a * raw + model.intercept_b
    if f < 0:
        return Converted(0.0, True)
    return Converted(f, False)


def newtons_to_raw(model: CalibrationModel, force: float) -> Converted:
    raw = round((force - model.intercept_b) / model.slope_a)
    if raw < 0:
        return Converted(0, True)
    if raw > RAW_MAX:
        return Converted(RAW_MAX, True)
    return Converted(int(raw), False)


# ---------------------------------------------------------------------------
# Sweep files
# ---------------------------------------------------------------------------

def load_sweep_csv(path) -> List[SweepRecord]:
    """Read a ``finger,raw_set,gauge_force_n,repeat`` file.

    Any malformed or out-of-range row aborts the load with its line number.
    """
    text = Path(path).read_text()
    if not text.strip():
        log.warning("sweep file %s is empty", path)
        return []
    reader = csv.reader(text.splitlines())
    header = tuple(h.strip() for h in next(reader))
    if header != SWEEP_COLUMNS:
        raise CalibrationError(f"{path}: header {header} != {SWEEP_COLUMNS}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        try:
            finger, raw, force, rep = (c.strip() for c in row)
            records.append(SweepRecord(finger, float(raw), float(force), int(rep)))
        except (ValueError, CalibrationError) as exc:
            raise CalibrationError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_sweep_csv(records: Iterable[SweepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in records:
            w.writerow([r.finger, int(r.raw_set), f"{r.gauge_force:.3f}", r.repeat_index])


def default_sweep_path() -> Path:
    return Path(str(resources.files("linkhand") / "data" / "reconstructed_sweep.csv"))


def reconstruct_sweep(seed: int = 7, fingers: Sequence[str] = ("index", "middle", "thumb"),
                      decimals: int = 3) -> List[SweepRecord]:
    """Synthetic two-repeat sweep whose refit matches the reference coefficients.

    Residuals are drawn at random, projected orthogonal to [1, raw] so the
    least-squares line is exactly (a, b), then scaled to the residual energy
    that yields the reference R^2. Draws that would put a gauge reading below
    zero are rejected.
    """
    raw = np.tile(np.arange(25, 1001, 25, dtype=float), 2)
    reps = np.repeat([0, 1], 40)
    basis = np.column_stack([np.ones_like(raw), raw])
    proj = basis @ np.linalg.pinv(basis)
    rng = np.random.default_rng(seed)
    out: List[SweepRecord] = []
    for finger in fingers:
        a, b, r2 = REFERENCE_COEFFS[finger]
        clean = a * raw + b
        ss_fit = np.sum((clean - clean.mean()) ** 2)
        ss_res = ss_fit * (1 - r2) / r2
        for _ in range(10000):
            e = rng.standard_normal(raw.size)
            e -= proj @ e
            e *= np.sqrt(ss_res / np.sum(e ** 2))
            y = np.round(clean + e, decimals)
            if np.all(y >= 0):
                break
        else:  # pragma: no cover
            raise CalibrationError(f"could not reconstruct a non-negative sweep for {finger}")
        out.extend(SweepRecord(finger, float(r), float(f), int(k)) for r, f, k in zip(raw, y, reps))
    return out


def models_to_json(models: Dict[str, CalibrationModel]) -> str:
    return json.dumps([models[f].to_json_dict() for f in sorted(models)], indent=2, sort_keys=True) + "\n"


def models_from_json(text: str) -> Dict[str, CalibrationModel]:
    return {d["finger"]: CalibrationModel.from_json_dict(d) for d in json.loads(text)}
