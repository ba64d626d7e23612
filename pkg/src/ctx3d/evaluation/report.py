"""CSV and plain-text renderings of evaluation results."""

from __future__ import annotations

import csv
import os

from .froc import FP_RATES, FrocCurve


def _rate_label(r: float) -> str:
    return f"{r:g}"


def write_froc_csv(path: str | os.PathLike, curve: FrocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fp_per_image", "sensitivity"])
        for fp, s in zip(curve.fp_per_image, curve.sensitivity):
            w.writerow([repr(float(fp)), repr(float(s))])


def write_sensitivity_csv(path: str | os.PathLike, rows: dict[str, dict[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [_rate_label(r) for r in FP_RATES])
        for name, table in rows.items():
            w.writerow([name] + [f"{100 * table[r]:.2f}" for r in FP_RATES])


def format_sensitivity_table(rows: dict[str, dict[float, float]], label_width: int = 30) -> str:
    """Sensitivity (%) at 0.5 ... 16 FPs per image, one row per method."""
    head = "FPs per image".ljust(label_width) + "".join(f"{_rate_label(r):>8}" for r in FP_RATES)
    lines = [head]
    for name, table in rows.items():
        lines.append(name.ljust(label_width) + "".join(f"{100 * table[r]:8.2f}" for r in FP_RATES))
    return "\n".join(lines) + "\n"


def format_stratified(rows: dict[str, dict[str, dict[str, float]]], label_width: int = 12) -> str:
    """Lesion type | diameter (mm) | slice interval (mm) columns, sensitivity in whole percent."""
    groups = (("type", "Lesion type"), ("diameter", "Lesion diameter (mm)"), ("interval", "Slice interval (mm)"))
    any_row = next(iter(rows.values()), {})
    cols = [(g, k) for g, _ in groups for k in any_row.get(g, {})]
    for r in rows.values():
        for g, _ in groups:
            for k in r.get(g, {}):
                if (g, k) not in cols:
                    cols.append((g, k))
    titles = " | ".join(f"{t}: " + " ".join(k for gg, k in cols if gg == g) for g, t in groups)
    head = "".ljust(label_width) + "".join(f"{k:>7}" for _, k in cols)
    lines = [titles, head]
    for name, r in rows.items():
        cells = []
        for g, k in cols:
            v = r.get(g, {}).get(k)
            cells.append(f"{'-':>7}" if v is None else f"{100 * v:7.0f}")
        lines.append(name.ljust(label_width) + "".join(cells))
    return "\n".join(lines) + "\n"


def write_stratified_csv(path: str | os.PathLike, rows: dict[str, dict[str, dict[str, float]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "group", "stratum", "sensitivity"])
        for name, r in rows.items():
            for g, strata in r.items():
                for k, v in strata.items():
                    w.writerow([name, g, k, f"{100 * v:.2f}"])
