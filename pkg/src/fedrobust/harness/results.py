"""CSV and JSON summary output for experiment records."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from fedrobust.harness.engine import RoundRecord, final_metrics

COLUMNS = (
    "round",
    "test_error",
    "attack_success",
    "selected_client",
    "raw_variance_mean",
    "augmented_variance_mean",
    "update_norm",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def emit_results(records: list[RoundRecord], path, config: dict | None = None) -> tuple[Path, Path]:
    """Write evaluated rounds to ``path`` (CSV) and a summary next to it (``.json``).

    Returns the two paths written.
    """
    path = Path(path)
    summary_path = path.with_suffix(".json")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(COLUMNS)
            for r in records:
                if not r.evaluated:
                    continue
                writer.writerow([_fmt(getattr(r, col)) for col in COLUMNS])
        summary = {"final": final_metrics(records), "config": config or {}}
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc
    return path, summary_path


def load_results(path) -> list[dict]:
    """Parse a results CSV back into dicts with numeric fields (blank -> None)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            parsed = {}
            for key, value in row.items():
                if value == "":
                    parsed[key] = None
                elif key in ("round", "selected_client"):
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows
