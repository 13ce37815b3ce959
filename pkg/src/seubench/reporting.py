"""CSV and JSON emission for campaigns, vulnerability analyses and pruning.

Every CSV starts with one ``#`` line of ``key=value`` metadata (sorted keys,
no timestamps) so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .campaign import GroupStats, InjectionRecord, VulnerabilityReport
from .errors import ContractError
from .faults import Domain, FaultSpec
from .modelio import atomic_write_text, dump_json

RECORD_COLUMNS = (
    "set_id", "kind", "layer", "element_index", "bit", "orig_bits_hex", "new_bits_hex",
    "pixel_change_rate", "critical", "nonfinite", "saturated",
)
GRID_COLUMNS = ("set_id", "bit", "n", "mean_rate", "std_rate", "critical_fraction", "nonfinite_fraction")
MSB_COLUMNS = ("set_id", "msb_rate", "range_ratio", "gap")


def _num(x: float) -> str:
    # repr round-trips binary64 exactly
    return repr(float(x))


def _header(meta: Mapping) -> str:
    parts = []
    for k in sorted(meta):
        v = str(meta[k])
        if any(c in v for c in " =\n"):
            raise ContractError(f"metadata value for {k!r} may not contain spaces, '=' or newlines")
        parts.append(f"{k}={v}")
    return "# " + " ".join(parts) + "\n"


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        return {}
    return dict(p.split("=", 1) for p in line[1:].split())


def _csv(meta: Mapping, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(_header(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def records_csv(records: Sequence[InjectionRecord], meta: Mapping) -> str:
    rows = []
    for r in records:
        digits = r.spec.domain.width // 4
        rows.append((
            r.spec.param_set_id, r.kind, r.layer, r.spec.element_index, r.spec.bit_index,
            f"{r.orig_bits:0{digits}x}", f"{r.new_bits:0{digits}x}",
            _num(r.pixel_change_rate), int(r.critical), int(r.nonfinite), int(r.saturated),
        ))
    return _csv(meta, RECORD_COLUMNS, rows)


def write_records(path, records: Sequence[InjectionRecord], meta: Mapping) -> Path:
    atomic_write_text(path, records_csv(records, meta))
    return Path(path)


def _domain(hex_digits: int, variant: str | None) -> Domain:
    if hex_digits == 2:
        return Domain.I8
    return Domain.I32 if variant == "int8" else Domain.F32


def read_records(path) -> tuple[dict[str, str], list[InjectionRecord]]:
    """Parse a records CSV back into (metadata, records)."""
    text = Path(path).read_text()
    lines = text.splitlines(keepends=True)
    meta = _parse_header(lines[0]) if lines else {}
    body = lines[1:] if meta or (lines and lines[0].startswith("#")) else lines
    reader = csv.DictReader(body)
    if reader.fieldnames is None or tuple(reader.fieldnames) != RECORD_COLUMNS:
        raise ContractError(f"{path} is not a records file")
    records = []
    for row in reader:
        spec = FaultSpec(row["set_id"], int(row["element_index"]), int(row["bit"]), _domain(len(row["orig_bits_hex"]), meta.get("variant")))
        records.append(InjectionRecord(
            spec, row["layer"], row["kind"], int(row["orig_bits_hex"], 16), int(row["new_bits_hex"], 16),
            float(row["pixel_change_rate"]), row["critical"] == "1", row["nonfinite"] == "1", row["saturated"] == "1",
        ))
    return meta, records


def _stats_dict(s: GroupStats) -> dict:
    return {
        "n": s.n,
        "mean_rate": s.mean_rate,
        "std_rate": s.std_rate,
        "critical_fraction": s.critical_fraction,
        "nonfinite_fraction": s.nonfinite_fraction,
    }


def grid_csv(report: VulnerabilityReport, meta: Mapping) -> str:
    rows = [
        (sid, bit, s.n, _num(s.mean_rate), _num(s.std_rate), _num(s.critical_fraction), _num(s.nonfinite_fraction))
        for (sid, bit), s in report.grid.items()
    ]
    return _csv(meta, GRID_COLUMNS, rows)


def summary_json(report: VulnerabilityReport, meta: Mapping, extra: Mapping | None = None) -> str:
    doc = {
        "meta": dict(meta),
        "model": _stats_dict(report.model),
        "per_set": {sid: _stats_dict(s) for sid, s in report.per_set.items()},
        "set_order": list(report.set_order),
    }
    if extra:
        doc.update(json_safe(dict(extra)))
    return dump_json(doc)


def json_safe(obj):
    """JSON has no NaN; undefined values become null."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def msb_csv(rows: Sequence[Mapping], meta: Mapping) -> str:
    return _csv(meta, MSB_COLUMNS, [(r["set_id"], _num(r["msb_rate"]), _num(r["range_ratio"]), _num(r["gap"])) for r in rows])


def sensitivity_csv(tables: Sequence, meta: Mapping) -> str:
    """One row per (iteration, layer, ratio); ratio 0.0 rows carry the baseline."""
    rows = []
    for i, table in enumerate(tables, 1):
        rows.extend((i, lid, f"{ratio:.1f}", _num(v)) for lid, ratio, v in table.records())
    return _csv(meta, ("iteration", "layer", "ratio", "metric"), rows)


def allocation_csv(allocations: Sequence, meta: Mapping) -> str:
    rows = []
    for i, alloc in enumerate(allocations, 1):
        rows.extend((i, lid, f"{ratio:.1f}") for lid, ratio in alloc.ratios.items())
    return _csv(meta, ("iteration", "layer", "ratio"), rows)
