"""Trace interchange (NSYS-like kernel CSV) and the attacker's black-box view."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .perfsim import KernelRecord, Trace

CSV_COLUMNS = (
    "index",
    "kernel_name",
    "duration_ns",
    "l2_read_bytes",
    "l2_write_bytes",
    "input_bytes",
    "output_bytes",
)
HEADER = ",".join(CSV_COLUMNS)


class TraceFormatError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


def export_trace_csv(trace: Trace) -> bytes:
    lines = [HEADER]
    for r in trace.records:
        lines.append(
            f"{r.index},{r.kernel_name},{r.duration_ns},{r.l2_read_bytes},"
            f"{r.l2_write_bytes},{r.input_bytes},{r.output_bytes}"
        )
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_trace_csv(
    data: bytes | str,
    model: str = "",
    device: str = "",
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> Trace:
    """Inverse of :func:`export_trace_csv`; provenance fields come from the caller."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TraceFormatError(1, "empty document, expected header")
    if lines[0].rstrip("\r") != HEADER:
        raise TraceFormatError(1, f"bad header, expected '{HEADER}'")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split(",")
        if len(cells) != len(CSV_COLUMNS):
            raise TraceFormatError(lineno, f"expected {len(CSV_COLUMNS)} columns, got {len(cells)}")
        values = []
        for col, cell in zip(CSV_COLUMNS, cells):
            if col == "kernel_name":
                if not cell:
                    raise TraceFormatError(lineno, "empty kernel_name")
                values.append(cell)
                continue
            try:
                v = int(cell)
            except ValueError:
                raise TraceFormatError(lineno, f"{col} is not an integer: {cell!r}") from None
            if v < 0:
                raise TraceFormatError(lineno, f"{col} is negative")
            values.append(v)
        if values[0] != len(records):
            raise TraceFormatError(
                lineno, f"non-contiguous index {values[0]}, expected {len(records)}"
            )
        records.append(KernelRecord(*values))
    return Trace(model, device, noise_sigma, seed, tuple(records))


@dataclass(frozen=True)
class ViewRecord:
    index: int
    duration_ns: int
    l2_read_bytes: int
    l2_write_bytes: int
    input_bytes: int
    output_bytes: int

    def metrics(self) -> tuple[int, int, int, int, int]:
        return (
            self.duration_ns,
            self.l2_read_bytes,
            self.l2_write_bytes,
            self.input_bytes,
            self.output_bytes,
        )


@dataclass(frozen=True)
class AttackerView:
    """Metrics and order only. There is deliberately no field for names or labels."""

    device: str
    records: tuple[ViewRecord, ...]

    def to_json(self) -> str:
        return json.dumps(
            {"device": self.device, "records": [asdict(r) for r in self.records]},
            sort_keys=True,
        )


def attacker_view(trace: Trace) -> AttackerView:
    return AttackerView(
        trace.device,
        tuple(ViewRecord(r.index, *r.metrics()) for r in trace.records),
    )
