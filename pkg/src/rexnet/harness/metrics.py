"""Per-node, per-epoch metric rows and their CSV form."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import astuple, dataclass, fields

CSV_HEADER = ("epoch", "node_id", "merge_ms", "train_ms", "share_ms", "test_ms",
              "bytes_sent", "bytes_received", "local_rmse")
TIMING_COLUMNS = ("merge_ms", "train_ms", "share_ms", "test_ms")


@dataclass
class MetricsRecord:
    epoch: int
    node_id: int
    merge_ms: float
    train_ms: float
    share_ms: float
    test_ms: float
    bytes_sent: int
    bytes_received: int
    local_rmse: float

    @property
    def round_ms(self) -> float:
        return self.merge_ms + self.train_ms + self.share_ms + self.test_ms


assert tuple(f.name for f in fields(MetricsRecord)) == CSV_HEADER


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        # repr round-trips exactly, which keeps reruns byte-comparable
        return repr(value)
    return str(value)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: (r.epoch, r.node_id)):
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def write_csv(records, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records))


def read_csv(path: str | os.PathLike) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                int(row["epoch"]), int(row["node_id"]),
                float(row["merge_ms"]), float(row["train_ms"]),
                float(row["share_ms"]), float(row["test_ms"]),
                int(row["bytes_sent"]), int(row["bytes_received"]),
                float(row["local_rmse"])))
    return out


def strip_timing(csv_text: str) -> str:
    """CSV with the wall-clock columns removed, for determinism comparisons."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([row[i] for i in keep])
    return buf.getvalue()


def per_epoch(records) -> dict[int, list[MetricsRecord]]:
    by_epoch: dict[int, list[MetricsRecord]] = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(r)
    return dict(sorted(by_epoch.items()))


def summarize(records) -> dict:
    """Aggregate view used by ``rexnet summarize``."""
    by_epoch = per_epoch(records)
    if not by_epoch:
        return {"epochs": 0, "nodes": 0}
    last = max(by_epoch)
    finals = [r.local_rmse for r in by_epoch[last] if not math.isnan(r.local_rmse)]
    mean_rmse = {e: _nanmean([r.local_rmse for r in rs]) for e, rs in by_epoch.items()}
    sent = [sum(r.bytes_sent for r in rs) for rs in by_epoch.values()]
    phases = {name: _nanmean([getattr(r, name) for r in records]) for name in TIMING_COLUMNS}
    return {
        "epochs": last + 1,
        "nodes": len({r.node_id for r in records}),
        "final_mean_rmse": sum(finals) / len(finals) if finals else float("nan"),
        "best_mean_rmse": min((v for v in mean_rmse.values() if not math.isnan(v)), default=float("nan")),
        "total_bytes_sent": sum(r.bytes_sent for r in records),
        "total_bytes_received": sum(r.bytes_received for r in records),
        "mean_bytes_sent_per_epoch": sum(sent) / len(sent),
        "mean_phase_ms": phases,
    }


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")
