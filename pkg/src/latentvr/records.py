"""CSV output files: column sets, writers and a strict header check."""
from __future__ import annotations

import csv
from pathlib import Path

METRICS_COLUMNS = ("epoch", "stage", "train_loss", "ce_loss", "recon_loss", "val_acc",
                   "easy_count", "hard_count")
TOKEN_GRAD_COLUMNS = ("epoch", "layer", "token_index", "segment", "fro_norm")
NUCLEAR_COLUMNS = ("epoch", "layer", "proj", "factor", "split", "nuc_norm")
CROP_COLUMNS = ("example_id", "t", "r", "c", "W", "density", "selected")
ROUTER_COLUMNS = ("example_id", "t", "layer", "depth", "selected", "mean_score")
AR_COLUMNS = ("example_id", "latent_ar_steps", "explicit_ar_steps", "ratio")
STATS_COLUMNS = ("histogram", "bucket", "count")


class SchemaError(ValueError):
    pass


def fmt(value) -> str:
    """Stable text form; floats use ``repr`` so rows round-trip exactly."""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(str(int(v)) for v in value)
    return str(value)


def write_rows(path, columns, rows, append: bool = False) -> None:
    """Write ``rows`` (dicts or sequences) with a header unless appending to a file."""
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in columns]
            if len(row) != len(columns):
                raise SchemaError(f"row {row!r} does not have {len(columns)} fields")
            w.writerow([fmt(v) for v in row])


def read_rows(path, columns) -> list[dict]:
    """Rows of ``path`` as dicts after checking the header matches ``columns`` exactly."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise SchemaError(f"{path}: header {header} != {list(columns)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise SchemaError(f"{path}:{lineno}: expected {len(columns)} fields, "
                                  f"got {len(row)}")
            out.append(dict(zip(columns, row)))
        return out


def truncate_after_epoch(path, columns, epoch: int) -> None:
    """Drop rows whose epoch is later than ``epoch`` (used when resuming)."""
    path = Path(path)
    if not path.exists():
        return
    rows = [r for r in read_rows(path, columns) if int(r["epoch"]) <= epoch]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])
