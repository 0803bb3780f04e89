"""The delimited schemas a run directory exposes, with strict validation.

Each loader checks the header exactly and parses numeric columns with a
row-numbered diagnostic on failure, so a malformed or mislabeled CSV is
rejected before any figure is drawn ("nan" cells are legal in summary
columns and parse to NaN).
"""

from __future__ import annotations

import csv


class SchemaError(Exception):
    """CSV does not match the documented schema."""


class MissingInput(Exception):
    """A referenced CSV does not exist."""


DIVERGENCE_COLUMNS = ("eps", "t", "int_lr", "div_norm")
FADING_COLUMNS = ("method", "repeat", "t", "R")
CORRECTION_SUMMARY_COLUMNS = (
    "method", "eps", "success_rate", "mean_steps", "median_steps", "mean_retention",
)

# columns parsed as float; everything else stays a string
_NUMERIC = {
    "eps", "t", "int_lr", "div_norm", "repeat", "R",
    "success_rate", "mean_steps", "median_steps", "mean_retention",
}


def load_table(path, columns) -> dict[str, list]:
    """Column-store view of the CSV; raises SchemaError with the offending
    column or row named."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError as exc:
        raise MissingInput(f"{path} does not exist") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path} is empty (expected header {','.join(columns)})")
        if tuple(header) != tuple(columns):
            raise SchemaError(
                f"{path} header {','.join(header)} does not match "
                f"expected {','.join(columns)}")
        table: dict[str, list] = {c: [] for c in columns}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise SchemaError(f"{path} line {lineno}: {len(row)} cells, expected {len(columns)}")
            for col, cell in zip(columns, row):
                if col in _NUMERIC:
                    try:
                        table[col].append(float(cell))
                    except ValueError as exc:
                        raise SchemaError(
                            f"{path} line {lineno}: column {col} is not numeric: {cell!r}"
                        ) from exc
                else:
                    table[col].append(cell)
    return table


def load_divergence(path):
    return load_table(path, DIVERGENCE_COLUMNS)


def load_fading(path):
    return load_table(path, FADING_COLUMNS)


def load_correction_summary(path):
    return load_table(path, CORRECTION_SUMMARY_COLUMNS)
