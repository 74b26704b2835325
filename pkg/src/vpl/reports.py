"""Result tables: schema-stable CSV plus aligned-text markdown."""

from __future__ import annotations

import csv

RESULT_COLUMNS = (
    "method",
    "total_params_multiplier",
    "dataset",
    "split",
    "accuracy",
    "auroc",
    "seed",
)


def _cell(value):
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(rows, path, columns=RESULT_COLUMNS):
    """Rows are dicts; missing keys become empty cells."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def format_table(headers, rows, floatfmt="{:.4f}"):
    """Markdown table with aligned columns; floats use `floatfmt`."""

    def fmt(v):
        if v is None or v == "":
            return ""
        if isinstance(v, float):
            return floatfmt.format(v)
        return str(v)

    cells = [[fmt(v) for v in row] for row in rows]
    headers = [str(h) for h in headers]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    def line(vals):
        return "| " + " | ".join(v.ljust(w) for v, w in zip(vals, widths)) + " |"

    out = [line(headers), "| " + " | ".join("-" * w for w in widths) + " |"]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def write_text(path, text):
    with open(path, "w") as f:
        f.write(text)
