"""Generic delimited-table ingestion for externally prepared datasets.

Reads comma- or tab-delimited text with a one-line header into a Dataset.
Continuous features are standardized (mean 0, variance 1) on the leading
train portion of the file; categorical columns are one-hot expanded in place
and left unstandardized. A layout descriptor maps columns to (t, d) positions
for sequence data; without one, each feature lands at timestep 0.
"""

from __future__ import annotations

import numpy as np

from .datagen import Dataset


class IngestError(ValueError):
    pass


def _detect_delimiter(header: str) -> str:
    return "\t" if header.count("\t") >= header.count(",") else ","


def _parse_float(cell, row, col):
    try:
        return float(cell)
    except ValueError:
        raise IngestError(f"non-numeric cell {cell!r} at row {row}, column {col!r}") from None


def ingest_table(path, schema) -> Dataset:
    """Load a labeled table.

    schema keys: ``label`` (column name, required), ``categorical`` (column
    names to one-hot), ``label_values`` (allowed labels in class order; inferred
    sorted-unique when absent), ``layout`` ({"t_len": T, "columns": {name:
    (t, d)}} for sequences), ``train_fraction`` (standardization portion,
    default 0.6).
    """
    label_col = schema["label"]
    categorical = set(schema.get("categorical", ()))
    layout = schema.get("layout")
    train_frac = float(schema.get("train_fraction", 0.6))

    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise IngestError(f"{path}: need a header and at least one data row")
    delim = _detect_delimiter(lines[0])
    header = [h.strip() for h in lines[0].split(delim)]
    if label_col not in header:
        raise IngestError(f"label column {label_col!r} not in header {header}")
    rows = []
    for i, ln in enumerate(lines[1:], start=1):
        cells = [c.strip() for c in ln.split(delim)]
        if len(cells) != len(header):
            raise IngestError(f"ragged row {i}: {len(cells)} cells, expected {len(header)}")
        rows.append(cells)

    label_idx = header.index(label_col)
    raw_labels = [r[label_idx] for r in rows]
    if "label_values" in schema:
        allowed = [str(v) for v in schema["label_values"]]
        lookup = {v: k for k, v in enumerate(allowed)}
        for i, v in enumerate(raw_labels):
            if v not in lookup:
                raise IngestError(f"unknown label value {v!r} at row {i + 1}")
    else:
        lookup = {v: k for k, v in enumerate(sorted(set(raw_labels)))}
    y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)

    feature_cols = [h for h in header if h != label_col]
    columns, is_onehot = [], []
    for col in feature_cols:
        ci = header.index(col)
        if col in categorical:
            levels = sorted({r[ci] for r in rows})
            for lev in levels:
                columns.append((f"{col}={lev}",
                                np.array([1.0 if r[ci] == lev else 0.0 for r in rows])))
                is_onehot.append(True)
        else:
            vals = np.array([_parse_float(r[ci], i + 1, col)
                             for i, r in enumerate(rows)])
            columns.append((col, vals))
            is_onehot.append(False)

    n = len(rows)
    train_n = max(1, int(round(train_frac * n)))
    feats = np.stack([v for _, v in columns], axis=1)
    for j, onehot in enumerate(is_onehot):
        if onehot:
            continue
        mu = feats[:train_n, j].mean()
        sd = feats[:train_n, j].std()
        feats[:, j] = (feats[:, j] - mu) / sd if sd > 0 else 0.0

    names = [name for name, _ in columns]
    if layout is None:
        x = feats[:, None, :]
    else:
        t_len = int(layout["t_len"])
        mapping = layout["columns"]
        d = 1 + max(pos[1] for pos in mapping.values())
        x = np.zeros((n, t_len, d))
        for name, (t, dd) in mapping.items():
            if name not in names:
                raise IngestError(f"layout column {name!r} not found in table")
            x[:, int(t), int(dd)] = feats[:, names.index(name)]
    return Dataset(x, y, "external", len(lookup),
                   gen_params={"columns": names, "train_fraction": train_frac})
