"""FeatureMatrix and its CSV exchange format.

The CSV layout (``id,label,f0,...,f{D-1}``, nine significant digits) is also
how features exported from external backbones are ingested.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if len(self.y) != len(self.X) or len(self.ids) != len(self.X):
            raise ValueError("X, y and ids must have the same number of rows")
        if np.isnan(self.X).any():
            raise ValueError("feature matrix contains NaN")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def take(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureMatrix(self.X[idx], self.y[idx], [self.ids[i] for i in idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label", *(f"f{j}" for j in range(self.dim))])
        for i, row in enumerate(self.X):
            w.writerow([self.ids[i], int(self.y[i]), *(f"{v:.9g}" for v in row)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_bytes(self.to_csv().encode("utf-8"))

    @classmethod
    def from_csv(cls, text: str, source: str = "<csv>") -> "FeatureMatrix":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureFormatError(f"{source}: empty file") from None
        if header[:2] != ["id", "label"] or header[2:] != [f"f{j}" for j in range(len(header) - 2)]:
            raise FeatureFormatError(f"{source}: line 1: header must be id,label,f0..f{{D-1}}")
        if len(header) < 3:
            raise FeatureFormatError(f"{source}: line 1: no feature columns")
        ids, labels, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FeatureFormatError(f"{source}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
            if rec[1] not in ("0", "1"):
                raise FeatureFormatError(f"{source}: line {lineno}: label must be 0 or 1")
            try:
                vals = [float(v) for v in rec[2:]]
            except ValueError:
                raise FeatureFormatError(f"{source}: line {lineno}: non-numeric feature") from None
            if not np.all(np.isfinite(vals)):
                raise FeatureFormatError(f"{source}: line {lineno}: non-finite feature")
            ids.append(rec[0])
            labels.append(int(rec[1]))
            rows.append(vals)
        if not rows:
            raise FeatureFormatError(f"{source}: no data rows")
        return cls(np.array(rows), np.array(labels), ids)

    @classmethod
    def read_csv(cls, path) -> "FeatureMatrix":
        path = Path(path)
        return cls.from_csv(path.read_text(encoding="utf-8"), source=str(path))
