"""Confusion matrices, Acc/P/R/F1 and cross-corpus tables.

Fake is the positive class. Metrics are percentages computed from exact
rationals and converted to float once, so they match any other exact
computation bit for bit. Degenerate ratios (no predicted or no actual
positives) are reported as 0.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataio import LabeledDataset, cached_tensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(labels: Sequence[int], decisions: Sequence[int]) -> ConfusionMatrix:
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    d = np.asarray(decisions).astype(np.int64).reshape(-1)
    if len(y) != len(d):
        raise ValueError(f"labels ({len(y)}) and decisions ({len(d)}) differ in length")
    if len(y) == 0:
        raise ValueError("cannot build a confusion matrix from empty vectors")
    if not (np.isin(y, (0, 1)).all() and np.isin(d, (0, 1)).all()):
        raise ValueError("labels and decisions must be 0 or 1")
    return ConfusionMatrix(
        tp=int(((y == 1) & (d == 1)).sum()),
        fp=int(((y == 0) & (d == 1)).sum()),
        tn=int(((y == 0) & (d == 0)).sum()),
        fn=int(((y == 1) & (d == 0)).sum()),
    )


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def exact_metrics(cm: ConfusionMatrix) -> dict[str, Fraction]:
    """Accuracy, precision, recall and F1 as exact fractions in [0, 1]."""
    if cm.total == 0:
        raise ValueError("metrics need at least one sample")
    p = _ratio(cm.tp, cm.tp + cm.fp)
    r = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return {"accuracy": Fraction(cm.tp + cm.tn, cm.total), "precision": p, "recall": r, "f1": f1}


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Percentages: acc = (tp+tn)/N, P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R)."""
    return Metrics(**{k: float(100 * v) for k, v in exact_metrics(cm).items()})


def mean_metrics(rows: Sequence[Metrics]) -> Metrics:
    """Unweighted mean across corpora."""
    if not rows:
        raise ValueError("no metrics to average")
    return Metrics(*(float(np.mean([getattr(m, k) for m in rows])) for k in ("accuracy", "precision", "recall", "f1")))


# ---------------------------------------------------------------------------
# reports


@dataclass
class CorpusResult:
    confusion: ConfusionMatrix
    metrics: Metrics


@dataclass
class EvalReport:
    corpora: dict[str, CorpusResult]
    average: Metrics | None
    detector_id: str = ""
    config_hash: str = ""
    timestamp: str = ""
    method: str = "CIPHER-Disc"
    excluded: list[str] = field(default_factory=list)

    def to_dict(self, with_timestamp: bool = True) -> dict:
        d = {
            "method": self.method,
            "detector_id": self.detector_id,
            "config_hash": self.config_hash,
            "corpora": {k: {"confusion": asdict(v.confusion), "metrics": asdict(v.metrics)} for k, v in self.corpora.items()},
            "average": asdict(self.average) if self.average else None,
            "excluded": list(self.excluded),
        }
        if with_timestamp:
            d["timestamp"] = self.timestamp
        return d

    def to_json(self, with_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamp), indent=2) + "\n"


def build_report(results: Mapping[str, CorpusResult], excluded: Sequence[str] = (), **kw) -> EvalReport:
    average = mean_metrics([r.metrics for r in results.values()]) if results else None
    kw.setdefault("timestamp", datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ"))
    return EvalReport(dict(results), average, excluded=list(excluded), **kw)


def evaluate_cross(
    corpora: Mapping[str, LabeledDataset],
    detector,
    threshold: float = 0.5,
    **report_fields,
) -> EvalReport:
    """Score each corpus with ``detector`` and average the metrics across corpora.

    ``detector`` needs a ``resolution`` attribute and a
    ``fake_probability(images)`` method (see :class:`cipher.detector.Detector`).
    Empty corpora are skipped with a warning and listed in ``excluded``.
    """
    results: dict[str, CorpusResult] = {}
    excluded = []
    for name, ds in corpora.items():
        images, labels, skipped = cached_tensors(ds, detector.resolution)
        for p in skipped:
            log.warning("corpus %s: skipped unreadable %s", name, p)
        if len(images) == 0:
            log.warning("corpus %s is empty; excluded from the report", name)
            excluded.append(name)
            continue
        probs = detector.fake_probability(images)
        decisions = (probs >= threshold).long().numpy()
        cm = confusion(labels.long().numpy(), decisions)
        results[name] = CorpusResult(cm, metrics(cm))
    return build_report(results, excluded, **report_fields)


# ---------------------------------------------------------------------------
# tables


def round_half_up(x: float, places: int = 2) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class ResultTable:
    """Rows of (method -> per-corpus (Acc, F1)), columns in corpus order plus Average."""

    corpora: list[str]
    rows: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    @classmethod
    def from_reports(cls, reports: Sequence[EvalReport]) -> "ResultTable":
        if not reports:
            raise ValueError("no reports to tabulate")
        names = list(reports[0].corpora)
        table = cls(names)
        for rep in reports:
            if list(rep.corpora) != names:
                raise ValueError("all reports in one table must cover the same corpora in the same order")
            if rep.average is None:
                raise ValueError("cannot tabulate an empty report")
            row = {k: (v.metrics.accuracy, v.metrics.f1) for k, v in rep.corpora.items()}
            row["Average"] = (rep.average.accuracy, rep.average.f1)
            table.rows[rep.method] = row
        return table

    @property
    def columns(self) -> list[str]:
        return self.corpora + ["Average"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["method"] + [f"{c} {m}" for c in self.columns for m in ("Acc", "F1")])
        for method, row in self.rows.items():
            writer.writerow([method] + [round_half_up(v) for c in self.columns for v in row[c]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = self.columns
        lines = [
            "| Method | " + " | ".join(f"{c} Acc | {c} F1" for c in cols) + " |",
            "|---|" + "---:|" * (2 * len(cols)),
        ]
        for method, row in self.rows.items():
            lines.append("| " + method + " | " + " | ".join(round_half_up(v) for c in cols for v in row[c]) + " |")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "method":
            raise ValueError("not a result table CSV")
        header = rows[0][1:]
        if len(header) % 2:
            raise ValueError("result table needs Acc/F1 column pairs")
        cols = [h[: -len(" Acc")] for h in header[0::2]]
        if cols[-1] != "Average":
            raise ValueError("last column pair must be Average")
        table = cls(cols[:-1])
        for r in rows[1:]:
            vals = [float(v) for v in r[1:]]
            table.rows[r[0]] = {c: (vals[2 * i], vals[2 * i + 1]) for i, c in enumerate(cols)}
        return table


def emit_table(
    report: EvalReport | Sequence[EvalReport],
    fmt: str,
    path: str | Path,
) -> Path:
    """Write one row per method with (Acc, F1) per corpus and the Average, in ``csv`` or ``markdown``."""
    reports = [report] if isinstance(report, EvalReport) else list(report)
    table = ResultTable.from_reports(reports)
    if fmt == "csv":
        text = table.to_csv()
    elif fmt in ("md", "markdown"):
        text = table.to_markdown()
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


def parse_table(path: str | Path) -> ResultTable:
    with open(path, encoding="utf-8", newline="") as f:
        return ResultTable.from_csv(f.read())


# ---------------------------------------------------------------------------
# corpus registry


def load_registry(path: str | Path) -> dict[str, LabeledDataset]:
    """Read ``name<TAB>manifest`` lines; manifest paths are relative to the registry file."""
    path = Path(path)
    corpora: dict[str, LabeledDataset] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected name<TAB>manifest path")
        name, manifest = parts
        mpath = Path(manifest)
        if not mpath.is_absolute():
            mpath = path.parent / mpath
        if name in corpora:
            raise ValueError(f"{path}:{lineno}: duplicate corpus {name!r}")
        corpora[name] = LabeledDataset.load_manifest(mpath)
    return corpora


def write_registry(path: str | Path, entries: Mapping[str, str | Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}\t{v}\n" for k, v in entries.items()), encoding="utf-8")
    return path
