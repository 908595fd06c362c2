import json
import random
from fractions import Fraction

import numpy as np
import pytest
import torch

from cipher.dataio import Item, LabeledDataset, save_png
from cipher.evalharness import (
    ConfusionMatrix,
    CorpusResult,
    ResultTable,
    build_report,
    confusion,
    emit_table,
    evaluate_cross,
    exact_metrics,
    load_registry,
    mean_metrics,
    metrics,
    parse_table,
    round_half_up,
    write_registry,
)


def brute_force_metrics(labels, decisions):
    """Per-sample tally and textbook formulas in exact rationals; degenerate ratios are 0."""
    tp = fp = tn = fn = 0
    for y, d in zip(labels, decisions):
        if y == 1 and d == 1:
            tp += 1
        elif y == 0 and d == 1:
            fp += 1
        elif y == 0 and d == 0:
            tn += 1
        else:
            fn += 1
    acc = Fraction(tp + tn, len(labels))
    precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
    return (tp, fp, tn, fn), {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1}


def random_vectors(rng, i):
    n = int(rng.integers(1, 60))
    kind = i % 5
    if kind == 0:  # nothing predicted fake
        return rng.integers(0, 2, n), np.zeros(n, dtype=int)
    if kind == 1:  # no fake labels
        return np.zeros(n, dtype=int), rng.integers(0, 2, n)
    if kind == 2:  # all real, all predicted real
        return np.zeros(n, dtype=int), np.zeros(n, dtype=int)
    return rng.integers(0, 2, n), rng.integers(0, 2, n)


def test_confusion_examples():
    assert confusion([1, 0, 1, 0], [1, 0, 1, 0]) == ConfusionMatrix(tp=2, fp=0, tn=2, fn=0)
    assert confusion([1, 1, 0], [1, 0, 0]) == ConfusionMatrix(tp=1, fp=0, tn=1, fn=1)
    assert confusion([0] * 5, [1] * 5) == ConfusionMatrix(tp=0, fp=5, tn=0, fn=0)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([1, 0], [1])
    with pytest.raises(ValueError):
        confusion([], [])
    with pytest.raises(ValueError):
        confusion([2], [1])
    with pytest.raises(ValueError):
        ConfusionMatrix(tp=-1)


def test_metric_examples():
    perfect = metrics(ConfusionMatrix(tp=3, fp=0, tn=4, fn=0))
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (100.0, 100.0, 100.0, 100.0)
    m = metrics(ConfusionMatrix(tp=1, fp=1, tn=0, fn=0))
    assert (m.precision, m.recall) == (50.0, 100.0)
    assert round_half_up(m.f1) == "66.67"
    zero = metrics(ConfusionMatrix(tp=0, fp=3, tn=47, fn=50))
    assert zero.f1 == 0.0 and round_half_up(zero.f1) == "0.00"
    assert zero.accuracy == 47.0


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for i in range(1000):
        labels, decisions = random_vectors(rng, i)
        counts, oracle = brute_force_metrics(labels.tolist(), decisions.tolist())
        cm = confusion(labels, decisions)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == counts
        assert exact_metrics(cm) == oracle
        m = metrics(cm)
        for key, value in oracle.items():
            assert getattr(m, key) == float(100 * value)


def test_f1_between_precision_and_recall():
    rng = np.random.default_rng(1)
    for _ in range(500):
        labels, decisions = rng.integers(0, 2, 30), rng.integers(0, 2, 30)
        m = exact_metrics(confusion(labels, decisions))
        if m["precision"] and m["recall"]:
            assert min(m["precision"], m["recall"]) <= m["f1"] <= max(m["precision"], m["recall"])


def test_averages():
    a = metrics(ConfusionMatrix(tp=3, fp=2, tn=3, fn=2))
    assert mean_metrics([a]) == a
    r60 = CorpusResult(ConfusionMatrix(tp=3, fp=2, tn=3, fn=2), metrics(ConfusionMatrix(tp=3, fp=2, tn=3, fn=2)))
    r80 = CorpusResult(ConfusionMatrix(tp=4, fp=1, tn=4, fn=1), metrics(ConfusionMatrix(tp=4, fp=1, tn=4, fn=1)))
    report = build_report({"a": r60, "b": r80})
    assert report.average.accuracy == pytest.approx(70.0)


@pytest.mark.parametrize("value,text", [(68.666666, "68.67"), (2 / 3 * 100, "66.67"), (0.125, "0.13"),
                                        (0.0, "0.00"), (100.0, "100.00"), (12.345, "12.35")])
def test_half_up_rounding(value, text):
    assert round_half_up(value) == text


def _report(names, seed=0):
    rng = np.random.default_rng(seed)
    results = {}
    for name in names:
        cm = confusion(rng.integers(0, 2, 37), rng.integers(0, 2, 37))
        results[name] = CorpusResult(cm, metrics(cm))
    return build_report(results, method="CIPHER-Disc", timestamp="t")


def test_csv_round_trip_and_fixed_point(tmp_path):
    report = _report(["A", "B", "C"])
    first = emit_table(report, "csv", tmp_path / "a.csv")
    table = parse_table(first)
    for name, res in report.corpora.items():
        acc, f1 = table.rows["CIPHER-Disc"][name]
        assert abs(acc - res.metrics.accuracy) <= 0.005 and abs(f1 - res.metrics.f1) <= 0.005
    assert table.columns == ["A", "B", "C", "Average"]
    second = tmp_path / "b.csv"
    second.write_text(table.to_csv(), newline="")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().splitlines()[0] == b"method,A Acc,A F1,B Acc,B F1,C Acc,C F1,Average Acc,Average F1"


def test_markdown_layout(tmp_path):
    reports = [_report(["A", "B"], seed=s) for s in (0, 1)]
    reports[1].method = "Other"
    path = emit_table(reports, "markdown", tmp_path / "t.md")
    lines = path.read_text().splitlines()
    assert lines[0] == "| Method | A Acc | A F1 | B Acc | B F1 | Average Acc | Average F1 |"
    assert len(lines) == 2 + 2
    assert lines[2].startswith("| CIPHER-Disc |") and lines[3].startswith("| Other |")
    assert all(line.count("|") == 8 for line in lines)


def test_table_rejects_bad_format(tmp_path):
    with pytest.raises(ValueError):
        emit_table(_report(["A"]), "xlsx", tmp_path / "x")


class ThresholdStub:
    """Scores an image by its mean brightness, mapped to [0, 1]."""

    resolution = 8

    def fake_probability(self, images):
        return (images.mean(dim=(1, 2, 3)) + 1) / 2


def _corpus(root, name, n, seed):
    rng = np.random.default_rng(seed)
    d = root / name
    d.mkdir(parents=True)
    items = []
    for i in range(n):
        label = int(rng.integers(0, 2))
        centre = rng.uniform(0.0, 0.8) * (1 if label else -1)
        save_png(torch.full((3, 8, 8), float(centre)), d / f"{i}.png")
        items.append(Item(f"{i}.png", label, "test"))
    ds = LabeledDataset(items, d)
    ds.save_manifest(d / "manifest.tsv")
    return ds


def test_evaluate_cross_nine_corpora_registry(tmp_path):
    names = ["UADFV", "StarGAN", "StarGANv2", "StyleCLIP", "OpenForensics", "Inpainting", "Insight", "CIFAKE",
             "DALL-E3"]
    for i, name in enumerate(names):
        _corpus(tmp_path, name, 12, i)
    registry = write_registry(tmp_path / "registry.tsv", {n: f"{n}/manifest.tsv" for n in names})
    corpora = load_registry(registry)
    assert list(corpora) == names
    report = evaluate_cross(corpora, ThresholdStub(), detector_id="stub", config_hash="h")
    table = ResultTable.from_reports([report])
    assert table.columns == names + ["Average"]
    mean_acc = sum(r.metrics.accuracy for r in report.corpora.values()) / 9
    assert report.average.accuracy == pytest.approx(mean_acc)
    data = json.loads(report.to_json())
    assert data["detector_id"] == "stub" and set(data["corpora"]) == set(names)


def test_evaluate_cross_single_corpus_and_empty_exclusion(tmp_path, caplog):
    ds = _corpus(tmp_path, "one", 10, 0)
    empty = LabeledDataset([], tmp_path)
    report = evaluate_cross({"one": ds, "none": empty}, ThresholdStub())
    assert list(report.corpora) == ["one"]
    assert report.excluded == ["none"]
    assert report.average == report.corpora["one"].metrics
    assert "none" in caplog.text


def test_evaluate_cross_ignores_sample_order(tmp_path):
    ds = _corpus(tmp_path, "c", 20, 3)
    shuffled = LabeledDataset(random.Random(0).sample(ds.items, len(ds.items)), ds.root)
    a = evaluate_cross({"c": ds}, ThresholdStub(), timestamp="x")
    b = evaluate_cross({"c": shuffled}, ThresholdStub(), timestamp="x")
    assert a.to_json() == b.to_json()


def test_registry_errors(tmp_path):
    bad = tmp_path / "r.tsv"
    bad.write_text("just-a-name\n")
    with pytest.raises(ValueError):
        load_registry(bad)
