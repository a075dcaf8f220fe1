import json
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synthreid.dataset import DIMENSIONS, SCHEMA
from synthreid.errors import IoError
from synthreid.evaluation import EvalReport
from synthreid.report import NO_EVAL_CSV, bar_chart_svg, chart_values, emit_report, marked_values
from synthreid.style import DEFAULT_K, LossEntry, LossTable


def random_table(rng, absent=0.0):
    entries = {}
    for d in DIMENSIONS:
        row = []
        for v in SCHEMA.values(d):
            if rng.random() < absent:
                row.append(LossEntry(v, None, 0))
            else:
                row.append(LossEntry(v, float(rng.random() * 10.0 ** rng.integers(-8, 2)), int(rng.integers(1, 300))))
        entries[d] = tuple(row)
    return LossTable(entries)


def bars(svg):
    return re.findall(r'<rect class="bar"[^>]*>', svg)


def test_nine_backgrounds_k_marked():
    table = random_table(np.random.default_rng(0))
    svg = bar_chart_svg(table, "background", 3)
    rects = bars(svg)
    assert len(rects) == 9
    marked = [r for r in rects if 'data-marked="1"' in r]
    assert len(marked) == 3
    losses = table.losses("background")
    smallest = sorted(losses, key=lambda v: (losses[v], SCHEMA.index("background", v)))[:3]
    assert {re.search(r'data-label="([^"]*)"', r).group(1) for r in marked} == set(smallest)
    assert all('fill="#ff7f0e"' in r for r in marked)


def test_bars_in_schema_order_with_linear_heights():
    table = random_table(np.random.default_rng(1))
    svg = bar_chart_svg(table, "viewpoint", 6)
    rects = bars(svg)
    labels = [re.search(r'data-label="([^"]*)"', r).group(1) for r in rects]
    assert labels == [str(v) for v in SCHEMA.viewpoints]
    xs = [float(re.search(r' x="([^"]*)"', r).group(1)) for r in rects]
    assert xs == sorted(xs)
    heights = np.array([float(re.search(r'height="([^"]*)"', r).group(1)) for r in rects])
    losses = np.array([e.loss for e in table.entries["viewpoint"]])
    np.testing.assert_allclose(heights / heights.max(), losses / losses.max(), atol=0.01)


def test_absent_entries_are_drawn_as_gaps():
    table = random_table(np.random.default_rng(2), absent=0.5)
    svg = bar_chart_svg(table, "weather", 1)
    present = [e for e in table.entries["weather"] if e.present]
    assert len(bars(svg)) == len(present)
    assert svg.count(">absent<") == 7 - len(present)


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32))
def test_chart_values_equal_csv_values(seed):
    table = random_table(np.random.default_rng(seed), absent=0.1)
    csv_values = {}
    for line in table.to_csv().splitlines()[1:]:
        dim, value, loss, _ = line.split(",")
        if loss:
            csv_values.setdefault(dim, {})[value] = loss
    for dim in DIMENSIONS:
        assert chart_values(bar_chart_svg(table, dim, 1)) == csv_values.get(dim, {})


def test_emit_report_bundle(tmp_path):
    table = random_table(np.random.default_rng(3))
    report = EvalReport(0.5, {1: 0.5, 5: 1.0}, 4, 0)
    bundle = emit_report(table, report, tmp_path / "out", metadata={"seed": 3})
    assert bundle.loss_table.read_text() == table.to_csv()
    assert sorted(bundle.charts) == sorted(DIMENSIONS)
    assert bundle.eval_report.read_text() == report.to_csv()
    meta = json.loads(bundle.metadata.read_text())
    assert meta == {"k": DEFAULT_K, "seed": 3}
    for dim, path in bundle.charts.items():
        assert len(re.findall('data-marked="1"', path.read_text())) == DEFAULT_K[dim]


def test_empty_eval_writes_marker(tmp_path):
    bundle = emit_report(random_table(np.random.default_rng(4)), None, tmp_path)
    assert bundle.eval_report.read_text() == NO_EVAL_CSV == "metric,value\nno eval,\n"
    assert EvalReport.from_csv(NO_EVAL_CSV) is None


def test_report_is_bit_stable(tmp_path):
    table = random_table(np.random.default_rng(5))
    a = emit_report(table, None, tmp_path / "a")
    b = emit_report(table, None, tmp_path / "b")
    for name in ("loss_table.csv", "eval.csv", "metadata.json") + tuple(f"loss_{d}.svg" for d in DIMENSIONS):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_k_clipped_to_present_entries(tmp_path):
    table = random_table(np.random.default_rng(6), absent=0.8)
    bundle = emit_report(table, None, tmp_path)
    for dim, path in bundle.charts.items():
        n_present = sum(e.present for e in table.entries[dim])
        assert len(re.findall('data-marked="1"', path.read_text())) == min(DEFAULT_K[dim], n_present)


def test_marked_values_tie_break():
    table = LossTable({"weather": tuple(LossEntry(w, 1.0, 1) for w in SCHEMA.weathers)})
    assert marked_values(table, "weather", 2) == {"clear", "clouds"}


def test_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        emit_report(random_table(np.random.default_rng(7)), None, blocker)
