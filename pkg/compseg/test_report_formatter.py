import csv
import json

from compseg.formatters.report_formatter import ReportEntry, format_cell, format_table, write_reports
from compseg.services.metrics import MetricsReport, VolumeScores


def whole_report(dice, hd):
    per_volume = {f"v{i}": {"WT": VolumeScores(d, h)} for i, (d, h) in enumerate(zip(dice, hd))}
    return MetricsReport.from_scores("whole", per_volume)


def sub_report():
    per_volume = {
        "v0": {c: VolumeScores(80.0, 2.0) for c in ("ED", "ET", "NE")},
        "v1": {c: VolumeScores(90.0, None) for c in ("ED", "ET", "NE")},
    }
    return MetricsReport.from_scores("sub", per_volume)


def test_format_cell():
    assert format_cell(85.6412, 5.23) == "85.64_5.2"
    assert format_cell(None, None) == "n/a"


def test_format_cell_large_spread_stays_fixed_point():
    assert format_cell(10.0, 123.4) == "10.00_123"
    assert format_cell(10.0, 99.7) == "10.00_100"
    assert format_cell(10.0, 0.004) == "10.00_0.004"
    assert format_cell(10.0, None) == "10.00"


def test_whole_table_layout():
    entries = [
        ReportEntry("Compositional", 0.01, whole_report([90.0, 80.0], [2.0, 4.0])),
        ReportEntry("Compositional", 0.001, whole_report([70.0, 70.0], [6.0, 6.0])),
        ReportEntry("UNet", 0.01, whole_report([60.0, 50.0], [8.0, None])),
    ]
    lines = format_table(entries).splitlines()
    assert lines[0] == "| Method | Dice 0.1% | Dice 1% | HD95 0.1% | HD95 1% |"
    assert lines[2] == "| Compositional | 70.00_0 | 85.00_5 | 6.00_0 | 3.00_1 |"
    assert lines[3] == "| UNet | - | 55.00_5 | - | 8.00_0 |"


def test_sub_table_has_class_pairs():
    table = format_table([ReportEntry("Compositional w/ sub-region weak", 0.01, sub_report())])
    header = table.splitlines()[0]
    assert header == "| Method | ED Dice | ED HD95 | ET Dice | ET HD95 | NE Dice | NE HD95 |"
    assert "85.00_5" in table


def test_write_reports(tmp_path):
    entries = [ReportEntry("UNet", 1.0, whole_report([100.0, 50.0], [0.0, None]))]
    paths = write_reports(entries, tmp_path)
    rows = list(csv.DictReader(paths["csv"].open()))
    assert len(rows) == 2 and rows[1]["hd95"] == ""
    summary = json.loads(paths["summary"].read_text())
    assert summary[0]["classes"]["WT"]["hd95_excluded"] == 1
    assert paths["table"].read_text().startswith("| Method")
