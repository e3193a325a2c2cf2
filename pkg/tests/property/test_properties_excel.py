"""Property-based tests for CSV and Excel report export"""

import math
import tempfile
from pathlib import Path

from hypothesis import given, settings, strategies as st
from openpyxl import load_workbook

from stoch_future.models import MetricReport
from stoch_future.report_exporter import ReportExporter, read_metric_csv

scores = st.one_of(st.floats(min_value=0.0, max_value=60.0), st.just(math.inf))


@st.composite
def metric_report_strategy(draw):
    """Generate a report of 1-4 sequences of 1-5 frames"""
    frames = draw(st.integers(min_value=1, max_value=5))
    sequences = draw(st.integers(min_value=1, max_value=4))
    per_frame = [draw(st.lists(scores, min_size=frames, max_size=frames))
                 for _ in range(sequences)]
    name = draw(st.sampled_from(['psnr', 'ssim', 'iou_short', 'vpq_mid', 'abs_rel']))
    region = draw(st.sampled_from(['full', 'fg', 'bg', 'near', 'far']))
    return MetricReport(name, per_frame, region)


@given(reports=st.lists(metric_report_strategy(), min_size=1, max_size=4))
@settings(max_examples=25, deadline=None)
def test_metric_csv_keeps_every_value(reports):
    """
    For any reports, the metric CSV holds one row per frame value, infinities included
    """
    with tempfile.TemporaryDirectory() as tmpdir:
        exporter = ReportExporter(output_directory=tmpdir)

        rows = read_metric_csv(exporter.write_metric_csv(reports))

    expected = [value for report in reports for values in report.per_frame for value in values]
    assert len(rows) == len(expected)
    assert [row['value'] for row in rows] == expected


@given(reports=st.lists(metric_report_strategy(), min_size=1, max_size=4))
@settings(max_examples=10, deadline=None)
def test_workbook_has_summary_and_metric_sheets(reports):
    """
    For any reports, the workbook has a Summary row per report and a sheet per metric
    """
    with tempfile.TemporaryDirectory() as tmpdir:
        exporter = ReportExporter(output_directory=tmpdir)
        filepath = exporter.create_workbook(reports)

        wb = load_workbook(filepath)
        sheetnames = list(wb.sheetnames)
        summary_rows = wb['Summary'].max_row
        wb.close()
        Path(filepath).unlink()

    assert sheetnames[0] == 'Summary'
    assert set(sheetnames[1:]) == {report.name for report in reports}
    assert summary_rows == len(reports) + 1


@given(name=st.text(min_size=1, max_size=60))
@settings(max_examples=100)
def test_sanitized_sheet_names_are_valid(name):
    """
    For any metric name, the sheet name is non-empty, at most 31 characters and free of
    characters Excel rejects
    """
    with tempfile.TemporaryDirectory() as tmpdir:
        sanitized = ReportExporter(output_directory=tmpdir).sanitize_sheet_name(name)

    assert 0 < len(sanitized) <= 31
    assert not any(ch in sanitized for ch in '\\/*?:[]')
