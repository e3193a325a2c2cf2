"""Unit tests for CSV and Excel report export"""

import csv
import math
import tempfile
import time
from pathlib import Path

import pytest
from openpyxl import load_workbook

from stoch_future.gradcheck import GradCheckResult
from stoch_future.models import MetricReport
from stoch_future.report_exporter import (METRIC_HEADERS, SUMMARY_HEADERS, WORKBOOK_NAME,
                                          ReportExporter, read_metric_csv)


@pytest.fixture
def temp_output_dir():
    """Create temporary output directory"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir
        # Small delay to allow Windows to release file handles
        time.sleep(0.1)


@pytest.fixture
def exporter(temp_output_dir):
    return ReportExporter(output_directory=temp_output_dir)


@pytest.fixture
def reports():
    return [
        MetricReport('psnr', [[20.0, 22.0], [30.0, 32.0]]),
        MetricReport('psnr', [[math.inf, math.inf], [25.0, 25.0]], region='foreground'),
        MetricReport('ssim', [[0.9, 0.8], [0.7, 0.6]]),
    ]


def _rows(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.reader(handle))


def test_exporter_initialization(temp_output_dir):
    """Test output directory creation and formatting settings"""
    target = Path(temp_output_dir) / 'nested' / 'run'

    exporter = ReportExporter(output_directory=str(target))

    assert target.exists()
    assert exporter.header_bg_color == '4472C4'
    assert exporter.header_font_color == 'FFFFFF'
    assert exporter.max_column_width == 50


def test_metric_csv_rows(exporter, reports):
    """Test one row per sequence, frame, metric and region"""
    path = exporter.write_metric_csv(reports)
    rows = _rows(path)

    assert rows[0] == METRIC_HEADERS
    assert len(rows) == 1 + 3 * 4
    assert rows[1] == ['0', '0', 'psnr', 'full', '20.0']


def test_metric_csv_round_trip_with_infinity(exporter, reports):
    """Test that infinite PSNR is written as 'inf' and read back"""
    path = exporter.write_metric_csv(reports)

    rows = read_metric_csv(path)

    foreground = [r for r in rows if r['region'] == 'foreground']
    assert foreground[0]['value'] == math.inf
    assert foreground[2]['value'] == 25.0


def test_summary_csv(exporter, reports):
    """Test summary means, sequence counts and extra rows"""
    path = exporter.write_summary_csv(reports, extra={'seconds_per_frame': 0.5})
    rows = _rows(path)

    assert rows[0] == SUMMARY_HEADERS
    assert rows[1][:2] == ['psnr', 'full']
    assert float(rows[1][2]) == pytest.approx(26.0)
    assert rows[1][4:] == ['2', '4']
    assert rows[2][2] == 'inf'
    assert rows[-1][:3] == ['seconds_per_frame', 'full', '0.5']


def test_loss_trace_columns(exporter):
    """Test that the loss trace keeps step, phase and total first"""
    path = exporter.write_loss_trace([
        {'total': 1.5, 'step': 1, 'phase': 'train', 'kl': 0.5},
        {'step': 2, 'phase': 'train', 'total': 1.0, 'kl': 0.25, 'nll': 0.75},
    ])
    rows = _rows(path)

    assert rows[0] == ['step', 'phase', 'total', 'kl', 'nll']
    assert rows[1] == ['1', 'train', '1.5', '0.5', '']


def test_gradcheck_csv(exporter):
    """Test gradient check rows"""
    results = [GradCheckResult('add', 'primitive', 1e-9, True),
               GradCheckResult('model:svg', 'model', 0.2, False, 'too large')]

    rows = _rows(exporter.write_gradcheck_csv(results))

    assert rows[0] == ['name', 'category', 'max_rel_error', 'passed', 'error']
    assert rows[1][:2] == ['add', 'primitive']
    assert rows[2][3] == 'False'


def test_workbook_sheets_and_header_format(exporter, reports):
    """Test the summary sheet, one sheet per metric and header styling"""
    path = exporter.create_workbook(reports, extra={'seconds_per_frame': 0.5})

    assert Path(path).name == WORKBOOK_NAME
    wb = load_workbook(path)
    assert wb.sheetnames == ['Summary', 'psnr', 'ssim']
    summary = wb['Summary']
    assert summary['A1'].value == 'Metric'
    assert summary['A1'].font.bold
    assert summary['A1'].fill.start_color.rgb.endswith('4472C4')
    # infinite means are stored as text
    assert summary['C3'].value == 'inf'
    psnr = wb['psnr']
    assert [c.value for c in psnr[1]] == ['Sequence', 'full', 'foreground']
    assert psnr['B2'].value == pytest.approx(21.0)
    wb.close()


def test_sanitize_sheet_name(exporter):
    """Test removal of characters Excel forbids and the length limit"""
    assert exporter.sanitize_sheet_name('abs/rel[1]') == 'abs_rel_1_'
    assert len(exporter.sanitize_sheet_name('x' * 40)) == 31
    assert exporter.sanitize_sheet_name('::') == '__'
