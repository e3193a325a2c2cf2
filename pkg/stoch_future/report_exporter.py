"""CSV and Excel export of metrics and loss traces"""

import csv
import math
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from stoch_future.models import LossBreakdown, MetricReport

METRIC_HEADERS = ['sequence', 'frame', 'metric', 'region', 'value']
SUMMARY_HEADERS = ['metric', 'region', 'mean', 'ci95', 'sequences', 'frames']
WORKBOOK_NAME = 'metrics_summary.xlsx'


def _format_value(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return repr(value)
    return str(value)


class ReportExporter:
    """Writes metric CSVs, loss traces and the summary workbook"""

    def __init__(self, output_directory: str = './Runs'):
        """
        Initialize Report Exporter

        Args:
            output_directory: Directory for output files
        """
        self.output_directory = Path(output_directory)
        self.output_directory.mkdir(parents=True, exist_ok=True)

        # Excel formatting settings
        self.header_bg_color = '4472C4'
        self.header_font_color = 'FFFFFF'
        self.max_column_width = 50

    def write_metric_csv(self, reports: Sequence[MetricReport],
                         filename: str = 'metrics.csv') -> str:
        """
        One row per (sequence, frame, metric, region)

        Returns:
            Path to the CSV file
        """
        path = self.output_directory / filename
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(METRIC_HEADERS)
            for report in reports:
                for seq, values in enumerate(report.per_frame):
                    for frame, value in enumerate(values):
                        writer.writerow([seq, frame, report.name, report.region,
                                         _format_value(float(value))])
        return str(path)

    def write_summary_csv(self, reports: Sequence[MetricReport],
                          extra: Optional[Dict[str, float]] = None,
                          filename: str = 'summary.csv') -> str:
        """
        Mean and 95% half-width per metric and region

        Args:
            reports: Metric reports
            extra: Additional scalar rows (e.g. seconds per frame)
            filename: Output name

        Returns:
            Path to the CSV file
        """
        path = self.output_directory / filename
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(SUMMARY_HEADERS)
            for report in reports:
                summary = report.get_summary()
                writer.writerow([summary['metric'], summary['region'],
                                 _format_value(summary['mean']), _format_value(summary['ci95']),
                                 summary['sequences'], summary['frames']])
            for name, value in sorted((extra or {}).items()):
                writer.writerow([name, 'full', _format_value(float(value)), '0.0', 0, 0])
        return str(path)

    def write_loss_trace(self, rows: Iterable[Dict[str, object]],
                         filename: str = 'loss_trace.csv') -> str:
        """Write training rows (step, phase, total, terms...) with a stable column order"""
        rows = list(rows)
        path = self.output_directory / filename
        columns = ['step', 'phase', 'total']
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_value(row[c]) if c in row else '' for c in columns])
        return str(path)

    def write_gradcheck_csv(self, results: Sequence[object],
                            filename: str = 'gradcheck.csv') -> str:
        """One row per finite-difference check (name, category, error, passed)"""
        path = self.output_directory / filename
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['name', 'category', 'max_rel_error', 'passed', 'error'])
            for result in results:
                row = result.to_dict()
                writer.writerow([row['name'], row['category'],
                                 _format_value(float(row['max_rel_error'])),
                                 row['passed'], row['error']])
        return str(path)

    def create_workbook(self, reports: Sequence[MetricReport],
                        extra: Optional[Dict[str, float]] = None,
                        filename: str = WORKBOOK_NAME) -> str:
        """
        Summary sheet plus one sheet of per-sequence values per metric

        Returns:
            Path to created workbook file
        """
        wb = Workbook()
        if 'Sheet' in wb.sheetnames:
            wb.remove(wb['Sheet'])

        self.create_summary_sheet(wb, reports, extra)
        by_metric: Dict[str, List[MetricReport]] = {}
        for report in reports:
            by_metric.setdefault(report.name, []).append(report)
        for name, group in by_metric.items():
            self.create_metric_sheet(wb, name, group)

        filepath = self.output_directory / filename
        wb.save(filepath)
        return str(filepath)

    def create_summary_sheet(self, wb: Workbook, reports: Sequence[MetricReport],
                             extra: Optional[Dict[str, float]] = None) -> None:
        ws = wb.create_sheet('Summary', 0)
        headers = ['Metric', 'Region', 'Mean', 'CI95', 'Sequences', 'Frames']
        ws.append(headers)
        self.apply_formatting(ws, len(headers))
        for report in reports:
            s = report.get_summary()
            ws.append([s['metric'], s['region'], _cell(s['mean']), _cell(s['ci95']),
                       s['sequences'], s['frames']])
        for name, value in sorted((extra or {}).items()):
            ws.append([name, 'full', _cell(float(value)), 0.0, 0, 0])
        self.auto_adjust_columns(ws)

    def create_metric_sheet(self, wb: Workbook, name: str, reports: Sequence[MetricReport]) -> None:
        ws = wb.create_sheet(self.sanitize_sheet_name(name))
        headers = ['Sequence'] + [r.region for r in reports]
        ws.append(headers)
        self.apply_formatting(ws, len(headers))
        count = max(r.sequence_count for r in reports)
        for seq in range(count):
            row = [seq]
            for report in reports:
                values = report.per_sequence
                row.append(_cell(values[seq]) if seq < len(values) else None)
            ws.append(row)
        self.auto_adjust_columns(ws)

    def sanitize_sheet_name(self, name: str) -> str:
        r"""
        Excel sheet names cannot contain \ / ? * [ ] : and are at most 31 characters
        """
        sanitized = re.sub(r'[\\/*?:\[\]]', '_', name)[:31].strip('. ')
        return sanitized or 'Metric'

    def apply_formatting(self, ws, num_columns: int) -> None:
        """
        Apply formatting to header row

        Args:
            ws: Worksheet object
            num_columns: Number of columns to format
        """
        header_fill = PatternFill(start_color=self.header_bg_color,
                                  end_color=self.header_bg_color,
                                  fill_type='solid')
        header_font = Font(color=self.header_font_color, bold=True)
        header_alignment = Alignment(horizontal='left', vertical='center')

        for col in range(1, num_columns + 1):
            cell = ws.cell(row=1, column=col)
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = header_alignment

    def auto_adjust_columns(self, ws) -> None:
        """Column width from the longest value, capped at max_column_width"""
        for column in ws.columns:
            max_length = 0
            column_letter = get_column_letter(column[0].column)
            for cell in column:
                if cell.value is not None:
                    max_length = max(max_length, len(str(cell.value)))
            ws.column_dimensions[column_letter].width = min(max_length + 2, self.max_column_width)


def _cell(value: float):
    """Workbook cells cannot hold infinities"""
    if isinstance(value, float) and not math.isfinite(value):
        return _format_value(value)
    return value


def read_metric_csv(path: str) -> List[Dict[str, object]]:
    """Rows of a metric CSV with typed fields"""
    rows = []
    with open(path, newline='', encoding='utf-8') as handle:
        for row in csv.DictReader(handle):
            rows.append({'sequence': int(row['sequence']), 'frame': int(row['frame']),
                         'metric': row['metric'], 'region': row['region'],
                         'value': float(row['value'])})
    return rows


def read_summary_csv(path: str) -> List[Dict[str, object]]:
    rows = []
    with open(path, newline='', encoding='utf-8') as handle:
        for row in csv.DictReader(handle):
            rows.append({'metric': row['metric'], 'region': row['region'],
                         'mean': float(row['mean']), 'ci95': float(row['ci95']),
                         'sequences': int(row['sequences']), 'frames': int(row['frames'])})
    return rows


def read_loss_trace(path: str) -> List[Dict[str, object]]:
    rows = []
    with open(path, newline='', encoding='utf-8') as handle:
        for row in csv.DictReader(handle):
            typed = {}
            for key, value in row.items():
                if key == 'phase':
                    typed[key] = value
                elif key == 'step':
                    typed[key] = int(value)
                elif value != '':
                    typed[key] = float(value)
            rows.append(typed)
    return rows


def breakdown_row(step: int, phase: str, breakdown: LossBreakdown) -> Dict[str, object]:
    row: Dict[str, object] = {'step': step, 'phase': phase}
    row.update(breakdown.to_dict())
    return row
