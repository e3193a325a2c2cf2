"""Loss curves, per-frame metric plots and sample grids rendered to PNG"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from stoch_future.imageio import frame_to_2d, tile_frames  # noqa: E402
from stoch_future.report_exporter import read_loss_trace, read_metric_csv  # noqa: E402


def plot_loss_trace(trace_path: str, output_path: str) -> str:
    """
    Plot the total loss and every term of a loss trace against the step

    Args:
        trace_path: CSV written by the trainer
        output_path: PNG destination

    Returns:
        Path written
    """
    rows = read_loss_trace(trace_path)
    fig, ax = plt.subplots(figsize=(8, 5))
    if rows:
        steps = [row['step'] for row in rows]
        columns = [c for c in rows[0] if c not in ('step', 'phase')]
        for column in columns:
            values = [row.get(column, np.nan) for row in rows]
            ax.plot(steps, values, label=column, linewidth=2.0 if column == 'total' else 1.0)
        pretrain = [row['step'] for row in rows if row.get('phase') == 'pretrain']
        if pretrain:
            ax.axvline(max(pretrain) + 0.5, color='gray', linestyle='--', label='fine-tuning')
        ax.legend(fontsize='small')
    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.set_title(Path(trace_path).name)
    return _save(fig, output_path)


def metric_curves(metric_path: str) -> Dict[str, Dict[int, float]]:
    """Mean over sequences per (metric/region, frame) from a metric CSV"""
    sums: Dict[str, Dict[int, List[float]]] = {}
    for row in read_metric_csv(metric_path):
        key = f"{row['metric']}/{row['region']}"
        sums.setdefault(key, {}).setdefault(row['frame'], []).append(row['value'])
    return {key: {frame: float(np.mean(values)) for frame, values in sorted(frames.items())}
            for key, frames in sums.items()}


def plot_metric_curves(metric_path: str, output_directory: str) -> List[str]:
    """One PNG per metric with a line per region; infinite values are skipped"""
    curves = metric_curves(metric_path)
    by_metric: Dict[str, List[str]] = {}
    for key in curves:
        by_metric.setdefault(key.split('/')[0], []).append(key)

    written = []
    for metric, keys in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in keys:
            frames = list(curves[key])
            values = np.array([curves[key][f] for f in frames])
            finite = np.isfinite(values)
            ax.plot(np.array(frames)[finite] + 1, values[finite], marker='o',
                    label=key.split('/', 1)[1])
        ax.set_xlabel('predicted frame')
        ax.set_ylabel(metric)
        ax.legend(fontsize='small')
        written.append(_save(fig, str(Path(output_directory) / f'metric_{metric}.png')))
    return written


def plot_sample_grid(rows: Sequence[Sequence[np.ndarray]], output_path: str,
                     labels: Optional[Sequence[str]] = None) -> str:
    """Rows of frames ([C, H, W] or [H, W]) as a PNG grid in [0, 1]"""
    fig, axes = plt.subplots(len(rows), 1, figsize=(max(4, len(rows[0])), 1.5 * len(rows)),
                             squeeze=False)
    for i, row in enumerate(rows):
        ax = axes[i, 0]
        ax.imshow(tile_frames([frame_to_2d(f) for f in row]), cmap='gray', vmin=0.0, vmax=1.0)
        ax.set_xticks([])
        ax.set_yticks([])
        if labels:
            ax.set_ylabel(labels[i], rotation=0, ha='right', va='center', fontsize='small')
    return _save(fig, output_path)


def _save(fig, output_path: str) -> str:
    target = Path(output_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(target, dpi=100)
    plt.close(fig)
    return str(target)
