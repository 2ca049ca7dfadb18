"""
One-pass evaluation: precision and success curves, AUC, FPS, CSV reports and SVG plots.
"""

import logging
from dataclasses import dataclass

import matplotlib
import numpy as np
import unicodecsv

from drmim.exception import ContractError
from drmim.loss import box_iou

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position

LOG = logging.getLogger(__name__)

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_HEADLINE = 20
REPORT_HEADER = ('sequence', 'frames', 'precision20', 'auc', 'fps')
REPORT_NOTE = (
    '# precision: center error <= threshold px (headline 20 px); '
    'success: IoU > threshold over 0:0.05:1; auc: mean success'
)
OVERALL = 'overall'

matplotlib.rcParams['svg.hashsalt'] = 'drmim'


def _as_boxes(boxes):
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def _check_lengths(pred_boxes, gt_boxes):
    pred, gt = _as_boxes(pred_boxes), _as_boxes(gt_boxes)
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    if len(gt) == 0:
        raise ContractError("No boxes to evaluate")
    return pred, gt


def to_corners(boxes):
    boxes = _as_boxes(boxes)
    return np.stack([boxes[:, 0], boxes[:, 1], boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3]], axis=1)


def center_errors(pred_boxes, gt_boxes):
    pred, gt = _check_lengths(pred_boxes, gt_boxes)
    pred_centers = pred[:, :2] + pred[:, 2:] / 2.0
    gt_centers = gt[:, :2] + gt[:, 2:] / 2.0
    return np.sqrt(np.sum((pred_centers - gt_centers) ** 2, axis=1))


def overlaps(pred_boxes, gt_boxes):
    pred, gt = _check_lengths(pred_boxes, gt_boxes)
    return box_iou(to_corners(pred), to_corners(gt))


def precision_curve(pred_boxes, gt_boxes):
    """
    Fraction of frames with center error <= each threshold (0..50 px). Returns (curve, precision@20).
    """
    errors = center_errors(pred_boxes, gt_boxes)
    curve = np.array([np.mean(errors <= threshold) for threshold in PRECISION_THRESHOLDS])
    return curve, float(curve[PRECISION_HEADLINE])


def success_auc(pred_boxes, gt_boxes):
    """
    Fraction of frames with IoU strictly above each threshold (0, 0.05, .., 1). Returns (curve, auc).
    """
    ious = overlaps(pred_boxes, gt_boxes)
    curve = np.array([np.mean(ious > threshold) for threshold in SUCCESS_THRESHOLDS])
    return curve, float(curve.mean())


def fps_report(update_times):
    """
    Timed frames divided by their summed wall time.
    """
    times = np.asarray(list(update_times), dtype=np.float64)
    if times.size == 0 or times.sum() <= 0:
        raise ContractError("FPS needs at least one timed frame with positive duration")
    return float(times.size / times.sum())


@dataclass
class EvalResult:
    sequence: str
    frames: int
    precision: np.ndarray
    success: np.ndarray
    precision20: float
    auc: float
    fps: float

    def as_row(self):
        return [self.sequence, str(self.frames), f'{self.precision20:.6f}', f'{self.auc:.6f}', f'{self.fps:.3f}']


def evaluate_sequence(name, pred_boxes, gt_boxes, fps=float('nan')):
    precision, precision20 = precision_curve(pred_boxes, gt_boxes)
    success, auc = success_auc(pred_boxes, gt_boxes)
    return EvalResult(name, len(_as_boxes(gt_boxes)), precision, success, precision20, auc, fps)


def overall_result(results):
    """
    Per-sequence curves averaged with equal weight.
    """
    if not results:
        raise ContractError("No sequences to summarize")
    precision = np.mean([result.precision for result in results], axis=0)
    success = np.mean([result.success for result in results], axis=0)
    fps_values = [result.fps for result in results if np.isfinite(result.fps)]
    return EvalResult(
        sequence=OVERALL,
        frames=sum(result.frames for result in results),
        precision=precision,
        success=success,
        precision20=float(precision[PRECISION_HEADLINE]),
        auc=float(success.mean()),
        fps=float(np.mean(fps_values)) if fps_values else float('nan'),
    )


def write_table(path, header, rows, note=None):
    with open(path, 'wb') as handle:
        if note:
            handle.write((note + '\n').encode('utf-8'))
        writer = unicodecsv.writer(handle, encoding='utf-8', lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_report(path, results):
    """
    Per-sequence rows followed by the overall row.
    """
    rows = [result.as_row() for result in results] + [overall_result(results).as_row()]
    write_table(path, REPORT_HEADER, rows, note=REPORT_NOTE)
    LOG.info("Wrote report for %d sequences to %s", len(results), path)


def _plot(path, x_values, curves, title, xlabel, ylabel):
    figure, axes = plt.subplots(figsize=(5, 4))
    for label, curve in curves:
        axes.plot(x_values, curve, label=label)
    axes.set_title(title)
    axes.set_xlabel(xlabel)
    axes.set_ylabel(ylabel)
    axes.set_xlim(x_values[0], x_values[-1])
    axes.set_ylim(0.0, 1.05)
    axes.grid(True, linestyle=':')
    axes.legend(loc='lower right' if 'Precision' in title else 'lower left', fontsize='small')
    figure.tight_layout()
    figure.savefig(path, format='svg', metadata={'Date': None})
    plt.close(figure)


def plot_precision(path, results):
    curves = [(f'{result.sequence} [{result.precision20:.3f}]', result.precision) for result in results]
    _plot(path, PRECISION_THRESHOLDS, curves, 'Precision plots of OPE', 'Location error threshold (px)',
          'Precision')


def plot_success(path, results):
    curves = [(f'{result.sequence} [{result.auc:.3f}]', result.success) for result in results]
    _plot(path, SUCCESS_THRESHOLDS, curves, 'Success plots of OPE', 'Overlap threshold', 'Success rate')
