"""
One-pass online tracking with a trained network.

The template branch runs once at initialization; each update crops a search
region around the previous box, correlates it with the stored template
kernels and decodes the best-scoring cell into a frame box.
"""

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from drmim import core, model
from drmim.data import (
    CONTEXT_AMOUNT,
    box_center,
    crop_tensor,
    read_frame,
    search_transform,
    template_transform,
    write_boxes
)
from drmim.evaluation import fps_report
from drmim.exception import ContractError
from drmim.loss import ScoreGrid

LOG = logging.getLogger(__name__)

MIN_BOX_SIZE = 2.0


@dataclass(frozen=True)
class TrackerConfig:
    window_influence: float = 0.3
    size_lr: float = 0.6
    penalty_k: float = 0.04
    context_amount: float = CONTEXT_AMOUNT


@dataclass
class TrackerState:
    kernels: dict
    center: tuple
    size: tuple
    window: np.ndarray
    config: TrackerConfig

    @property
    def box(self):
        (cx, cy), (w, h) = self.center, self.size
        return np.array([cx - w / 2.0, cy - h / 2.0, w, h])


@dataclass
class TrackResult:
    boxes: np.ndarray
    update_times: list

    @property
    def fps(self):
        return fps_report(self.update_times)


def cosine_window(size):
    window = np.outer(np.hanning(size), np.hanning(size))
    return window / window.max()


def _frame_mean(frame):
    return frame.reshape(-1, frame.shape[-1]).mean(axis=0)


def template_kernels(params, template):
    """
    Post-neck template features for both tasks.
    """
    related = model.identity_features(params, model.backbone_forward(params, template))
    return {task: model.neck(params, task, 'z', related) for task in model.TASKS}


def search_outputs(params, kernels, search):
    related = model.identity_features(params, model.backbone_forward(params, search))
    coupled = {
        task: model.correlate(kernels[task], model.neck(params, task, 'x', related)) for task in model.TASKS
    }
    return model.head_forward(params, coupled['cls'], coupled['reg'])


def init(frame, box, params, config=None):
    config = config if config is not None else TrackerConfig()
    x, y, w, h = (float(value) for value in box)
    if w < MIN_BOX_SIZE or h < MIN_BOX_SIZE:
        raise ContractError(f"Initial box {list(box)} is smaller than {MIN_BOX_SIZE}px")
    spec = params.spec
    transform = template_transform((x, y, w, h), spec.template_size, config.context_amount)
    with core.no_grad():
        template = crop_tensor(frame, transform, _frame_mean(frame))
        kernels = template_kernels(params, template)
    return TrackerState(
        kernels=kernels,
        center=box_center((x, y, w, h)),
        size=(w, h),
        window=cosine_window(spec.score_size),
        config=config,
    )


def _change(ratio):
    return np.maximum(ratio, 1.0 / ratio)


def _padded_side(w, h):
    pad = (w + h) / 2.0
    return np.sqrt((w + pad) * (h + pad))


def scale_penalty(pred_w, pred_h, target_w, target_h, k):
    """
    exp(-(aspect change * scale change - 1) * k); 1 where nothing changes.
    """
    aspect_change = _change((target_w / target_h) / (pred_w / pred_h))
    size_change = _change(_padded_side(pred_w, pred_h) / _padded_side(target_w, target_h))
    return np.exp(-(aspect_change * size_change - 1.0) * k)


def select_peak(pscore, window, window_influence):
    """
    Index (row, col) of the best cell after blending in the cosine window.
    """
    blended = (1.0 - window_influence) * pscore + window_influence * window
    return np.unravel_index(int(np.argmax(blended)), blended.shape)


def update(state, frame, params):
    """
    Locate the target in ``frame``. Returns the new state and the (x, y, w, h) box.
    """
    config = state.config
    spec = params.spec
    transform = search_transform(state.center, state.box, spec.template_size, spec.search_size,
                                 config.context_amount)
    with core.no_grad():
        search = crop_tensor(frame, transform, _frame_mean(frame))
        head = search_outputs(params, state.kernels, search)

    cls = core.sigmoid(head.cls_logits).data[0]
    quality = core.sigmoid(head.quality_logits).data[0]
    left, top, right, bottom = head.reg_offsets.data

    coords = ScoreGrid.from_spec(spec).coordinates()
    px, py = coords[None, :], coords[:, None]
    pred_w, pred_h = left + right, top + bottom
    target_w, target_h = state.size[0] * transform.scale, state.size[1] * transform.scale
    penalty = scale_penalty(pred_w, pred_h, target_w, target_h, config.penalty_k)
    pscore = penalty * cls * quality

    row, col = select_peak(pscore, state.window, config.window_influence)
    center_x = px[0, col] + (right[row, col] - left[row, col]) / 2.0
    center_y = py[row, 0] + (bottom[row, col] - top[row, col]) / 2.0
    cx, cy = transform.point_to_frame(center_x, center_y)
    new_w = (1.0 - config.size_lr) * state.size[0] + config.size_lr * pred_w[row, col] / transform.scale
    new_h = (1.0 - config.size_lr) * state.size[1] + config.size_lr * pred_h[row, col] / transform.scale

    height, width = frame.shape[:2]
    cx = float(np.clip(cx, 0.0, width))
    cy = float(np.clip(cy, 0.0, height))
    new_w = float(np.clip(new_w, MIN_BOX_SIZE, width))
    new_h = float(np.clip(new_h, MIN_BOX_SIZE, height))

    new_state = replace(state, center=(cx, cy), size=(new_w, new_h))
    return new_state, new_state.box


def track_sequence(params, sequence, config=None):
    """
    Initialize on the first ground-truth box and update on every later frame.
    Only update calls are timed.
    """
    if len(sequence) < 2:
        raise ContractError("Tracking needs at least two frames")
    frames = sequence.frames
    first = _load(frames[0])
    state = init(first, sequence.boxes[0], params, config)
    boxes = [np.array(sequence.boxes[0], dtype=np.float64)]
    update_times = []
    for index in range(1, len(sequence)):
        frame = _load(frames[index])
        started = time.perf_counter()
        state, box = update(state, frame, params)
        update_times.append(time.perf_counter() - started)
        boxes.append(box)
    result = TrackResult(np.array(boxes), update_times)
    LOG.info("Tracked %s: %d frames at %.1f FPS", sequence.name, len(sequence), result.fps)
    return result


def _load(frame):
    if isinstance(frame, str):
        return read_frame(frame)
    return frame


def write_results(path, boxes):
    write_boxes(path, boxes)
