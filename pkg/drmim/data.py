"""
Tracking sequences: reading and writing PPM sequence directories, generating
synthetic sequences, cropping template/search regions and sampling training
tuples.

Frames are HxWx3 uint8 RGB arrays. Boxes are (x, y, w, h) with a top-left
origin in continuous pixel coordinates, where pixel i covers [i, i + 1).
"""

import logging
import math
import os
import re
from dataclasses import dataclass, field

import cv2
import numpy as np

from drmim.core import Tensor
from drmim.exception import ConfigurationError, ContractError, SequenceParseError

LOG = logging.getLogger(__name__)

GROUNDTRUTH_FILENAME = 'groundtruth.txt'
FRAME_PATTERN = re.compile(r'^(\d{6})\.ppm$')
CONTEXT_AMOUNT = 0.5
MAX_FRAME_GAP = 30
MAX_SHIFT = 16


@dataclass
class Sequence:
    name: str
    frames: list
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != len(self.boxes):
            raise ContractError(f"Sequence {self.name} has {len(self.frames)} frames but {len(self.boxes)} boxes")
        if np.any(self.boxes[:, 2:] <= 0):
            raise ContractError(f"Sequence {self.name} has a box without positive size")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SynthConfig:
    canvas_width: int = 320
    canvas_height: int = 240
    object_size_range: tuple = (28, 48)
    velocity_range: tuple = (1.0, 4.0)
    clutter: int = 12
    noise_sigma: float = 4.0
    drift_rate: float = 0.005
    occluder_probability: float = 0.02
    seed: int = 0
    length: int = 60


# Sequence directories.

def frame_filename(index):
    """
    File name of the zero-based frame ``index`` (frames are numbered from 1).
    """
    return f'{index + 1:06d}.ppm'


def parse_groundtruth(path):
    """
    One "x,y,w,h" line per frame; whitespace-separated values are accepted too.
    """
    boxes = []
    with open(path, encoding='utf-8') as handle:
        lines = handle.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    for line_number, line in enumerate(lines, start=1):
        fields = [value for value in re.split(r'[,\s]+', line.strip()) if value]
        if len(fields) != 4:
            raise SequenceParseError(path, line_number, f"expected 4 values, found {len(fields)}: {line!r}")
        try:
            box = [float(value) for value in fields]
        except ValueError:
            raise SequenceParseError(path, line_number, f"non-numeric value in {line!r}") from None
        if not all(math.isfinite(value) for value in box):
            raise SequenceParseError(path, line_number, f"non-finite value in {line!r}")
        if box[2] <= 0 or box[3] <= 0:
            raise SequenceParseError(path, line_number, f"box width and height must be positive: {line!r}")
        boxes.append(box)
    if not boxes:
        raise SequenceParseError(path, None, "no boxes")
    return np.array(boxes, dtype=np.float64)


def format_box(box):
    return ','.join(f'{float(value):.10g}' for value in box)


def write_boxes(path, boxes):
    with open(path, 'w', encoding='utf-8') as handle:
        for box in boxes:
            handle.write(format_box(box) + '\n')


def read_frame(path):
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise SequenceParseError(path, None, "unreadable image")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def load_sequence(directory, load_frames=True):
    """
    Read a sequence directory of numbered PPM frames plus groundtruth.txt.
    """
    groundtruth_path = os.path.join(directory, GROUNDTRUTH_FILENAME)
    if not os.path.isfile(groundtruth_path):
        raise SequenceParseError(groundtruth_path, None, "missing ground-truth file")
    boxes = parse_groundtruth(groundtruth_path)

    numbers = sorted(int(match.group(1)) for match in map(FRAME_PATTERN.match, os.listdir(directory)) if match)
    for expected, number in enumerate(numbers, start=1):
        if number != expected:
            raise SequenceParseError(os.path.join(directory, f'{expected:06d}.ppm'), None, "missing frame")
    if len(numbers) != len(boxes):
        raise SequenceParseError(
            groundtruth_path, None, f"{len(boxes)} boxes for {len(numbers)} frames in {directory}"
        )

    paths = [os.path.join(directory, frame_filename(index)) for index in range(len(numbers))]
    frames = [read_frame(path) for path in paths] if load_frames else paths
    name = os.path.basename(os.path.normpath(directory))
    LOG.debug("Loaded sequence %s: %d frames", name, len(frames))
    return Sequence(name, frames, boxes)


def save_sequence(sequence, directory):
    os.makedirs(directory, exist_ok=True)
    for index, frame in enumerate(sequence.frames):
        path = os.path.join(directory, frame_filename(index))
        if not cv2.imwrite(path, cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)):
            raise OSError(f"Could not write frame {path}")
    write_boxes(os.path.join(directory, GROUNDTRUTH_FILENAME), sequence.boxes)
    LOG.info("Wrote sequence %s (%d frames) to %s", sequence.name, len(sequence), directory)


# Synthetic sequences.

def _texture(rng, height, width):
    coarse = rng.integers(0, 256, size=(max(2, height // 6), max(2, width // 6), 3)).astype(np.uint8)
    texture = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_NEAREST).astype(np.float64)
    border = rng.integers(0, 256, size=3).astype(np.float64)
    texture[:2, :], texture[-2:, :], texture[:, :2], texture[:, -2:] = border, border, border, border
    return texture


def _background(rng, config):
    height, width = config.canvas_height, config.canvas_width
    corners = rng.integers(40, 216, size=(2, 2, 3)).astype(np.uint8)
    background = cv2.resize(corners, (width, height), interpolation=cv2.INTER_LINEAR).astype(np.float64)
    low, high = config.object_size_range
    for _ in range(config.clutter):
        w, h = rng.integers(low // 2, high + 1, size=2)
        x = int(rng.integers(0, max(1, width - w)))
        y = int(rng.integers(0, max(1, height - h)))
        background[y:y + h, x:x + w] = rng.integers(0, 256, size=3)
    return background


def _bounce(position, velocity, extent, size):
    position += velocity
    if position < 0:
        position, velocity = -position, -velocity
    if position + size > extent:
        position, velocity = 2 * (extent - size) - position, -velocity
    return min(max(position, 0.0), float(extent - size)), velocity


def generate_synthetic(config):
    """
    A textured object moving over a cluttered background, bouncing off the
    canvas edges, with slow appearance drift and occasional occluders.
    Deterministic given ``config.seed``.
    """
    low, high = config.object_size_range
    if low < 4 or low > high:
        raise ConfigurationError(f"Invalid object size range {config.object_size_range}")
    if high >= min(config.canvas_width, config.canvas_height):
        raise ConfigurationError(
            f"Objects up to {high}px do not fit a {config.canvas_width}x{config.canvas_height} canvas"
        )
    if config.length < 1:
        raise ConfigurationError("Sequences need at least one frame")

    rng = np.random.default_rng(config.seed)
    width, height = (int(value) for value in rng.integers(low, high + 1, size=2))
    appearance, drifted = _texture(rng, height, width), _texture(rng, height, width)
    background = _background(rng, config)

    x = float(rng.integers(0, config.canvas_width - width + 1))
    y = float(rng.integers(0, config.canvas_height - height + 1))
    speed = rng.uniform(*config.velocity_range)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)

    frames, boxes = [], []
    occluded_frames = 0
    occluder_color = rng.integers(0, 256, size=3)
    for index in range(config.length):
        if index:
            x, vx = _bounce(x, vx, config.canvas_width, width)
            y, vy = _bounce(y, vy, config.canvas_height, height)
        left, top = int(round(x)), int(round(y))

        blend = min(1.0, config.drift_rate * index)
        frame = background.copy()
        frame[top:top + height, left:left + width] = (1.0 - blend) * appearance + blend * drifted

        if occluded_frames == 0 and config.occluder_probability and rng.random() < config.occluder_probability:
            occluded_frames = int(rng.integers(3, 8))
        if occluded_frames:
            bar = max(1, width * 2 // 5)
            frame[top:top + height, left:left + bar] = occluder_color
            occluded_frames -= 1

        if config.noise_sigma:
            frame = frame + rng.normal(0.0, config.noise_sigma, size=frame.shape)
        frames.append(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
        boxes.append((left, top, width, height))

    return Sequence(f'synthetic-{config.seed}', frames, np.array(boxes, dtype=np.float64))


# Cropping.

@dataclass(frozen=True)
class CropTransform:
    """
    Maps frame coordinates into an ``size`` x ``size`` crop centered on (cx, cy) and back.
    """
    cx: float
    cy: float
    scale: float
    size: int

    def to_crop(self, box):
        x, y, w, h = box
        half = self.size / 2.0
        return np.array([
            (x - self.cx) * self.scale + half,
            (y - self.cy) * self.scale + half,
            w * self.scale,
            h * self.scale,
        ])

    def to_frame(self, box):
        x, y, w, h = box
        half = self.size / 2.0
        return np.array([
            (x - half) / self.scale + self.cx,
            (y - half) / self.scale + self.cy,
            w / self.scale,
            h / self.scale,
        ])

    def point_to_frame(self, px, py):
        half = self.size / 2.0
        return (px - half) / self.scale + self.cx, (py - half) / self.scale + self.cy

    def affine(self):
        """
        cv2 matrix from source pixel indices to crop pixel indices.
        """
        shift_x = self.scale * (0.5 - self.cx) + self.size / 2.0 - 0.5
        shift_y = self.scale * (0.5 - self.cy) + self.size / 2.0 - 0.5
        return np.array([[self.scale, 0.0, shift_x], [0.0, self.scale, shift_y]])


def context_side(box, context_amount=CONTEXT_AMOUNT):
    """
    Side of the square template region: sqrt((w + p)(h + p)) with p = context * (w + h).
    """
    _, _, w, h = box
    pad = context_amount * (w + h)
    return math.sqrt((w + pad) * (h + pad))


def box_center(box):
    x, y, w, h = box
    return x + w / 2.0, y + h / 2.0


def template_transform(box, template_size, context_amount=CONTEXT_AMOUNT):
    cx, cy = box_center(box)
    return CropTransform(cx, cy, template_size / context_side(box, context_amount), template_size)


def search_transform(center, box, template_size, search_size, context_amount=CONTEXT_AMOUNT):
    """
    Search crops share the template scale and cover search_size / template_size times more context.
    """
    cx, cy = center
    return CropTransform(cx, cy, template_size / context_side(box, context_amount), search_size)


def crop_and_resize(frame, transform, pad_color=None):
    """
    Sample the crop described by ``transform``; area outside the frame takes the frame's mean color.
    """
    if pad_color is None:
        pad_color = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    return cv2.warpAffine(
        frame,
        transform.affine(),
        (transform.size, transform.size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(float(value) for value in pad_color),
    )


def to_chw(crop):
    """
    HxWx3 uint8 crop -> [3,H,W] float64 array in [0, 1].
    """
    return np.ascontiguousarray(crop.transpose(2, 0, 1), dtype=np.float64) / 255.0


def crop_tensor(frame, transform, pad_color=None):
    return Tensor(to_chw(crop_and_resize(frame, transform, pad_color)))


# Training tuples.

@dataclass
class TrainingTuple:
    template: np.ndarray
    search: np.ndarray
    template_prime: np.ndarray
    gt_box: np.ndarray
    search_transform: CropTransform
    frame_indices: tuple = field(default=(0, 0))


def sample_tuple(sequence, seed, template_size, search_size, max_gap=MAX_FRAME_GAP, max_shift=MAX_SHIFT,
                 context_amount=CONTEXT_AMOUNT):
    """
    Z from an earlier frame, X around a later frame (at most ``max_gap``
    apart) with a random shift, and Z' from the later frame's exact box.
    """
    rng = np.random.default_rng(seed)
    count = len(sequence)
    first = int(rng.integers(0, count))
    second = int(rng.integers(first, min(count, first + max_gap + 1)))
    shift_x, shift_y = rng.uniform(-max_shift, max_shift, size=2)

    template_box, search_box = sequence.boxes[first], sequence.boxes[second]
    frame_first, frame_second = _frame(sequence, first), _frame(sequence, second)

    template_crop = template_transform(template_box, template_size, context_amount)
    cx, cy = box_center(search_box)
    # Shifts are drawn in crop pixels.
    center = (cx + shift_x / template_crop.scale, cy + shift_y / template_crop.scale)
    search_crop = search_transform(center, search_box, template_size, search_size, context_amount)
    prime_crop = template_transform(search_box, template_size, context_amount)

    return TrainingTuple(
        template=to_chw(crop_and_resize(frame_first, template_crop)),
        search=to_chw(crop_and_resize(frame_second, search_crop)),
        template_prime=to_chw(crop_and_resize(frame_second, prime_crop)),
        gt_box=search_crop.to_crop(search_box),
        search_transform=search_crop,
        frame_indices=(first, second),
    )


def _frame(sequence, index):
    frame = sequence.frames[index]
    if isinstance(frame, str):
        return read_frame(frame)
    return frame


def sample_batch(sequences, batch_size, seed, template_size, search_size, **kwargs):
    """
    ``batch_size`` tuples drawn from randomly chosen sequences; deterministic given ``seed``.
    """
    if not sequences:
        raise ContractError("sample_batch needs at least one sequence")
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(batch_size):
        sequence = sequences[int(rng.integers(0, len(sequences)))]
        batch.append(sample_tuple(sequence, int(rng.integers(0, 2 ** 31 - 1)), template_size, search_size, **kwargs))
    return batch
