"""
Optimization loop over sampled (Z, X, Z', gt box) tuples.

Network and discriminators are updated jointly by one SGD optimizer on the
total loss L = L_CR - L_MI + L_Idsim.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import unicodecsv

from drmim import core, model
from drmim.checkpoint import load_checkpoint, save_checkpoint
from drmim.core import Tensor
from drmim.data import CONTEXT_AMOUNT, MAX_FRAME_GAP, MAX_SHIFT, sample_batch
from drmim.exception import ConfigurationError, LossIdentityError, NonFiniteLossError, TrainingIOError
from drmim.loss import (
    LossWeights,
    MIDiscriminators,
    ScoreGrid,
    assign_targets,
    cr_loss,
    idsim_loss,
    mi_terms,
    total_loss
)
from drmim.optim import SGD
from drmim.utils import LOG_EVERY

LOG = logging.getLogger(__name__)

LOG_HEADER = ('step', 'total', 'cr', 'mi_global', 'mi_local', 'idsim', 'n_pos', 'ms')
IDENTITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    batch: int = 8
    steps: int = 200
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    prune: model.PruneConfig = field(default_factory=model.PruneConfig)
    checkpoint_path: str = None
    log_path: str = None
    checkpoint_every: int = 0
    log_wall_time: bool = True
    max_gap: int = MAX_FRAME_GAP
    max_shift: int = MAX_SHIFT
    context_amount: float = CONTEXT_AMOUNT

    def __post_init__(self):
        if self.batch < 2:
            raise ConfigurationError(f"Batch size must be at least 2 for MI negative pairs, got {self.batch}")
        if self.steps < 1:
            raise ConfigurationError(f"Training needs at least one step, got {self.steps}")
        if min(self.lr, self.momentum, self.weight_decay, self.grad_clip) < 0:
            raise ConfigurationError("Learning rate, momentum, weight decay and gradient clip must be non-negative")


@dataclass
class TrainLogRecord:
    step: int
    total: float
    cr: float
    mi_global: float
    mi_local: float
    idsim: float
    n_pos: int
    ms: float
    skipped: int = 0

    def as_dict(self):
        return asdict(self)

    def as_row(self):
        return [repr(value) if isinstance(value, float) else str(value) for value in
                (self.step, self.total, self.cr, self.mi_global, self.mi_local, self.idsim, self.n_pos, self.ms)]

    def identity_error(self, weights):
        """
        |total - (cr - (rho * global + gamma * local) + idsim)|
        """
        expected = self.cr - (weights.rho * self.mi_global + weights.gamma * self.mi_local) + self.idsim
        return abs(self.total - expected)

    @property
    def is_finite(self):
        return all(math.isfinite(value) for value in (self.total, self.cr, self.mi_global, self.mi_local, self.idsim))


def batch_losses(params, batch, weights):
    """
    Forward every tuple of ``batch``. Returns (total, cr, mi_global, mi_local, idsim, n_pos, skipped).
    """
    grid = ScoreGrid.from_spec(params.spec)
    use_dr = params.spec.use_dr
    features, disentangled, cr_terms, idsim_terms = [], [], [], []
    n_pos = skipped = 0

    for sample in batch:
        f_z = model.backbone_forward(params, Tensor(sample.template))
        f_x = model.backbone_forward(params, Tensor(sample.search))
        if use_dr:
            unrelated_z, related_z = model.dr_split(params, f_z)
            related_x = model.identity_features(params, f_x)
            f_prime = model.backbone_forward(params, Tensor(sample.template_prime))
            related_prime = model.identity_features(params, f_prime)
            features.append(f_z)
            disentangled.append(core.concat_channels(related_z, unrelated_z))
            idsim_terms.append(idsim_loss(related_z, related_prime, weights.omega))
        else:
            related_z, related_x = f_z, f_x

        targets = assign_targets(grid, sample.gt_box)
        if targets.n_pos == 0:
            skipped += 1
            continue
        head = model.head_forward(
            params,
            model.couple(params, related_z, related_x, 'cls'),
            model.couple(params, related_z, related_x, 'reg'),
        )
        cr_terms.append(cr_loss(head, targets, weights))
        n_pos += targets.n_pos

    cr = core.mean_all(core.stack(cr_terms)) if cr_terms else Tensor(0.0)
    if use_dr:
        weighted_mi, mi_global, mi_local = mi_terms(features, disentangled, MIDiscriminators.for_params(params), weights)
        idsim = core.mean_all(core.stack(idsim_terms))
    else:
        weighted_mi = mi_global = mi_local = idsim = Tensor(0.0)
    return total_loss(cr, weighted_mi, idsim), cr, mi_global, mi_local, idsim, n_pos, skipped


class Trainer:
    """
    Owns the parameters being trained and the optimizer state.
    """

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.optimizer = SGD(
            params.trainable(), config.lr, config.momentum, config.weight_decay, max_grad_norm=config.grad_clip
        )

    def train_step(self, batch):
        started = time.perf_counter()
        self.optimizer.zero_grad()
        total, cr, mi_global, mi_local, idsim, n_pos, skipped = batch_losses(self.params, batch, self.config.weights)
        step = self.params.step + 1
        record = TrainLogRecord(
            step=step,
            total=total.item(),
            cr=cr.item(),
            mi_global=mi_global.item(),
            mi_local=mi_local.item(),
            idsim=idsim.item(),
            n_pos=n_pos,
            ms=0.0,
            skipped=skipped,
        )
        if not record.is_finite:
            raise NonFiniteLossError(record)
        identity_error = record.identity_error(self.config.weights)
        if identity_error > IDENTITY_TOLERANCE:
            raise LossIdentityError(record, identity_error)
        if skipped:
            LOG.warning("Step %d skipped %d of %d pairs with no positive cells", step, skipped, len(batch))
        if total.requires_grad:
            core.backward(total)
            self.optimizer.step()
        self.params.step = step
        if self.config.log_wall_time:
            record.ms = (time.perf_counter() - started) * 1000.0
        return record

    def batch_seed(self, step):
        return int(np.random.SeedSequence([self.config.seed, step]).generate_state(1)[0])

    def sample(self, sequences, step):
        spec = self.params.spec
        return sample_batch(
            sequences, self.config.batch, self.batch_seed(step), spec.template_size, spec.search_size,
            max_gap=self.config.max_gap, max_shift=self.config.max_shift, context_amount=self.config.context_amount,
        )

    def _checkpoint(self, path):
        try:
            save_checkpoint(self.params, path)
        except OSError as exc:
            raise TrainingIOError(self.params.step, path, exc) from exc

    def run(self, sequences):
        """
        Train until ``config.steps``, writing one log row per step and checkpoints as configured.
        """
        config = self.config
        records = []
        log_handle = self._open_log()
        try:
            writer = unicodecsv.writer(log_handle, encoding='utf-8') if log_handle else None
            while self.params.step < config.steps:
                step = self.params.step + 1
                record = self.train_step(self.sample(sequences, step))
                records.append(record)
                if writer:
                    try:
                        writer.writerow(record.as_row())
                        log_handle.flush()
                    except OSError as exc:
                        raise TrainingIOError(step, config.log_path, exc) from exc
                if step % LOG_EVERY == 0 or step == config.steps:
                    LOG.info("step %d total=%.5f cr=%.5f mi_global=%.5f mi_local=%.5f idsim=%.5f n_pos=%d",
                             step, record.total, record.cr, record.mi_global, record.mi_local, record.idsim,
                             record.n_pos)
                if config.checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
                    self._checkpoint(config.checkpoint_path)
        finally:
            if log_handle:
                log_handle.close()
        if config.checkpoint_path:
            self._checkpoint(config.checkpoint_path)
        return records

    def _open_log(self):
        path = self.config.log_path
        if not path:
            return None
        resuming = self.params.step > 0 and os.path.exists(path)
        try:
            handle = open(path, 'ab' if resuming else 'wb')
            if not resuming:
                unicodecsv.writer(handle, encoding='utf-8').writerow(LOG_HEADER)
        except OSError as exc:
            raise TrainingIOError(self.params.step, path, exc) from exc
        return handle


def train_step(params, batch, config, trainer=None):
    """
    One update of ``params`` on ``batch``; returns (params, record).
    """
    trainer = trainer if trainer is not None else Trainer(params, config)
    record = trainer.train_step(batch)
    return trainer.params, record


def train(config, sequences, spec=None, resume_from=None):
    """
    Build (or resume) a model and train it on ``sequences``. Returns (params, records).
    """
    if resume_from:
        params = load_checkpoint(resume_from, spec)
        if params.mu != config.prune.mu:
            raise ConfigurationError(f"Checkpoint was pruned at mu={params.mu}, config asks for {config.prune.mu}")
        LOG.info("Resuming from %s at step %d", resume_from, params.step)
    else:
        params = model.build_model(spec or model.ArchitectureSpec.default(), config.prune, config.seed)
    trainer = Trainer(params, config)
    records = trainer.run(sequences)
    return trainer.params, records
