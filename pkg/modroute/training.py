"""
Two-phase training.

Phase 1 (multimodal instruction tuning)
    auxiliary encoders pool each raw auxiliary sequence to z_m; the decoder is
    captioned from [S; z_{m*}] of the stimulus modality; every projector P_i maps
    the brain vector to z_b^i and is aligned with z_{m_i}. Loss
    L_cap + alpha(t) L_align.

Phase 2 (projector fusion)
    the router weighs the projector outputs, the decoder is captioned from
    [S; H]; L_cap + lambda1 L_align + lambda2 L_balance. Auxiliary encoders are
    frozen.

Each step appends one tab-separated line to the training log:
step, L_cap, L_align, alpha(t), L_balance, total. In phase 2 the alpha column
holds the constant alignment weight lambda1.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .checkpoint import Checkpoint
from .config import Config
from .exceptions import CheckpointError, LossError, NonFiniteError, TrainingError
from .framework import SINGLE_PROJECTOR, BrainDecoder
from .losses import alignment_loss, alpha, balance_loss, captioning_loss, phase1_loss, phase2_loss
from .optim import AdamW, OptimizerState
from .synthdata import BrainSample, Corpus, split
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_cap", "L_align", "alpha", "L_balance", "total")


@dataclass
class TrainingSchedule:
    phase: int
    step: int = 0
    total_steps: int = 0
    initial_loss: Optional[float] = None

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "TrainingSchedule":
        return cls(**data)


@dataclass
class StepRecord:
    step: int
    l_cap: float
    l_align: float
    alpha: float
    l_balance: float
    total: float
    grad_norm: float = 0.0

    def log_line(self) -> str:
        values = (self.l_cap, self.l_align, self.alpha, self.l_balance, self.total)
        return "\t".join([str(self.step)] + [f"{v:.8f}" for v in values])


@dataclass
class StepLosses:
    l_cap: Tensor
    l_align: Tensor
    alpha: float
    l_balance: Optional[Tensor]
    total: Tensor
    # logged L_balance; measured even when lambda2 = 0 keeps it out of the total
    balance_value: float = 0.0


def stack_brain(batch: Sequence[BrainSample]) -> Tensor:
    return Tensor(np.stack([s.brain for s in batch]))


def oracle_mask(batch: Sequence[BrainSample], num_modalities: int) -> np.ndarray:
    """[B, M, 1, 1] one-hot over each sample's stimulus modality."""
    mask = np.zeros((len(batch), num_modalities, 1, 1))
    mask[np.arange(len(batch)), [s.oracle_modality for s in batch]] = 1.0
    return mask


def compute_losses(
    model: BrainDecoder,
    batch: Sequence[BrainSample],
    phase: int,
    step: int,
    config: Config,
    strategy: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
) -> StepLosses:
    sched = config.loss_schedule()
    strategy = strategy or config.router.strategy
    targets = [s.targets for s in batch]
    brain = stack_brain(batch)

    if phase == 1:
        z_m = model.auxiliary_embeddings(batch)
        z_star = T.tensor_sum(z_m * Tensor(oracle_mask(batch, model.num_modalities)), axis=1)
        l_cap = captioning_loss(model.decoder, model.soft_prompt, z_star, targets)
        z_b = model.brain_embeddings(brain)
        l_align = alignment_loss(z_b, z_m.detach())
        a = alpha(step, sched)
        return StepLosses(l_cap, l_align, a, None, phase1_loss(l_cap, l_align, step, sched))

    if phase != 2:
        raise TrainingError(f"unknown training phase {phase}")
    with T.no_grad():
        z_m = model.auxiliary_embeddings(batch)
    h, decision, z_b = model.fused(brain, strategy, rng=rng, training=True)
    l_cap = captioning_loss(model.decoder, model.soft_prompt, h, targets)
    l_align = alignment_loss(z_b, z_m)
    l_balance = None
    balance_value = 0.0
    if decision.strategy != SINGLE_PROJECTOR:
        if sched.lambda2 > 0:
            l_balance = balance_loss(decision)
            balance_value = l_balance.item()
        else:
            with T.no_grad():
                balance_value = _detached_balance(decision)
    total = phase2_loss(l_cap, l_align, l_balance, sched)
    return StepLosses(l_cap, l_align, sched.lambda1, l_balance, total, balance_value)


def _detached_balance(decision) -> float:
    try:
        return balance_loss(decision).item()
    except LossError:
        # a merge weight underflowed to zero
        return float("inf")


class Trainer:
    """Runs the steps of one phase and owns the model, optimizer and sampling RNG."""

    def __init__(
        self,
        model: BrainDecoder,
        config: Config,
        samples: Sequence[BrainSample],
        phase: int,
        *,
        corpus_hash: str = "",
        optimizer_state: Optional[OptimizerState] = None,
        schedule: Optional[TrainingSchedule] = None,
        rng_state=None,
    ):
        if not samples:
            raise TrainingError("no training samples")
        self.model = model
        self.config = config
        self.samples = list(samples)
        self.phase = phase
        self.strategy = config.router.strategy
        self.corpus_hash = corpus_hash
        total = config.schedule.phase1_steps if phase == 1 else config.schedule.phase2_steps
        self.schedule = schedule or TrainingSchedule(phase=phase, total_steps=total)
        self.optimizer = AdamW(
            model.trainable_parameters(phase, self.strategy),
            optimizer_state or OptimizerState.from_config(config.optim),
        )
        self.rng = np.random.default_rng([config.model.seed, phase])
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.history: List[StepRecord] = []

    def sample_batch(self) -> List[BrainSample]:
        size = self.config.optim.batch_size
        n = len(self.samples)
        idx = self.rng.choice(n, size=size, replace=size > n)
        return [self.samples[i] for i in idx]

    def train_step(self, batch: Optional[Sequence[BrainSample]] = None) -> StepRecord:
        step = self.schedule.step
        batch = batch if batch is not None else self.sample_batch()
        T.reset_graph()
        self.optimizer.zero_grad()
        try:
            losses = compute_losses(self.model, batch, self.phase, step, self.config, self.strategy, self.rng)
            T.backward(losses.total)
        except NonFiniteError as e:
            T.reset_graph()
            raise TrainingError(f"phase {self.phase} step {step}: non-finite value ({e})") from e

        record = StepRecord(
            step=step,
            l_cap=losses.l_cap.item(),
            l_align=losses.l_align.item(),
            alpha=float(losses.alpha),
            l_balance=losses.balance_value,
            total=losses.total.item(),
            grad_norm=self.optimizer.grad_norm(),
        )
        if self.schedule.initial_loss is None:
            self.schedule.initial_loss = record.total
        limit = self.config.optim.divergence_factor * self.schedule.initial_loss
        if record.total > limit:
            raise TrainingError(
                f"phase {self.phase} step {step}: loss diverged "
                f"(total {record.total:.4f} > {limit:.4f}; L_cap {record.l_cap:.4f}, "
                f"L_align {record.l_align:.4f}, L_balance {record.l_balance:.4f})"
            )
        self.optimizer.step()
        self.schedule.step += 1
        self.history.append(record)
        logger.debug("phase %d step %d total %.5f", self.phase, step, record.total)
        return record

    def run(self, steps: Optional[int] = None, log_path=None) -> List[StepRecord]:
        remaining = self.schedule.total_steps - self.schedule.step
        steps = remaining if steps is None else min(steps, remaining)
        log = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            fresh = self.schedule.step == 0 or not log_path.exists()
            log = open(log_path, "w" if fresh else "a", encoding="utf-8")
            if fresh:
                log.write("\t".join(LOG_COLUMNS) + "\n")
        records = []
        try:
            bar = tqdm(range(steps), desc=f"phase {self.phase}", disable=not self.config.optim.show_progress)
            for _ in bar:
                record = self.train_step()
                records.append(record)
                if log is not None:
                    log.write(record.log_line() + "\n")
                bar.set_postfix(total=f"{record.total:.4f}")
        finally:
            if log is not None:
                log.close()
        return records

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            tensors=self.model.state_dict(),
            optimizer=self.optimizer.state,
            schedule=self.schedule.to_dict(),
            corpus_hash=self.corpus_hash,
            strategy=self.strategy,
            config=self.config.to_dict(),
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, samples: Sequence[BrainSample]) -> "Trainer":
        """Resume a phase exactly where the checkpoint left it."""
        config = Config.from_dict(checkpoint.config)
        model = BrainDecoder.from_state(config, checkpoint.tensors)
        return cls(
            model,
            config,
            samples,
            checkpoint.phase,
            corpus_hash=checkpoint.corpus_hash,
            optimizer_state=checkpoint.optimizer,
            schedule=TrainingSchedule.from_dict(checkpoint.schedule),
            rng_state=checkpoint.rng_state,
        )


def _check_corpus(corpus: Corpus, config: Config):
    if corpus.spec.num_modalities != config.corpus.num_modalities:
        raise CheckpointError(
            f"corpus has {corpus.spec.num_modalities} modalities, config expects {config.corpus.num_modalities}"
        )


def run_phase1(corpus: Corpus, config: Config, log_path=None) -> Checkpoint:
    _check_corpus(corpus, config)
    train, _, _ = split(corpus)
    model = BrainDecoder(config)
    trainer = Trainer(model, config, train, phase=1, corpus_hash=corpus.spec.spec_hash())
    logger.info(
        "phase 1: %d steps, %d parameters, %d training samples",
        trainer.schedule.total_steps, model.num_parameters(), len(train),
    )
    trainer.run(log_path=log_path)
    return trainer.to_checkpoint()


def run_phase2(phase1_checkpoint: Checkpoint, corpus: Corpus, config: Config, log_path=None) -> Checkpoint:
    if phase1_checkpoint.phase != 1:
        raise CheckpointError(f"expected a phase-1 checkpoint, got phase {phase1_checkpoint.phase}")
    if phase1_checkpoint.num_modalities != config.corpus.num_modalities:
        raise CheckpointError(
            f"phase-1 checkpoint has M={phase1_checkpoint.num_modalities} projectors, "
            f"config asks for M={config.corpus.num_modalities}"
        )
    if phase1_checkpoint.corpus_hash != corpus.spec.spec_hash():
        raise CheckpointError("phase-1 checkpoint was trained on a different corpus")
    _check_corpus(corpus, config)

    train, _, _ = split(corpus)
    model = BrainDecoder.from_state(config, phase1_checkpoint.tensors)
    trainer = Trainer(model, config, train, phase=2, corpus_hash=phase1_checkpoint.corpus_hash)
    logger.info(
        "phase 2: %d steps, strategy %s, %d trainable tensors",
        trainer.schedule.total_steps, trainer.strategy, len(trainer.optimizer.params),
    )
    trainer.run(log_path=log_path)
    return trainer.to_checkpoint()
