"""
Training objectives.

- captioning_loss:     mean NLL of the targets given the prefix [S; z]
- alignment_loss:      mean squared error between brain and auxiliary embeddings
- alpha / phase1_loss: progressive alignment L = L_cap + alpha(t) L_align
- load_balance_merge:  -(1/N) sum_i sum_k log w_ik          (soft / similarity merge)
- load_balance_select: M sum_k f_k P_k                      (hard select)
- phase2_loss:         L = L_cap + lambda1 L_align + lambda2 L_balance
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import tensor as T
from .exceptions import LossError, ShapeError
from .models import SoftPrompt, ToyCausalDecoder
from .router import HARD_SELECT, MERGE_STRATEGIES, RouterDecision
from .tensor import Tensor
from .vocab import PAD_ID


@dataclass(frozen=True)
class ScheduleParams:
    sharpness: float = 0.01   # lambda
    midpoint: int = 1500      # t0
    lambda1: float = 1.0      # alignment weight in phase 2
    lambda2: float = 0.01     # load-balance weight in phase 2
    progressive: bool = True

    def validate(self) -> "ScheduleParams":
        if not self.sharpness > 0:
            raise LossError(f"schedule sharpness must be > 0, got {self.sharpness}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise LossError("loss weights lambda1 and lambda2 must be >= 0")
        return self


def pad_targets(targets) -> np.ndarray:
    """List of token sequences (or a single sequence) -> [B, T] int array padded with PAD_ID."""
    if isinstance(targets, np.ndarray):
        if targets.ndim == 0 or targets.size == 0:
            raise LossError("captioning_loss: targets must be a non-empty token sequence")
        return targets.astype(np.int64).reshape(-1, targets.shape[-1])
    if targets and isinstance(targets[0], (int, np.integer)):
        targets = [targets]
    if not targets or min(len(t) for t in targets) == 0:
        raise LossError("captioning_loss: targets must be non-empty")
    width = max(len(t) for t in targets)
    out = np.full((len(targets), width), PAD_ID, dtype=np.int64)
    for i, t in enumerate(targets):
        out[i, : len(t)] = t
    return out


def sequence_nll(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over non-pad positions of [B, T, V] (or [T, V]) logits."""
    ids = pad_targets(targets)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    if list(ids.shape) != logits.shape[:2]:
        raise ShapeError(f"sequence_nll: targets {list(ids.shape)} do not match logits {logits.shape}")
    valid = ids != PAD_ID
    count = int(valid.sum())
    if count == 0:
        raise LossError("captioning_loss: every target position is padding")
    picks = np.zeros(logits.shape)
    b_idx, t_idx = np.nonzero(valid)
    picks[b_idx, t_idx, ids[b_idx, t_idx]] = 1.0
    log_probs = T.log_softmax(logits, axis=-1)
    return T.tensor_sum(log_probs * T.Tensor(picks)) * (-1.0 / count)


def build_prefix(soft_prompt: Optional[SoftPrompt], z) -> Tensor:
    """[S; z] for z of shape [Q, d] or [B, Q, d]; without a soft prompt the prefix is z."""
    z = T.as_tensor(z)
    if z.ndim == 2:
        z = z.reshape(1, *z.shape)
    if soft_prompt is None or len(soft_prompt) == 0:
        return z
    return T.concat([soft_prompt.expand(z.shape[0]), z], axis=1)


def captioning_loss(decoder: ToyCausalDecoder, soft_prompt: Optional[SoftPrompt], z, targets) -> Tensor:
    ids = pad_targets(targets)
    if not (ids != PAD_ID).any():
        raise LossError("captioning_loss: every target position is padding")
    prefix = build_prefix(soft_prompt, z)
    if prefix.shape[0] != ids.shape[0]:
        raise ShapeError(f"captioning_loss: {prefix.shape[0]} prefixes for {ids.shape[0]} target rows")
    return sequence_nll(decoder.decoder_logits(prefix, ids), ids)


def alignment_loss(z_b, z_m) -> Tensor:
    z_b, z_m = T.as_tensor(z_b), T.as_tensor(z_m)
    if z_b.shape != z_m.shape:
        raise ShapeError(f"alignment_loss: shapes {z_b.shape} and {z_m.shape} differ")
    return T.mean(T.squared_error(z_b, z_m))


def alpha(t: int, sched: ScheduleParams) -> float:
    """Progressive alignment weight 1 / (1 + exp(-lambda (t - t0)))."""
    if t < 0:
        raise LossError(f"alpha: step must be >= 0, got {t}")
    if not sched.progressive:
        return 1.0
    return float(expit(sched.sharpness * (t - sched.midpoint)))


def phase1_loss(l_cap: Tensor, l_align: Tensor, t: int, sched: ScheduleParams) -> Tensor:
    return l_cap + l_align * alpha(t, sched)


def load_balance_merge(batch_weights) -> Tensor:
    w = T.as_tensor(batch_weights)
    if w.ndim == 1:
        w = w.reshape(1, w.shape[0])
    if np.any(w.data <= 0):
        raise LossError("load_balance_merge: weights must be strictly positive (hard-select batch?)")
    n = w.shape[0]
    return T.tensor_sum(T.log(w)) * (-1.0 / n)


def load_balance_select(batch_assignments: Sequence[int], batch_probs) -> Tensor:
    probs = T.as_tensor(batch_probs)
    assignments = np.asarray(batch_assignments, dtype=np.int64).reshape(-1)
    if assignments.size == 0 or probs.shape[0] == 0:
        raise LossError("load_balance_select: empty batch")
    n, m = probs.shape
    if assignments.size != n:
        raise ShapeError(f"load_balance_select: {assignments.size} assignments for {n} probability rows")
    if assignments.min() < 0 or assignments.max() >= m:
        raise LossError(f"load_balance_select: assignments must lie in [0, {m})")
    fraction = np.bincount(assignments, minlength=m) / n
    mean_probs = T.mean(probs, axis=0)
    return T.tensor_sum(mean_probs * T.Tensor(fraction)) * float(m)


def balance_loss(decision: RouterDecision) -> Tensor:
    """Merge branch for soft/similarity merge, select branch (on the relaxed y) for hard select."""
    if decision.strategy == HARD_SELECT:
        relaxed = decision.relaxed if decision.relaxed.ndim == 2 else decision.relaxed.reshape(1, -1)
        return load_balance_select(np.argmax(relaxed.data, axis=-1), relaxed)
    if decision.strategy in MERGE_STRATEGIES:
        return load_balance_merge(decision.weights)
    raise LossError(f"no balance loss for strategy {decision.strategy!r}")


def phase2_loss(l_cap: Tensor, l_align: Tensor, l_balance: Optional[Tensor], sched: ScheduleParams) -> Tensor:
    total = l_cap + l_align * sched.lambda1
    if l_balance is not None:
        total = total + l_balance * sched.lambda2
    return total
