"""
Modality router.

Three strategies produce per-sample weights over the M brain projectors:

- soft_merge:       w = softmax(MLP(b))
- hard_select:      y = softmax((log l + g) / tau), l = softmax(MLP(b)), g ~ Gumbel(0, 1);
                    w = onehot(argmax y) forward, gradients flow through y
- similarity_merge: w = softmax(q . k_i), q = QueryEncoder(b), k_i = key of projector i

``fuse`` combines projector outputs as H = sum_i w_i P_i(b).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import RoutingError, ShapeError
from .models import Linear, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

SOFT_MERGE = "soft_merge"
HARD_SELECT = "hard_select"
SIMILARITY_MERGE = "similarity_merge"
STRATEGIES = (SOFT_MERGE, HARD_SELECT, SIMILARITY_MERGE)
MERGE_STRATEGIES = (SOFT_MERGE, SIMILARITY_MERGE)


def check_strategy(strategy: str) -> str:
    if strategy not in STRATEGIES:
        raise RoutingError(f"unknown router strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    return strategy


@dataclass
class RouterDecision:
    """Routing weights plus the strategy-specific intermediates."""

    weights: Tensor
    strategy: str
    logits: Optional[Tensor] = None
    probs: Optional[np.ndarray] = None
    relaxed: Optional[Tensor] = None
    noise: Optional[np.ndarray] = None
    temperature: Optional[float] = None
    query: Optional[Tensor] = None
    keys: Optional[Tensor] = None

    @property
    def num_projectors(self) -> int:
        return self.weights.shape[-1]

    def assignments(self) -> np.ndarray:
        """Index of the largest weight per sample (lowest index on ties)."""
        return np.argmax(self.weights.data, axis=-1)


class RouterParams(Module):
    """MLP for soft-merge / hard-select and an independent query encoder for similarity-merge."""

    def __init__(self, rng, d_brain, d_model, num_projectors, hidden=64):
        if hidden < num_projectors:
            raise ShapeError(f"router hidden width {hidden} smaller than M={num_projectors}")
        self.num_projectors = num_projectors
        self.d_brain = d_brain
        self.mlp_in = Linear(rng, d_brain, hidden)
        self.mlp_out = Linear(rng, hidden, num_projectors)
        self.query_in = Linear(rng, d_brain, hidden)
        self.query_out = Linear(rng, hidden, d_model)

    def logits(self, b: Tensor) -> Tensor:
        return self.mlp_out(T.gelu(self.mlp_in(b)))

    def query(self, b: Tensor) -> Tensor:
        return self.query_out(T.gelu(self.query_in(b)))

    def strategy_parameters(self, strategy: str):
        """Named parameters a given strategy actually uses."""
        prefixes = ("query_in.", "query_out.") if strategy == SIMILARITY_MERGE else ("mlp_in.", "mlp_out.")
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefixes)]


def _as_batch(b) -> Tuple[Tensor, bool]:
    b = T.as_tensor(b)
    if b.ndim == 1:
        return b.reshape(1, b.shape[0]), True
    return b, False


def _unbatch(t: Optional[Tensor], single: bool):
    if t is None or not single:
        return t
    return t.reshape(*t.shape[1:])


def soft_merge(params: RouterParams, b) -> RouterDecision:
    b, single = _as_batch(b)
    logits = params.logits(b)
    weights = T.softmax(logits, axis=-1)
    return RouterDecision(
        weights=_unbatch(weights, single),
        strategy=SOFT_MERGE,
        logits=_unbatch(logits, single),
        probs=weights.data[0] if single else weights.data,
    )


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(0.0, 1.0, size=shape)


def one_hot_argmax(values: np.ndarray) -> np.ndarray:
    hard = np.zeros_like(values)
    np.put_along_axis(hard, np.argmax(values, axis=-1)[..., None], 1.0, axis=-1)
    return hard


def hard_select(params: RouterParams, b, temperature: float, noise=None) -> RouterDecision:
    """Gumbel-Softmax relaxation with a straight-through one-hot forward value.

    ``noise`` is the Gumbel sample g (same shape as the weights); None means zeros.
    """
    if not temperature > 0:
        raise RoutingError(f"hard_select: temperature must be > 0, got {temperature}")
    b, single = _as_batch(b)
    logits = params.logits(b)
    log_probs = T.log_softmax(logits, axis=-1)
    g = np.zeros(log_probs.data.shape) if noise is None else np.asarray(noise, dtype=np.float64).reshape(log_probs.data.shape)
    relaxed = T.softmax((log_probs + T.Tensor(g)) * (1.0 / temperature), axis=-1)
    weights = T.straight_through(relaxed, one_hot_argmax(relaxed.data))
    probs = np.exp(log_probs.data)
    return RouterDecision(
        weights=_unbatch(weights, single),
        strategy=HARD_SELECT,
        logits=_unbatch(logits, single),
        probs=probs[0] if single else probs,
        relaxed=_unbatch(relaxed, single),
        noise=g[0] if single else g,
        temperature=float(temperature),
    )


def _similarity(query: Tensor, keys: Tensor) -> Tensor:
    # [N, d] x [N, M, d] -> [N, M]
    n, d = query.shape
    scores = T.matmul(keys, query.reshape(n, d, 1))
    return scores.reshape(n, keys.shape[1])


def similarity_merge(params: RouterParams, b, projector_outputs, query: Optional[Tensor] = None) -> RouterDecision:
    """Weights from dot products between a brain query and per-projector keys.

    ``projector_outputs`` holds one key vector per projector: [M, d] for a single
    sample or [N, M, d] for a batch. ``query`` bypasses the query encoder.
    """
    keys = T.as_tensor(projector_outputs)
    single = keys.ndim == 2
    if single:
        keys = keys.reshape(1, *keys.shape)
    if query is None:
        b, _ = _as_batch(b)
        query = params.query(b)
    else:
        query = T.as_tensor(query)
        if query.ndim == 1:
            query = query.reshape(1, query.shape[0])
    if query.shape[-1] != keys.shape[-1] or query.shape[0] != keys.shape[0]:
        raise ShapeError(f"similarity_merge: query {query.shape} incompatible with keys {keys.shape}")
    weights = T.softmax(_similarity(query, keys), axis=-1)
    return RouterDecision(
        weights=_unbatch(weights, single),
        strategy=SIMILARITY_MERGE,
        probs=weights.data[0] if single else weights.data,
        query=_unbatch(query, single),
        keys=_unbatch(keys, single),
    )


def fuse(decision_or_weights, projector_outputs) -> Tensor:
    """H = sum_i w_i P_i(b); weights [M] or [N, M], outputs [M, ...] or [N, M, ...]."""
    weights = decision_or_weights.weights if isinstance(decision_or_weights, RouterDecision) else decision_or_weights
    weights = T.as_tensor(weights)
    outputs = T.as_tensor(projector_outputs)
    batch_axis = weights.ndim - 1
    if outputs.ndim <= batch_axis or outputs.shape[batch_axis] != weights.shape[-1] or (
        weights.ndim == 2 and outputs.shape[0] != weights.shape[0]
    ):
        raise ShapeError(f"fuse: weights {weights.shape} do not match projector outputs {outputs.shape}")
    trailing = outputs.ndim - weights.ndim
    w = weights.reshape(*weights.shape, *([1] * trailing))
    return T.tensor_sum(w * outputs, axis=batch_axis)


def route(
    params: RouterParams,
    strategy: str,
    brain,
    keys=None,
    *,
    temperature: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    inference_noise: bool = False,
) -> RouterDecision:
    """Dispatch on the strategy name; Gumbel noise is drawn from ``rng`` when sampling is on."""
    check_strategy(strategy)
    if strategy == SOFT_MERGE:
        return soft_merge(params, brain)
    if strategy == HARD_SELECT:
        noise = None
        if (training or inference_noise) and rng is not None:
            noise = gumbel_noise(rng, (_as_batch(brain)[0].shape[0], params.num_projectors))
        return hard_select(params, brain, temperature, noise)
    if keys is None:
        raise RoutingError("similarity_merge needs projector keys")
    return similarity_merge(params, brain, keys)


def routing_entropy(weights) -> float:
    """Entropy (nats) of the mean routing distribution over a set of samples."""
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    mean_w = w.reshape(-1, w.shape[-1]).mean(axis=0)
    nz = mean_w[mean_w > 0]
    return float(-(nz * np.log(nz)).sum())
