"""
Finite-difference gradient checks.

``finite_difference_check`` compares the recorded-graph gradient of a scalar
function with central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
``run_gradcheck_suite`` runs it over every primitive, over the composite
phase-1 and phase-2 losses of a tiny model, and checks the straight-through
gradient of hard select against the explicit relaxed path.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional

import numpy as np

from . import tensor as T
from .config import Config
from .exceptions import ShapeError
from .framework import BrainDecoder
from .router import RouterParams, gumbel_noise, hard_select
from .synthdata import generate, split
from .tensor import Tensor
from .training import compute_losses

logger = logging.getLogger(__name__)

ABS_FALLBACK = 1e-8

# Small enough that the whole suite stays well under a minute.
GRADCHECK_OVERRIDES = (
    "corpus.n_train=4",
    "corpus.n_val=1",
    "corpus.n_test=1",
    "corpus.d_brain=16",
    "corpus.d_latent=13",
    "corpus.d_raw=6",
    "corpus.aux_min_len=2",
    "corpus.aux_max_len=4",
    "model.d_model=8",
    "model.num_layers=1",
    "model.num_heads=2",
    "model.num_queries=2",
    "model.soft_prompt_len=3",
    "model.grid_tokens=4",
    "model.max_target_len=12",
    "router.hidden=8",
)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name:<36s} max rel err {self.max_rel_error:.2e}"


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(denom < ABS_FALLBACK, diff, diff / np.where(denom < ABS_FALLBACK, 1.0, denom))


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    name: str = "",
    indices: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Compare d f / d x with central differences at the flat ``indices`` (all by default)."""
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"finite_difference_check: eps must lie in (0, 1e-2], got {eps}")
    if not x.requires_grad or x.node_id is not None:
        raise ValueError("finite_difference_check: x must be a leaf tensor with requires_grad=True")

    T.reset_graph()
    x.zero_grad()
    loss = f(x)
    if loss.ndim != 0:
        raise ShapeError(f"finite_difference_check: f must return a scalar, got shape {loss.shape}")
    if T.active_graph().owns(loss):
        T.backward(loss)
    else:
        T.reset_graph()
    analytic_full = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = np.arange(x.data.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    base = x.data.copy()
    numeric = np.zeros(flat.size)
    try:
        with T.no_grad():
            for j, idx in enumerate(flat):
                shifted = base.copy()
                shifted.flat[idx] = base.flat[idx] + eps
                x.assign(shifted)
                plus = f(x).item()
                shifted.flat[idx] = base.flat[idx] - eps
                x.assign(shifted)
                minus = f(x).item()
                numeric[j] = (plus - minus) / (2.0 * eps)
    finally:
        x.assign(base)

    analytic = analytic_full.reshape(-1)[flat]
    errors = relative_errors(analytic, numeric)
    worst = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(name=name, max_rel_error=worst, passed=worst < tol, analytic=analytic, numeric=numeric)


# ---------------------------------------------------------------------------
# Primitive cases
# ---------------------------------------------------------------------------


def _primitive_cases(rng: np.random.Generator, trial: int):
    """(kind, input arrays, op) for every differentiable primitive."""
    normal = lambda *shape: rng.normal(size=shape)  # noqa: E731
    axis = -1 if trial % 2 == 0 else 0
    keep = trial % 2 == 1
    ids = rng.integers(0, 6, size=(2, 3))
    batched = trial % 2 == 1
    return [
        ("matmul", [normal(2, 3, 4) if batched else normal(3, 4), normal(4, 2)], lambda a, b: T.matmul(a, b)),
        ("add", [normal(3, 4), normal(4)], T.add),
        ("sub", [normal(3, 4), normal(3, 1)], T.sub),
        ("mul", [normal(3, 4), normal(4)], T.mul),
        ("scalar_mul", [normal(3, 4)], lambda x: T.scalar_mul(x, -1.7)),
        ("exp", [rng.uniform(-2, 2, (3, 4))], T.exp),
        ("log", [rng.uniform(0.5, 2.0, (3, 4))], T.log),
        ("sigmoid", [normal(3, 4)], T.sigmoid),
        ("gelu", [normal(3, 4)], T.gelu),
        ("softmax", [normal(3, 4)], lambda x: T.softmax(x, axis=axis)),
        ("log_softmax", [normal(3, 4)], lambda x: T.log_softmax(x, axis=axis)),
        ("sum", [normal(3, 4)], lambda x: T.tensor_sum(x, axis=1, keepdims=keep)),
        ("mean", [normal(3, 4)], lambda x: T.mean(x, axis=0, keepdims=keep)),
        ("transpose", [normal(2, 3, 4)], lambda x: T.transpose(x, (1, 0, 2))),
        ("reshape", [normal(3, 4)], lambda x: T.reshape(x, (2, 6))),
        ("concat", [normal(2, 3), normal(2, 2)], lambda a, b: T.concat([a, b], axis=1)),
        ("slice", [normal(4, 5)], lambda x: T.slice_(x, (slice(1, 3), slice(None, None, 2)))),
        ("broadcast", [normal(1, 4)], lambda x: T.broadcast(x, (3, 4))),
        ("layer_norm", [normal(3, 5)], T.layer_norm),
        ("embedding", [normal(6, 4)], lambda table: T.embedding(table, ids)),
        ("squared_error", [normal(3, 4), normal(3, 4)], T.squared_error),
    ]


def check_primitives(seed: int = 0, tol: float = 1e-4, trials: int = 10) -> List[GradCheckReport]:
    """Random weighted sums of each primitive's output, gradient checked for every input."""
    rng = np.random.default_rng(seed)
    worst = {}
    for trial in range(trials):
        for kind, arrays, op in _primitive_cases(rng, trial):
            with T.no_grad():
                out_shape = op(*[Tensor(a) for a in arrays]).shape
            weights = Tensor(rng.normal(size=out_shape))
            for position in range(len(arrays)):
                inputs = [Tensor(a, requires_grad=(i == position)) for i, a in enumerate(arrays)]

                def f(x, inputs=inputs, position=position, op=op, weights=weights):
                    args = list(inputs)
                    args[position] = x
                    return T.tensor_sum(T.mul(op(*args), weights))

                label = kind if len(arrays) == 1 else f"{kind}[{position}]"
                report = finite_difference_check(f, inputs[position], eps=1e-5, tol=tol, name=label)
                if label not in worst or report.max_rel_error > worst[label].max_rel_error:
                    worst[label] = report
    return list(worst.values())


# ---------------------------------------------------------------------------
# Straight-through reference
# ---------------------------------------------------------------------------


def check_straight_through(seed: int = 0, trials: int = 100, temperature: float = 0.5) -> GradCheckReport:
    """hard_select gradients must equal, bitwise, those of the explicit relaxed-path graph."""
    rng = np.random.default_rng(seed)
    params = RouterParams(rng, d_brain=6, d_model=4, num_projectors=3, hidden=5)
    worst = 0.0
    passed = True
    analytic = numeric = np.zeros(0)
    for _ in range(trials):
        brain = Tensor(rng.normal(size=(4, 6)))
        noise = gumbel_noise(rng, (4, 3))
        downstream = Tensor(rng.normal(size=(4, 3)))

        T.reset_graph()
        params.zero_grad()
        decision = hard_select(params, brain, temperature, noise)
        if not np.array_equal(decision.weights.data.sum(axis=-1), np.ones(4)) or not np.all(
            np.isin(decision.weights.data, (0.0, 1.0))
        ):
            passed = False
        T.backward(T.tensor_sum(T.mul(decision.weights, downstream)))
        st_grads = {n: p.grad.copy() for n, p in params.strategy_parameters("hard_select")}

        T.reset_graph()
        params.zero_grad()
        log_probs = T.log_softmax(params.logits(brain), axis=-1)
        relaxed = T.softmax((log_probs + Tensor(noise)) * (1.0 / temperature), axis=-1)
        T.backward(T.tensor_sum(T.mul(relaxed, downstream)))
        ref_grads = {n: p.grad.copy() for n, p in params.strategy_parameters("hard_select")}

        for name, g in st_grads.items():
            if not np.array_equal(g, ref_grads[name]):
                passed = False
                worst = max(worst, float(np.max(np.abs(g - ref_grads[name]))))
        analytic = np.concatenate([g.ravel() for g in st_grads.values()])
        numeric = np.concatenate([g.ravel() for g in ref_grads.values()])
    params.zero_grad()
    return GradCheckReport("hard_select (straight-through)", worst, passed, analytic, numeric)


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------


def gradcheck_config(seed: int = 0, strategy: str = "soft_merge") -> Config:
    overrides = list(GRADCHECK_OVERRIDES) + [
        f"corpus.seed={seed}",
        f"model.seed={seed}",
        f"router.strategy={strategy}",
    ]
    return Config().with_overrides(overrides).validate()


def check_composite(
    phase: int,
    strategy: str = "soft_merge",
    seed: int = 0,
    tol: float = 1e-4,
    coordinates: int = 10,
) -> GradCheckReport:
    """Gradient check of the full training loss at sampled large-gradient coordinates."""
    config = gradcheck_config(seed, strategy)
    corpus = generate(config.corpus)
    batch, _, _ = split(corpus)
    model = BrainDecoder(config)
    step = config.schedule.midpoint
    params = dict(model.trainable_parameters(phase, strategy))

    def f(_x):
        return compute_losses(model, batch, phase, step, config, strategy).total

    T.reset_graph()
    model.zero_grad()
    T.backward(f(None))
    candidates = []
    for name, p in params.items():
        if p.grad is None:
            continue
        flat = np.abs(p.grad.reshape(-1))
        top = np.argsort(flat)[::-1][:4]
        candidates.extend((float(flat[i]), name, int(i)) for i in top)
    candidates.sort(reverse=True)
    pool = candidates[: coordinates * 3]
    rng = np.random.default_rng(seed)
    chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=min(coordinates, len(pool)), replace=False))]

    label = f"phase{phase} loss" + (f" ({strategy})" if phase == 2 else "")
    reports = []
    for _, name, idx in chosen:
        reports.append(
            finite_difference_check(f, params[name], eps=1e-5, tol=tol, name=f"{label} {name}[{idx}]", indices=[idx])
        )
    model.zero_grad()
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(
        name=label,
        max_rel_error=worst.max_rel_error,
        passed=all(r.passed for r in reports),
        analytic=np.concatenate([r.analytic for r in reports]),
        numeric=np.concatenate([r.numeric for r in reports]),
    )


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4, trials: int = 10) -> List[GradCheckReport]:
    reports = check_primitives(seed, tol, trials)
    reports.append(check_straight_through(seed))
    reports.append(check_composite(1, seed=seed, tol=tol))
    for strategy in ("soft_merge", "similarity_merge"):
        reports.append(check_composite(2, strategy, seed=seed, tol=tol))
    failed = [r.name for r in reports if not r.passed]
    logger.info("gradcheck: %d checks, %d failed", len(reports), len(failed))
    return reports
