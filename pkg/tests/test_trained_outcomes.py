"""Outcomes of full-size training runs at the default configuration.

Every test here trains for thousands of steps; run with ``pytest --runslow``.
Runs are shared through module-scoped fixtures.
"""

import numpy as np
import pytest

from modroute import tensor as T
from modroute.analysis import read_training_log, weight_covariate_analysis
from modroute.config import Config
from modroute.evaluation import evaluate
from modroute.framework import BrainDecoder
from modroute.synthdata import generate, split
from modroute.training import Trainer, compute_losses, run_phase1, run_phase2

pytestmark = pytest.mark.slow

STRATEGIES = ("soft_merge", "hard_select", "similarity_merge")
SYMMETRIC = ["corpus.abstractness_coupling=0"]


def held_out_alignment(model, samples, config, size=64):
    values = []
    with T.no_grad():
        for start in range(0, len(samples), size):
            batch = samples[start: start + size]
            losses = compute_losses(model, batch, 1, 0, config)
            values.append(losses.l_align.item() * len(batch))
    return sum(values) / len(samples)


class Runs:
    """Phase-1 run plus lazily trained phase-2 variants on one corpus."""

    def __init__(self, config, workdir):
        self.config = config
        self.corpus = generate(config.corpus)
        self.train, self.val, self.test = split(self.corpus)
        self.phase1_log = workdir / "phase1_log.tsv"
        self.phase1 = run_phase1(self.corpus, config, log_path=self.phase1_log)
        self._phase2 = {}

    def phase2(self, *overrides):
        if overrides not in self._phase2:
            config = self.config.with_overrides(list(overrides)).validate()
            self._phase2[overrides] = run_phase2(self.phase1, self.corpus, config)
        return self._phase2[overrides]

    def report(self, *overrides, shuffle_brain=False):
        return evaluate(self.phase2(*overrides), self.test, split="test", shuffle_brain=shuffle_brain)


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    return Runs(Config().validate(), tmp_path_factory.mktemp("default"))


@pytest.fixture(scope="module")
def symmetric_runs(tmp_path_factory):
    return Runs(Config().with_overrides(SYMMETRIC).validate(), tmp_path_factory.mktemp("symmetric"))


def test_phase1_loss_trends_down_over_the_first_window(default_runs):
    log = read_training_log(default_runs.phase1_log)
    window = log.iloc[:200]
    slope = np.polyfit(window["step"].to_numpy(), window["total"].to_numpy(), 1)[0]
    assert slope < 0.0


def test_phase1_shrinks_held_out_alignment(default_runs):
    config = default_runs.config
    before = held_out_alignment(BrainDecoder(config), default_runs.val, config)
    trained = BrainDecoder.from_state(config, default_runs.phase1.tensors)
    after = held_out_alignment(trained, default_runs.val, config)
    assert after < 0.1 * before


def test_single_batch_is_memorised():
    config = Config().with_overrides(["optim.lr=1e-3", "optim.batch_size=4"]).validate()
    corpus = generate(config.corpus)
    batch = corpus.samples[:4]
    trainer = Trainer(BrainDecoder(config), config, corpus.samples, phase=1)
    best = min(trainer.train_step(batch).l_cap for _ in range(500))
    assert best < 0.1


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_router_recovers_the_planted_modality(default_runs, strategy):
    report = default_runs.report(f"router.strategy={strategy}")
    assert report.oracle_agreement >= 0.8


def test_fusion_beats_every_single_projector(default_runs):
    fused = default_runs.report("router.strategy=soft_merge").metrics["bleu1"]
    for k in range(default_runs.config.corpus.num_modalities):
        single = default_runs.report(f"ablation.single_projector={k}").metrics["bleu1"]
        assert fused >= single + 0.02, k


def test_trained_model_beats_shuffled_brains(default_runs):
    real = default_runs.report("router.strategy=soft_merge").metrics["bleu1"]
    shuffled = default_runs.report("router.strategy=soft_merge", shuffle_brain=True).metrics["bleu1"]
    assert real >= shuffled + 0.10


def test_text_weight_tracks_abstractness(default_runs):
    report = default_runs.report("router.strategy=soft_merge")
    config = default_runs.config
    analysis = weight_covariate_analysis(
        report, default_runs.test, window=config.eval.rolling_window, modality=config.eval.text_modality
    )
    assert analysis.r > 0.2
    assert analysis.p < 0.05


def test_hard_select_collapses_without_load_balance(symmetric_runs):
    log_m = np.log(symmetric_runs.config.corpus.num_modalities)
    free = symmetric_runs.report("router.strategy=hard_select", "schedule.phase2_steps=2000",
                                 "ablation.use_load_balance=false")
    balanced = symmetric_runs.report("router.strategy=hard_select", "schedule.phase2_steps=2000")
    assert free.routing_entropy < 0.3 * log_m
    assert balanced.routing_entropy > 0.9 * log_m
