import numpy as np
import pandas as pd
import pytest

from modroute.evaluation import evaluate, read_report, write_report
from modroute.framework import BrainDecoder
from modroute.synthdata import split
from modroute.training import run_phase1


@pytest.fixture
def test_split(tiny_corpus):
    return split(tiny_corpus)[2]


def test_report_contents(tiny_config, test_split):
    report = evaluate(BrainDecoder(tiny_config), test_split)
    assert report.num_samples == len(test_split)
    assert set(report.metrics) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rougeL", "wer"}
    assert 0.0 <= report.oracle_agreement <= 1.0
    assert 0.0 <= report.routing_entropy <= np.log(3) + 1e-12
    weights = report.weights()
    assert weights.shape == (len(test_split), 3)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)
    for row, sample in zip(report.rows, test_split):
        assert row["sample_id"] == sample.sample_id
        assert row["selected"] == int(np.argmax(row["weights"]))
        assert len(row["hypothesis"].split()) <= tiny_config.model.max_target_len


def test_evaluation_is_deterministic(tiny_config, test_split):
    model = BrainDecoder(tiny_config)
    first, second = evaluate(model, test_split), evaluate(model, test_split)
    assert first.rows == second.rows
    assert first.metrics == second.metrics


def test_hard_select_weights_are_one_hot(tiny_config, test_split):
    config = tiny_config.with_overrides(["router.strategy=hard_select"])
    weights = evaluate(BrainDecoder(config), test_split).weights()
    assert set(np.unique(weights)) <= {0.0, 1.0}


def test_single_projector_routes_everything_to_it(tiny_config, test_split):
    config = tiny_config.with_overrides(["ablation.single_projector=2"])
    report = evaluate(BrainDecoder(config), test_split)
    assert {row["selected"] for row in report.rows} == {2}


def test_shuffled_brain_permutes_the_weights(tiny_config, test_split):
    model = BrainDecoder(tiny_config)
    plain = evaluate(model, test_split).weights()
    shuffled = evaluate(model, test_split, shuffle_brain=True)
    assert shuffled.shuffled
    key = lambda w: sorted(map(tuple, np.round(w, 12)))  # noqa: E731
    assert key(shuffled.weights()) == key(plain)


def test_evaluates_a_checkpoint(tiny_config, tiny_corpus, test_split):
    ckpt = run_phase1(tiny_corpus, tiny_config)
    report = evaluate(ckpt, test_split, split="test")
    assert report.strategy == tiny_config.router.strategy
    assert report.num_samples == len(test_split)


def test_written_report(tiny_config, test_split, tmp_path):
    report = evaluate(BrainDecoder(tiny_config), test_split, split="val")
    paths = write_report(report, tmp_path)
    assert paths["json"].name == "eval_val.json"
    assert read_report(paths["json"]).rows == report.rows

    table = pd.read_csv(paths["table"], sep="\t")
    assert {"sample_id", "covariate", "w0", "w1", "w2", "hypothesis", "reference"} <= set(table.columns)
    assert len(table) == len(test_split)

    metrics = dict(line.split("\t") for line in paths["metrics"].read_text().splitlines())
    assert float(metrics["bleu1"]) == pytest.approx(report.metrics["bleu1"], abs=1e-6)
    assert "oracle_agreement" in metrics

    shuffled = evaluate(BrainDecoder(tiny_config), test_split, split="val", shuffle_brain=True)
    assert write_report(shuffled, tmp_path)["json"].name == "eval_val_shuffled.json"
