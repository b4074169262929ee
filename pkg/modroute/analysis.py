"""
Router analysis: text-projector weight against sentence abstractness, a linear
modality probe, and figures.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402
from sklearn.linear_model import LogisticRegression  # noqa: E402

from .evaluation import EvalReport  # noqa: E402
from .exceptions import MetricError  # noqa: E402
from .metrics import pearson  # noqa: E402
from .synthdata import BrainSample, modality_name  # noqa: E402

logger = logging.getLogger(__name__)


@dataclass
class CovariateAnalysis:
    r: float
    p: float
    table: pd.DataFrame
    modality: int = 0
    window: int = 15

    def summary(self) -> str:
        return f"r = {self.r:.3f} (p = {self.p:.3g}), n = {len(self.table)}"


def weight_covariate_analysis(
    report: EvalReport,
    samples: Optional[Sequence[BrainSample]] = None,
    window: int = 15,
    modality: int = 0,
) -> CovariateAnalysis:
    """Pearson r between each sample's weight on ``modality`` and its covariate.

    The table is sorted by covariate and carries a rolling mean of the weight
    (columns sample_id, covariate, weight, rolling_mean).
    """
    if not report.rows:
        raise MetricError("weight_covariate_analysis: report has no per-sample rows")
    covariates = {s.sample_id: s.covariate for s in samples} if samples is not None else {}
    records = []
    for row in report.rows:
        if len(row["weights"]) <= modality:
            raise MetricError(f"weight_covariate_analysis: no router weight for modality {modality}")
        records.append(
            {
                "sample_id": row["sample_id"],
                "covariate": covariates.get(row["sample_id"], row["covariate"]),
                "weight": row["weights"][modality],
            }
        )
    table = pd.DataFrame.from_records(records)
    r, p = pearson(table["covariate"].to_numpy(), table["weight"].to_numpy())

    table = table.sort_values(["covariate", "sample_id"], kind="mergesort").reset_index(drop=True)
    table["rolling_mean"] = table["weight"].rolling(window, min_periods=1).mean()
    return CovariateAnalysis(r=r, p=p, table=table, modality=modality, window=window)


def modality_probe(train: Sequence[BrainSample], test: Sequence[BrainSample], seed: int = 0) -> float:
    """Held-out accuracy of a logistic-regression probe from brain vector to planted modality."""
    x_train = np.stack([s.brain for s in train])
    y_train = np.array([s.oracle_modality for s in train])
    x_test = np.stack([s.brain for s in test])
    y_test = np.array([s.oracle_modality for s in test])
    if len(np.unique(y_train)) < 2:
        raise MetricError("modality_probe: training split holds a single modality")
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


def plot_weight_covariate(analysis: CovariateAnalysis, path) -> Path:
    """Scatter of weight vs covariate with the rolling-mean line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sns.set_theme(style="whitegrid")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    sns.scatterplot(data=analysis.table, x="covariate", y="weight", ax=ax, alpha=0.5, s=18, color="#4c72b0")
    sns.lineplot(data=analysis.table, x="covariate", y="rolling_mean", ax=ax, color="#c44e52", errorbar=None)
    name = modality_name(analysis.modality)
    ax.set_xlabel("sentence abstractness")
    ax.set_ylabel(f"brain-{name} projector weight")
    ax.set_title(f"{name} projector weight vs abstractness: {analysis.summary()}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def read_training_log(log_path) -> pd.DataFrame:
    return pd.read_csv(log_path, sep="\t")


def plot_training_log(log_path, path) -> Path:
    """Loss components over steps, one panel per column."""
    log = read_training_log(log_path)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["L_cap", "L_align", "L_balance", "total"]
    long = log.melt(id_vars="step", value_vars=columns, var_name="component", value_name="loss")
    sns.set_theme(style="whitegrid")
    grid = sns.relplot(
        data=long, x="step", y="loss", col="component", col_wrap=2, kind="line",
        height=3, aspect=1.4, facet_kws={"sharey": False},
    )
    grid.savefig(path, dpi=120)
    plt.close(grid.figure)
    return path
