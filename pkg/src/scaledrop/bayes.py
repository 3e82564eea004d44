"""Monte-Carlo Scale-Dropout inference and its uncertainty statistics.

Sample matrices keep the Monte-Carlo passes on axis 0: ``(T, C)`` for one
input or ``(T, N, C)`` for a batch. All reductions run over axis 0.
Percentiles use the Hazen definition (linear interpolation between order
statistics placed at ``(k - 0.5) / T``), so the 2.5/97.5 percentiles of
1..100 are exactly 3 and 98.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import entr

from .dropout import DropoutConfig
from .model import ModelSpec, PackedEngine, draw_masks, forward, softmax

PERCENTILE_METHOD = "hazen"
DEFAULT_QUANTILE = 0.1
DEFAULT_THRESHOLD = 0.95
LARGE_MODEL_PARAMS = 100_000


def default_passes(param_count: int) -> int:
    return 20 if param_count >= LARGE_MODEL_PARAMS else 50


@dataclass
class McPrediction:
    samples: np.ndarray  # per-pass softmax outputs, passes on axis 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim < 2 or self.samples.shape[0] < 1:
            raise ValueError("samples need shape (T, ..., C) with T >= 1")

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return predictive_mean(self)

    @property
    def variance(self) -> np.ndarray:
        return predictive_variance(self)

    @property
    def entropy(self):
        return predictive_entropy(self)

    def __getitem__(self, idx) -> "McPrediction":
        """Select inputs from a batched prediction."""
        return McPrediction(self.samples[:, idx])


def pass_rng(seed: int, t: int) -> np.random.Generator:
    """Mask stream for pass ``t``; independent of scheduling and batching."""
    return np.random.default_rng([seed, t])


def mc_forward(model: ModelSpec, x: np.ndarray, T: int, cfg: DropoutConfig, seed: int,
               rates: Sequence[float] | None = None, engine=None, batch_size: int = 512) -> McPrediction:
    """T stochastic passes with fresh per-layer masks, softmax per pass.

    Pass ``t`` draws its masks from ``pass_rng(seed, t)`` and shares them
    across the batch, so each input's prediction is independent of how the
    inputs are batched.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    engine = engine or PackedEngine()
    encoded = model.encode(x)
    out = np.empty((T, len(x), model.n_classes))
    for t in range(T):
        masks = draw_masks(model, cfg, pass_rng(seed, t), rates)
        for start in range(0, len(x), batch_size):
            logits = forward(model, encoded[start : start + batch_size], masks, cfg, engine=engine, encoded=True)
            out[t, start : start + batch_size] = softmax(logits)
    return McPrediction(out)


# Both statistics are taken about the first pass (shifted data), which keeps
# them exact when every pass agrees: the mean is that pass, the variance 0.


def predictive_mean(pred: McPrediction) -> np.ndarray:
    s = pred.samples
    return s[0] + (s - s[0]).mean(axis=0)


def predictive_variance(pred: McPrediction) -> np.ndarray:
    """Population variance (divide by T) per class."""
    s = pred.samples
    return (s - s[0]).var(axis=0)


def confidence_interval(pred: McPrediction, K: float = 95.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class percentile interval covering the central ``K`` percent."""
    if not 0 < K <= 100:
        raise ValueError(f"K must lie in (0, 100], got {K}")
    lo = np.percentile(pred.samples, (100 - K) / 2, axis=0, method=PERCENTILE_METHOD)
    hi = np.percentile(pred.samples, (100 + K) / 2, axis=0, method=PERCENTILE_METHOD)
    return lo, hi


def predictive_entropy(pred: McPrediction):
    """Entropy in nats of the predictive mean."""
    h = entr(predictive_mean(pred)).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


class Verdict(str, Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class OodDecision:
    verdict: np.ndarray  # bool array, True where OOD
    score: np.ndarray
    quantile_level: float
    threshold: float

    @property
    def is_ood(self) -> np.ndarray:
        return self.verdict

    def labels(self) -> list[str]:
        return [Verdict.OOD.value if v else Verdict.ID.value for v in np.atleast_1d(self.verdict)]


def ood_decide(pred: McPrediction, quantile_level: float = DEFAULT_QUANTILE,
               threshold: float = DEFAULT_THRESHOLD) -> OodDecision:
    """OOD when the largest per-class low quantile of the T softmax outputs is below ``threshold``."""
    if not 0 < quantile_level < 1:
        raise ValueError("quantile_level must lie in (0, 1)")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    q = np.quantile(pred.samples, quantile_level, axis=0, method=PERCENTILE_METHOD)
    score = q.max(axis=-1)
    return OodDecision(np.asarray(score < threshold), np.asarray(score), quantile_level, threshold)


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def metrics_suite(is_ood: np.ndarray, correct: np.ndarray) -> dict[str, float]:
    """Accept/reject quality of the OOD rule on labelled data.

    A prediction is accepted when it is not flagged OOD. ``ar`` is
    correct-given-accepted; ``ar_accepted_given_correct`` is the other reading
    of the acceptance rate and coincides with TPR.
    """
    rejected = np.asarray(is_ood, dtype=bool).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if rejected.shape != correct.shape:
        raise ValueError("decisions and correctness differ in length")
    accepted = ~rejected
    n_correct, n_wrong, n_acc = int(correct.sum()), int((~correct).sum()), int(accepted.sum())
    acc_correct = int((accepted & correct).sum())
    rej_wrong = int((rejected & ~correct).sum())
    return {
        "n": int(correct.size),
        "accuracy": _ratio(n_correct, correct.size),
        "ood_rate": _ratio(int(rejected.sum()), correct.size),
        "accepted": _ratio(n_acc, correct.size),
        "tpr": _ratio(acc_correct, n_correct),
        "tnr": _ratio(rej_wrong, n_wrong),
        "ar": _ratio(acc_correct, n_acc),
        "ar_accepted_given_correct": _ratio(acc_correct, n_correct),
    }


def prediction_records(pred: McPrediction, decision: OodDecision, seed: int, K: float = 95.0) -> list[dict]:
    """One JSON-ready record per input of a batched prediction."""
    mean, var = predictive_mean(pred), predictive_variance(pred)
    ent = np.atleast_1d(predictive_entropy(pred))
    lo, hi = confidence_interval(pred, K)
    labels = decision.labels()
    score = np.atleast_1d(decision.score)
    return [{"mean": mean[i].tolist(), "variance": var[i].tolist(), "entropy": float(ent[i]),
             "ci_lo": lo[i].tolist(), "ci_hi": hi[i].tolist(), "verdict": labels[i],
             "score": float(score[i]), "T": pred.T, "seed": seed} for i in range(len(mean))]


def representation_spread(model: ModelSpec, x: np.ndarray, T: int, cfg: DropoutConfig, seed: int) -> float:
    """Mean across-pass variance of the logits; grows as masks decorrelate units."""
    encoded = model.encode(x)
    engine = PackedEngine()
    logits = np.stack([forward(model, encoded, draw_masks(model, cfg, pass_rng(seed, t)), cfg,
                               engine=engine, encoded=True) for t in range(T)])
    return float(logits.var(axis=0).mean())
