import dataclasses
import math
import os
import typing

import numpy as np
import scipy.stats

from vseam import utils

DEFAULT_FOLDS = 1000
DEFAULT_FOLD_SIZE = 100

# Stands in for a p-value that underflows: sd = 0 with a non-zero mean.
P_VALUE_SENTINEL = 1e-301


class MisalignedResultsError(utils.ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class SignificanceReport:
    baseline: str
    mean_delta_pp: float
    sd: float
    t_statistic: float
    p_value: float
    folds: int
    fold_size: int
    seed: int
    replace: bool = True
    alternative: str = "two-sided"

    def __post_init__(self) -> None:
        if self.folds < 1 or self.fold_size < 1:
            raise utils.ValidationError("folds and fold_size must be positive")
        if not 0.0 <= self.p_value <= 1.0:
            raise utils.ValidationError(f"p-value {self.p_value} outside [0, 1]")

    def to_json(self) -> typing.Dict[str, typing.Any]:
        data = dataclasses.asdict(self)
        if not math.isfinite(self.t_statistic):
            # JSON has no infinities.
            data["t_statistic"] = str(self.t_statistic)
        return {"schema": "vseam.significance/1", **data}

    def make_report(self) -> str:
        return os.linesep.join(
            [
                f"📈 Significance vs {self.baseline} ({self.alternative})",
                f"- Mean Δ: {self.mean_delta_pp:+.2f} pp (sd {self.sd:.2f})",
                f"- t = {self.t_statistic:.3f}, p = {self.p_value:.3g}",
                f"- {self.folds} folds of {self.fold_size}, seed {self.seed}",
            ]
        )


def fold_deltas(
    a: typing.Mapping[str, bool],
    b: typing.Mapping[str, bool],
    folds: int = DEFAULT_FOLDS,
    fold_size: int = DEFAULT_FOLD_SIZE,
    seed: int = 0,
    replace: bool = True,
) -> np.ndarray:
    """Per-fold accuracy(A) − accuracy(B), in percentage points."""
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise MisalignedResultsError(
            f"Result sets cover different examples, e.g. `{missing[0]}`"
        )
    ids = sorted(a)
    if not ids:
        raise MisalignedResultsError("Result sets are empty")
    if fold_size > len(ids):
        raise utils.ValidationError(
            f"fold_size {fold_size} exceeds the {len(ids)} available examples"
        )
    diff = np.array([int(a[i]) - int(b[i]) for i in ids], dtype=np.float64)
    rng = np.random.default_rng(seed)
    deltas = np.empty(folds, dtype=np.float64)
    for fold in range(folds):
        sample = rng.choice(len(ids), size=fold_size, replace=replace)
        deltas[fold] = 100.0 * diff[sample].mean()
    return deltas


def bootstrap_compare(
    a: typing.Mapping[str, bool],
    b: typing.Mapping[str, bool],
    folds: int = DEFAULT_FOLDS,
    fold_size: int = DEFAULT_FOLD_SIZE,
    seed: int = 0,
    baseline: str = "baseline",
    replace: bool = True,
) -> SignificanceReport:
    """Paired bootstrap of A − B with a one-sample t-test of the fold deltas."""
    deltas = fold_deltas(a, b, folds, fold_size, seed, replace)
    mean = float(deltas.mean())
    sd = float(deltas.std(ddof=1)) if folds > 1 else 0.0
    if sd == 0.0:
        t_statistic = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        p_value = 1.0 if mean == 0.0 else P_VALUE_SENTINEL
    else:
        result = scipy.stats.ttest_1samp(deltas, 0.0)
        t_statistic = float(result.statistic)
        p_value = float(result.pvalue)
    return SignificanceReport(
        baseline=baseline,
        mean_delta_pp=mean,
        sd=sd,
        t_statistic=t_statistic,
        p_value=p_value,
        folds=folds,
        fold_size=fold_size,
        seed=seed,
        replace=replace,
    )
