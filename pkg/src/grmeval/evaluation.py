"""Cross-validated predictive comparison of calibration and scoring methods.

The metric is an out-of-sample deviance: score the left-out people against
item parameters fitted without them, summarize each score as a Gaussian
(mean, sd), and accumulate

    -2 * sum log P(x_pi | Gaussian ability summary)

over their observed responses, with the category probabilities Gaussian-
averaged through the closed probit form.  Lower is better.  A point-estimate
variant forces every sd to zero before averaging, which reduces each term to
the plain likelihood at the point score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from grmeval.bayes import BayesConfig, sample_posterior, summarize_posterior
from grmeval.mml import MmlConfig, calibrate_mml
from grmeval.model import (
    MISSING,
    AbilityEstimate,
    AbilityEstimates,
    ItemParameters,
    ModelError,
    ResponseMatrix,
    expected_category_probabilities,
    expected_category_probability_exact,
)
from grmeval.scoring import TruncatedNormalPrior, score_batch

CALIBRATION_METHODS = ("bayes", "mml")
SCORING_METHODS = ("eap", "wle", "mml")


@dataclass(frozen=True)
class FoldPartition:
    """Disjoint balanced fold assignment (labels 0..K-1) covering everyone."""

    assignments: np.ndarray
    n_folds: int
    seed: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.assignments, dtype=int)
        if arr.ndim != 1:
            raise ModelError("assignments must be 1-D")
        sizes = np.bincount(arr, minlength=self.n_folds)
        if sizes.sum() != arr.shape[0] or (arr < 0).any() or (arr >= self.n_folds).any():
            raise ModelError("assignments must cover exactly the folds 0..K-1")
        if sizes.max() - sizes.min() > 1:
            raise ModelError(f"fold sizes must differ by at most 1, got {sizes}")
        arr.setflags(write=False)
        object.__setattr__(self, "assignments", arr)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != k)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(np.bincount(self.assignments, minlength=self.n_folds))


def partition_folds(n_persons: int, n_folds: int, seed: int) -> FoldPartition:
    """Seeded uniform balanced partition; fold sizes differ by at most one."""
    if n_folds < 2:
        raise ModelError("need at least 2 folds")
    if n_persons < n_folds:
        raise ModelError(f"cannot split {n_persons} persons into {n_folds} folds")
    order = np.random.default_rng(seed).permutation(n_persons)
    assignments = np.empty(n_persons, dtype=int)
    assignments[order] = np.arange(n_persons) % n_folds
    return FoldPartition(assignments=assignments, n_folds=n_folds, seed=seed)


@dataclass(frozen=True)
class DevianceReport:
    calibration: str
    scoring: str
    variant: str  # "expected" | "point"
    per_fold: dict  # fold label -> deviance over that fold's responses
    total: float
    fold_sizes: dict = field(default_factory=dict)
    #: fold label -> reason, for folds whose calibration did not converge;
    #: these do not contribute to `total`.
    excluded_folds: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if abs(self.total - sum(self.per_fold.values())) > 1e-9 * (1 + abs(self.total)):
            raise ModelError("total must equal the sum of included fold deviances")


def _row_deviance(row, ability: AbilityEstimate, items: ItemParameters, cols, exact: bool) -> float:
    total = 0.0
    for k, item in enumerate(items):
        x = int(row[cols[k]])
        if x == MISSING:
            continue
        if not 0 <= x < item.n_categories:
            raise ModelError(
                f"response {x} out of range for item {item.item_id!r} "
                f"with {item.n_categories} categories"
            )
        if exact:
            p = expected_category_probability_exact(ability, item, x)
        else:
            p = expected_category_probabilities(np.float64(ability.mean), ability.sd, item)[x]
        total += -2.0 * float(np.log(p))
    return total


def _columns(matrix: ResponseMatrix, items: ItemParameters) -> np.ndarray:
    col_of = {iid: k for k, iid in enumerate(matrix.item_ids)}
    try:
        return np.array([col_of[it.item_id] for it in items], dtype=int)
    except KeyError as exc:
        raise ModelError(f"item {exc.args[0]!r} not present in response matrix") from exc


def fold_deviance(
    abilities: AbilityEstimates,
    left_out: ResponseMatrix,
    items: ItemParameters,
    exact: bool = False,
) -> float:
    """Deviance of the left-out responses under Gaussian ability summaries.

    Pass ``exact=True`` to replace the closed probit form with Gauss-Hermite
    quadrature of the true Gaussian-averaged probabilities (sensitivity
    analysis; slower).
    """
    if len(abilities) != left_out.n_persons:
        raise ModelError("one ability summary per left-out person is required")
    if not np.all(np.isfinite(abilities.theta)) or not np.all(np.isfinite(abilities.sd)):
        raise ModelError("ability summaries must be finite to evaluate deviance")
    cols = _columns(left_out, items)
    total = 0.0
    for p in range(left_out.n_persons):
        total += _row_deviance(
            left_out.entries[p], abilities[p], items, cols, exact
        )
    return total


def point_deviance(
    abilities: AbilityEstimates,
    left_out: ResponseMatrix,
    items: ItemParameters,
    exact: bool = False,
) -> float:
    """Same deviance with every sd forced to zero, whatever the scorer said."""
    return fold_deviance(abilities.with_zero_sd(), left_out, items, exact)


@dataclass(frozen=True)
class MethodConfigs:
    """Per-method settings threaded through an evaluation run."""

    mml: MmlConfig = MmlConfig()
    bayes: BayesConfig = BayesConfig()
    prior: TruncatedNormalPrior = TruncatedNormalPrior()
    threads: int = 1


def calibrate(
    train: ResponseMatrix, method: str, configs: MethodConfigs, seed_offset: int = 0
):
    """Fit items on a training matrix; returns (items, train_abilities, ok)."""
    if method == "mml":
        cfg = replace(configs.mml, seed=configs.mml.seed + seed_offset)
        fit = calibrate_mml(train, cfg)
        return fit.items, fit.abilities, fit.converged
    if method == "bayes":
        cfg = replace(configs.bayes, seed=configs.bayes.seed + seed_offset)
        draws = sample_posterior(train, cfg, threads=configs.threads)
        items, abilities = summarize_posterior(draws)
        return items, abilities, draws.converged
    raise ModelError(f"unknown calibration method {method!r}; expected one of {CALIBRATION_METHODS}")


def cross_validate(
    responses: ResponseMatrix,
    n_folds: int,
    calib_method: str,
    scoring_method: str,
    configs: MethodConfigs | None = None,
    seed: int = 0,
    exact: bool = False,
) -> tuple[DevianceReport, DevianceReport]:
    """Leave-one-fold-out deviance for one (calibration, scoring) pairing.

    Returns the Gaussian-summary report and the point-estimate report.  A
    fold whose calibration fails to converge is reported under
    ``excluded_folds`` and left out of the totals, so a sweep always
    completes.
    """
    configs = configs or MethodConfigs()
    if calib_method not in CALIBRATION_METHODS:
        raise ModelError(
            f"unknown calibration method {calib_method!r}; expected one of {CALIBRATION_METHODS}"
        )
    if scoring_method not in SCORING_METHODS:
        raise ModelError(
            f"unknown scoring method {scoring_method!r}; expected one of {SCORING_METHODS}"
        )
    part = partition_folds(responses.n_persons, n_folds, seed)
    per_fold_e: dict[int, float] = {}
    per_fold_p: dict[int, float] = {}
    sizes: dict[int, int] = {}
    excluded: dict[int, str] = {}
    for k in range(n_folds):
        train = responses.subset(part.complement(k))
        test = responses.subset(part.members(k))
        sizes[k] = test.n_persons
        try:
            items, _, ok = calibrate(train, calib_method, configs, seed_offset=k + 1)
            abilities = score_batch(
                test, items, scoring_method, configs.prior, threads=configs.threads
            )
            dev_e = fold_deviance(abilities, test, items, exact)
            dev_p = point_deviance(abilities, test, items, exact)
        except ModelError as exc:
            excluded[k] = str(exc)
            continue
        if not ok:
            excluded[k] = "calibration did not converge"
            continue
        per_fold_e[k] = dev_e
        per_fold_p[k] = dev_p
    expected = DevianceReport(
        calibration=calib_method,
        scoring=scoring_method,
        variant="expected",
        per_fold=per_fold_e,
        total=float(sum(per_fold_e.values())),
        fold_sizes=sizes,
        excluded_folds=excluded,
    )
    point = DevianceReport(
        calibration=calib_method,
        scoring=scoring_method,
        variant="point",
        per_fold=per_fold_p,
        total=float(sum(per_fold_p.values())),
        fold_sizes=sizes,
        excluded_folds=dict(excluded),
    )
    return expected, point


def transfer_evaluate(
    items: ItemParameters,
    control: ResponseMatrix,
    scoring_method: str,
    configs: MethodConfigs | None = None,
    calibration_label: str = "full",
    variant: str = "expected",
    exact: bool = False,
) -> DevianceReport:
    """Deviance of an untouched control sample against fixed item parameters."""
    configs = configs or MethodConfigs()
    abilities = score_batch(
        control, items, scoring_method, configs.prior, threads=configs.threads
    )
    if variant == "expected":
        dev = fold_deviance(abilities, control, items, exact)
    elif variant == "point":
        dev = point_deviance(abilities, control, items, exact)
    else:
        raise ModelError(f"unknown deviance variant {variant!r}")
    return DevianceReport(
        calibration=calibration_label,
        scoring=scoring_method,
        variant=variant,
        per_fold={0: dev},
        total=dev,
        fold_sizes={0: control.n_persons},
    )


def score_agreement(a: AbilityEstimates, b: AbilityEstimates):
    """Pearson correlation of two score sets plus the paired values.

    The paired table (n, 2) is what scatter plots are drawn from.
    """
    if len(a) != len(b):
        raise ModelError("score sets must cover the same persons")
    x = np.asarray(a.theta, dtype=float)
    y = np.asarray(b.theta, dtype=float)
    if x.std() == 0.0 or y.std() == 0.0:
        raise ModelError("correlation undefined for zero-variance scores")
    r = float(np.corrcoef(x, y)[0, 1])
    return r, np.column_stack([x, y])
