"""Graded response model calibration, scoring, and predictive evaluation."""

from grmeval.model import (
    MISSING,
    AbilityEstimate,
    AbilityEstimates,
    Item,
    ItemParameters,
    ModelError,
    ResponseMatrix,
    category_probability,
    expected_category_probability,
    fisher_information,
    logistic_normal_integral,
    response_log_likelihood,
    simulate_responses,
)

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "AbilityEstimate",
    "AbilityEstimates",
    "Item",
    "ItemParameters",
    "ModelError",
    "ResponseMatrix",
    "category_probability",
    "expected_category_probability",
    "fisher_information",
    "logistic_normal_integral",
    "response_log_likelihood",
    "simulate_responses",
    "__version__",
]
