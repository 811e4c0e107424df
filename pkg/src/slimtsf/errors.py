"""Typed errors shared across the pipeline.

Plain argument misuse raises the built-in ValueError; the classes here mark
conditions the CLI maps to dedicated exit codes.
"""


class SlimTsfError(Exception):
    """Base class for pipeline errors."""


class SchemaError(SlimTsfError):
    """An input file is missing required columns or keys."""


class DataValidationError(SlimTsfError):
    """Data violates an invariant (ragged series, NaN where forbidden, ...)."""


class LabelError(SlimTsfError):
    """A label string cannot be parsed into a flare class."""


class TrainingError(SlimTsfError):
    """Training cannot proceed (e.g. single-class input)."""


class UndefinedScoreError(SlimTsfError):
    """A skill score is undefined for the given contingency table.

    Raised instead of returning 0 or NaN: silent zeros corrupt grid-search
    comparisons. Callers decide the policy (exclude the fold, fail, ...).
    """
