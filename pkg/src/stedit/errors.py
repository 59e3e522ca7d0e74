"""Exception hierarchy shared across the package.

ConfigError (and subclasses) map to CLI exit code 1; everything else that
escapes a command maps to exit code 2.
"""


class SteditError(Exception):
    """Base class for all package errors."""


class ConfigError(SteditError):
    """Bad configuration: invalid parameter values, unknown config keys."""


class ShapeError(ConfigError):
    """Tensor dimension mismatch; message names both shapes."""


class ContractError(SteditError):
    """An operation was called outside its contract (caller bug)."""


class CharsetError(SteditError):
    """Text contains a character outside the glyph/vocab charset."""


class LengthError(SteditError):
    """Text exceeds the tokenizer's maximum length."""


class VocabError(SteditError):
    """Token id out of range for the vocabulary."""


class TransformError(SteditError):
    """Degenerate geometric transform (e.g. singular homography)."""


class CapacityError(SteditError):
    """Scene placement failed; try fewer or shorter words."""


class EvalError(SteditError):
    """Evaluation cannot proceed (degenerate bbox, empty input)."""


class TrainingFault(SteditError):
    """Training diverged (NaN loss); message carries step diagnostics."""
