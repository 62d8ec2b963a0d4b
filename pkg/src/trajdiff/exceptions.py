"""Exception types raised across the package.

Everything derives from ValueError or RuntimeError so callers that do not
care about the distinction can catch the broad builtin class.
"""


class ParseError(ValueError):
    """An interaction file row could not be parsed. Carries the line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyCorpusError(ValueError):
    """The interaction file contained no usable rows."""


class EmptySplitError(ValueError):
    """Filtering left a split with zero trajectories."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class VocabularyError(ValueError):
    """An item id falls outside the fitted vocabulary, or a checkpoint was
    produced against a different vocabulary."""


class NumericsError(RuntimeError):
    """A non-finite value showed up where the computation cannot continue."""
