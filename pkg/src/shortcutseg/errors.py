"""Exception hierarchy shared by every module of the package."""


class ShortcutSegError(Exception):
    """Base class for all errors raised by shortcutseg."""


class DomainError(ShortcutSegError, ValueError):
    """An operation received arguments outside its mathematical domain."""


class UsageError(ShortcutSegError, ValueError):
    """An API was called in a way its contract does not allow."""


class FormatError(ShortcutSegError):
    """A persisted file (checkpoint, manifest, image) is malformed."""


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class NumericError(ShortcutSegError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(ShortcutSegError, ValueError):
    """An experiment configuration failed validation.

    ``problems`` holds every validation message, not just the first one.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
