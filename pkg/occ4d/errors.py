"""Exception hierarchy. Each class carries the process exit code the CLI reports."""


class Occ4dError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigurationError(Occ4dError):
    """Task mode requirements or option values cannot be satisfied."""

    exit_code = 3


class ConstructionError(Occ4dError):
    """A scene or window cannot be prepared (missing pose, bad track, ...)."""

    exit_code = 4


class SpecMismatchError(Occ4dError):
    """Grid specs, dimensions or frame counts disagree."""

    exit_code = 5


class FormatError(Occ4dError):
    """A file was rejected; the detail names the offending offset or field."""

    exit_code = 6
