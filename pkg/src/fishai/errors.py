"""Exception types raised across the pipeline.

Every error derives from :class:`FishAIError` so callers (and the CLI) can
catch pipeline failures in one place.
"""


class FishAIError(Exception):
    """Base class for all pipeline errors."""


# taxonomy / dataset
class EmptyField(FishAIError, ValueError):
    pass


class MissingFile(FishAIError, FileNotFoundError):
    pass


class MalformedRow(FishAIError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DuplicateId(FishAIError, ValueError):
    pass


class AlreadySplit(FishAIError, ValueError):
    pass


class UnsplitManifest(FishAIError, ValueError):
    pass


class NoClasses(FishAIError, ValueError):
    pass


# promptgen
class EmptyCategory(FishAIError, ValueError):
    pass


class EmptyResponse(FishAIError, ValueError):
    pass


class ClientFailure(FishAIError, RuntimeError):
    def __init__(self, message, attempts=0, category=None):
        super().__init__(message)
        self.attempts = attempts
        self.category = category


class DescribeFailures(FishAIError, RuntimeError):
    """Aggregated per-category failures from ``describe_all``."""

    def __init__(self, failures, records):
        names = ", ".join(f.category or "?" for f in failures)
        super().__init__(f"{len(failures)} categories failed: {names}")
        self.failures = failures
        self.records = records


# augmentor
class MissingDescription(FishAIError, KeyError):
    def __init__(self, categories):
        self.categories = sorted(categories)
        super().__init__("missing descriptions for: " + ", ".join(self.categories))

    def __str__(self):
        return self.args[0]


class BackendFailure(FishAIError, RuntimeError):
    def __init__(self, message, failures=None, results=None):
        super().__init__(message)
        self.failures = failures or []
        self.results = results or []


# model
class BadShape(FishAIError, ValueError):
    pass


class NonFinite(BadShape):
    pass


class EmptyText(FishAIError, ValueError):
    pass


class DimMismatch(FishAIError, ValueError):
    pass


class NonSquare(FishAIError, ValueError):
    pass


class EmptyPrototypes(FishAIError, ValueError):
    pass


# trainer
class OutOfRange(FishAIError, ValueError):
    pass


class NonFiniteLoss(FishAIError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class ConfigMismatch(FishAIError, ValueError):
    pass


class CorruptCheckpoint(FishAIError, ValueError):
    pass


# evaluator
class EmptyPredictions(FishAIError, ValueError):
    pass


class NonFiniteScore(FishAIError, ValueError):
    pass


class MissingBin(FishAIError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing bin"


class LevelMismatch(FishAIError, ValueError):
    pass


class WorkspaceLocked(FishAIError, RuntimeError):
    pass
