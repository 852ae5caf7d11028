"""Exception hierarchy.

Every error carries a short ``category`` string and a process exit code so the
command line can report failures as a single machine-parsable line.
"""


class StereoDiffError(Exception):
    category = "Error"
    exit_code = 1


class DimensionMismatch(StereoDiffError, ValueError):
    category = "DimensionMismatch"
    exit_code = 3


class NonPositiveDepth(StereoDiffError, ValueError):
    category = "NonPositiveDepth"
    exit_code = 4


class NoValidPixels(StereoDiffError, ValueError):
    category = "NoValidPixels"
    exit_code = 5


class NonFiniteGradient(StereoDiffError, FloatingPointError):
    category = "NonFiniteGradient"
    exit_code = 6


class NonFiniteLoss(StereoDiffError, FloatingPointError):
    category = "NonFiniteLoss"
    exit_code = 7

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DegenerateFit(StereoDiffError, ValueError):
    category = "DegenerateFit"
    exit_code = 8


class DivergedTraining(StereoDiffError, FloatingPointError):
    category = "DivergedTraining"
    exit_code = 9


class MalformedHeader(StereoDiffError, ValueError):
    category = "MalformedHeader"
    exit_code = 10


class TruncatedData(StereoDiffError, ValueError):
    category = "TruncatedData"
    exit_code = 11


class MissingField(StereoDiffError, KeyError):
    category = "MissingField"
    exit_code = 12

    def __str__(self):
        return str(self.args[0]) if self.args else self.category


class NonRigidExtrinsic(StereoDiffError, ValueError):
    category = "NonRigidExtrinsic"
    exit_code = 13


class ConfigError(StereoDiffError, ValueError):
    category = "ConfigError"
    exit_code = 2
