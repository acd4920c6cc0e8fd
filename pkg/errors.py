# errors.py
"""
Error hierarchy for the SpecRef editor.

Every class carries the process exit code the CLI returns for it
(see README.md, "Exit codes").
"""


class SpecRefError(Exception):
    exit_code = 1


# -------------------------
# schedule / scheduler
# -------------------------
class InvalidScheduleConfig(SpecRefError):
    """Bad schedule parameters or run configuration."""
    exit_code = 10


class InvalidTimestep(SpecRefError):
    exit_code = 11


class ShapeMismatch(SpecRefError):
    exit_code = 12


class NonFiniteInput(SpecRefError):
    exit_code = 13


# -------------------------
# attention / reference cache
# -------------------------
class NonBinaryMask(SpecRefError):
    exit_code = 20


class EmptySourceMask(SpecRefError):
    """Softmax over an all-masked key row is undefined."""
    exit_code = 21


class DuplicateEntry(SpecRefError):
    exit_code = 22


class MissingEntry(SpecRefError):
    """A gating policy referenced a (step, layer) that was never recorded."""
    exit_code = 23


class IncompleteCache(SpecRefError):
    exit_code = 24


# -------------------------
# masks
# -------------------------
class EmptyMask(SpecRefError):
    exit_code = 30


class DimensionMismatch(SpecRefError):
    exit_code = 31


class MissingRecords(SpecRefError):
    exit_code = 32


# -------------------------
# editing pipeline
# -------------------------
class MissingTrajectoryEntry(SpecRefError):
    exit_code = 40


class ConsistencyError(SpecRefError):
    """Input files disagree on T, L or tensor shapes."""
    exit_code = 41


# -------------------------
# persistence
# -------------------------
class IoError(SpecRefError):
    exit_code = 50


class CorruptHeader(SpecRefError):
    exit_code = 51


class TruncatedPayload(SpecRefError):
    exit_code = 52


class ChecksumMismatch(SpecRefError):
    exit_code = 53


class UnsupportedFormat(SpecRefError):
    exit_code = 54


class MalformedHeader(SpecRefError):
    exit_code = 55


# -------------------------
# selftest
# -------------------------
class SelftestFailed(SpecRefError):
    exit_code = 60
