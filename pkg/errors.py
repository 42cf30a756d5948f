"""
Exception hierarchy for the DyeNet pipeline
Library code raises these; only app.py turns them into exit codes
"""


class DyeNetError(Exception):
    """Base class for every error raised by the pipeline"""
    exit_code = 1


class ContractViolation(DyeNetError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, ids)"""
    exit_code = 2


class SpecError(ContractViolation):
    """Invalid synthetic dataset specification"""


class DegenerateEmbeddingError(ContractViolation):
    """Embedding norm collapsed before normalization; the proposal is rejected"""

    def __init__(self, norm):
        super().__init__(f"Degenerate embedding: pre-normalization norm {norm:.3e} < 1e-8")
        self.norm = norm


class LoadError(DyeNetError, OSError):
    """A file or directory could not be read or has malformed content"""
    exit_code = 3


class MissingDataError(LoadError):
    """Data required by the selected mode is not available"""


class TrainingDivergedError(DyeNetError, RuntimeError):
    """Loss became non-finite during training"""

    def __init__(self, step, loss):
        super().__init__(f"Training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss
