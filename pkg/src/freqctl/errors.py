"""Exception types shared across the package."""


class FreqctlError(Exception):
    """Base class for errors raised by freqctl."""


class ParseError(FreqctlError):
    """Text that cannot be tokenized into the section format."""


class ValidationError(FreqctlError):
    """Parsed input that violates a case invariant."""


class NonConvergence(FreqctlError):
    """Power-flow Newton iteration hit its cap or broke down."""

    def __init__(self, message, iterations=None, mismatch=None):
        super().__init__(message)
        self.iterations = iterations
        self.mismatch = mismatch


class InitError(FreqctlError):
    """Dynamic initialization inconsistent with the power-flow solution."""


class NewtonDivergence(FreqctlError):
    """Implicit integration step failed to converge."""

    def __init__(self, message, iterations=None, resnorm=None):
        super().__init__(message)
        self.iterations = iterations
        self.resnorm = resnorm


class UnknownBus(FreqctlError):
    """Event or lookup referencing a bus id that does not exist."""


class ConfigError(FreqctlError):
    """Invalid environment, sweep, or CLI configuration."""


class EpisodeDone(FreqctlError):
    """step() called on an episode that is not active."""


class EpisodeInitError(FreqctlError):
    """reset() could not bring the system to the first observation."""


class DimensionMismatch(FreqctlError):
    """Array shape incompatible with the network or environment."""


class Underfull(FreqctlError):
    """Replay buffer sampled before it holds a full batch."""


class CheckpointMismatch(FreqctlError):
    """Checkpoint file malformed or incompatible with the environment."""


class WindowTooLarge(FreqctlError):
    """Summary window exceeds the episode count of some run."""


class TrainingDiverged(FreqctlError):
    """Non-finite loss or parameters encountered during training."""
