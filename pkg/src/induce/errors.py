"""Exception types shared across the package."""


class InduceError(Exception):
    """Base class for all package-specific errors."""


class UsageError(InduceError):
    """Bad flags, config keys, or option values. CLI exit code 1."""


class DataError(InduceError):
    """Malformed or inconsistent input data. CLI exit code 2."""


class MalformedTree(DataError):
    """A bracketed tree line could not be parsed."""


class GrammarError(DataError):
    """An explicit grammar is malformed or not in Chomsky normal form."""


class AlignmentError(DataError):
    """Parallel resources disagree (token counts, line counts, dims)."""


class EmbeddingFormatError(DataError):
    """An embedding file is truncated or fails its format checks."""


class CheckpointError(DataError):
    """A checkpoint file is truncated or fails its format checks."""


class TooLongError(InduceError):
    """Sentence exceeds the length cap of an exhaustive computation."""


class ZeroProbability(InduceError):
    """The sentence has no parse with positive probability."""


class UnproductiveGrammar(InduceError):
    """Sampling kept exceeding the length cap; grammar yields no short strings."""


class NonScalarRoot(InduceError):
    """backward() was called on a non-scalar node."""


class NonDeterministicLoss(InduceError):
    """A loss closure returned different values on repeated evaluation."""


class NonFiniteGradient(InduceError):
    """A gradient contained NaN or infinity during training."""


class ZeroVariance(InduceError):
    """Correlation is undefined because one input sequence is constant."""


class TooFewRuns(DataError):
    """Run selection was asked for more runs than exist."""
