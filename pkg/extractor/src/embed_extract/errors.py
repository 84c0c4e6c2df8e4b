class ExtractionError(Exception):
    """Base class for everything this tool raises on purpose."""


class ModelLoadError(ExtractionError):
    """The model or its tokenizer could not be loaded or is unusable."""


class TokenAlignmentError(ExtractionError):
    """A corpus token could not be matched to any subword."""


class FormatError(ExtractionError):
    """An embedding file does not follow the EMB1 layout."""
