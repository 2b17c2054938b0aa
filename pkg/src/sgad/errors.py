"""Exception hierarchy shared by every sgad module."""


class SGADError(Exception):
    """Base class for all package errors."""


class ConfigError(SGADError, ValueError):
    pass


class StructuralError(SGADError, ValueError):
    """Tensor or mask shapes do not match the network structure."""


class DomainError(SGADError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(SGADError, ArithmeticError):
    """A loss term or gradient became non-finite."""


class IngestionError(SGADError, ValueError):
    """Malformed dataset file. ``offset`` is the byte offset of the bad record."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PruneError(SGADError, ValueError):
    """Refused pruning of a block that some sample still executes."""

    def __init__(self, block, sample):
        super().__init__(f"block {block} is executed by sample {sample}; refusing to prune")
        self.block = block
        self.sample = sample
