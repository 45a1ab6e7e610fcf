class VesicleException(Exception):
    exit_code = 2


class ParameterError(VesicleException):
    """An argument or tunable is outside its allowed range."""

    exit_code = 1


class DataError(VesicleException):
    """An input file or data set cannot be used as given."""

    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    """A payload is shorter than its header promises."""

    pass


class ChecksumError(CorruptionError):
    pass


class VersionError(DataError):
    pass


class ModelCompatibilityError(DataError):
    """A model was trained against a different feature channel order."""

    pass


class ShortfallError(DataError):
    """There are too few voxels of one class to draw a balanced training set."""

    def __init__(self, label, wanted, available):
        self.label = label
        self.wanted = wanted
        self.available = available
        super(ShortfallError, self).__init__(
            "Not enough {} voxels to sample from: wanted {}, found {}".format(
                label, wanted, available
            )
        )


class BlockError(DataError):
    def __init__(self, block_index, message):
        self.block_index = block_index
        super(BlockError, self).__init__("Block {}: {}".format(block_index, message))


def raise_io_error(path, exc):
    """Re-raise an OS-level failure with the offending path attached."""
    raise DataError("{}: {}".format(path, getattr(exc, "strerror", None) or exc)) from exc


class PlottingException(VesicleException):
    pass
