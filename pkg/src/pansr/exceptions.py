"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class UnsupportedConfigError(ValueError):
    """A kernel size, stride, factor or scale outside the supported set."""


class ConfigError(ValueError):
    """Invalid model/training configuration or config file."""


class DataError(RuntimeError):
    """Unreadable, missing or inconsistent input data."""


class NonFiniteError(FloatingPointError):
    """NaN or infinity showed up in a loss or gradient."""

    def __init__(self, message, batch_indices=None):
        super().__init__(message)
        self.batch_indices = batch_indices


class StateDictMismatchError(KeyError):
    """Checkpoint tensors do not match the model architecture."""

    def __init__(self, missing=(), unexpected=(), shape_mismatch=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.shape_mismatch = list(shape_mismatch)
        super().__init__(self.describe())

    def describe(self):
        lines = ["checkpoint does not match model architecture:"]
        lines += [f"  - missing in checkpoint: {n}" for n in self.missing]
        lines += [f"  + unexpected in checkpoint: {n}" for n in self.unexpected]
        lines += [
            f"  ~ shape mismatch {n}: checkpoint {a} vs model {b}"
            for n, a, b in self.shape_mismatch
        ]
        return "\n".join(lines)

    def __str__(self):
        return self.describe()
