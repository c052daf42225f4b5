"""Exception types shared across the package."""


class XlstError(Exception):
    """Base class for all package errors."""


class ShapeError(XlstError, ValueError):
    """Operands have incompatible shapes or dimensions."""


class NumericError(XlstError, ArithmeticError):
    """An op produced or was fed a value outside its numeric domain."""

    def __init__(self, op_name, message):
        self.op_name = op_name
        super().__init__(f"{op_name}: {message}")


class ContractError(XlstError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(XlstError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(XlstError, ValueError):
    """Corpus or label data does not satisfy what the operation needs."""


class LabelError(DataError):
    """A class label lies outside the valid range."""


class InputTooShortError(DataError):
    """A sequence is too short for the requested operation."""


class DegenerateFrameError(XlstError, ValueError):
    """An embedding frame has (near-)zero norm and cannot be normalized."""

    def __init__(self, frame_index, norm):
        self.frame_index = frame_index
        super().__init__(
            f"frame {frame_index} has norm {norm:.3e}, below the 1e-12 floor"
        )


class InfeasibleAlignmentError(XlstError, ValueError):
    """No valid CTC alignment exists for the given label/frame lengths."""


class OracleScaleError(XlstError, ValueError):
    """A brute-force oracle was asked to enumerate beyond its size bound."""


class StateError(XlstError, ValueError):
    """Trainer state (EMA, optimizer) is inconsistent with the parameters."""


class TrainingDivergenceError(XlstError, ArithmeticError):
    """A gradient or parameter became non-finite during training."""

    def __init__(self, param_name, message="non-finite gradient"):
        self.param_name = param_name
        super().__init__(f"{message} for parameter '{param_name}'")


class CheckpointError(XlstError, ValueError):
    """A checkpoint or corpus file failed validation on load."""


class LockError(XlstError, RuntimeError):
    """Another process already owns the run directory."""
