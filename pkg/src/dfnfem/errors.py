"""Exception hierarchy shared by all modules."""


class DFNError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameterError(DFNError, ValueError):
    pass


class DomainError(DFNError, ValueError):
    """A material function was evaluated outside its validated range."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class SaturationError(DFNError):
    """Surface concentration left [0, c_max] (depleted or overfilled particle)."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class KineticsOverflowError(DFNError):
    """Nondimensional overpotential exceeded the sinh overflow cap."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class SingularLogError(DFNError):
    """Non-positive electrolyte concentration where ln(c_e) is needed."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class StructuralError(DFNError, ValueError):
    """Mismatched block sizes, shapes or unknown parameter names."""


class MeshError(DFNError, ValueError):
    pass


class StepFailure(DFNError):
    """Newton iteration did not converge for a time step."""

    def __init__(self, message, residual_norm=float("nan")):
        super().__init__(message)
        self.residual_norm = residual_norm


class InitializationError(DFNError):
    pass


class ForwardFailure(DFNError):
    """A forward run failed after exhausting dt-halving retries."""

    def __init__(self, message, tape=None):
        super().__init__(message)
        self.tape = tape


class AdjointFailure(DFNError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(DFNError, ValueError):
    pass


# errors a trial Newton iterate may raise; the damping path treats them as rejected trials
TRIAL_ERRORS = (DomainError, SaturationError, KineticsOverflowError, SingularLogError, FloatingPointError)


class IdentificationError(DFNError):
    """Identification aborted; ``history`` holds the objective values recorded so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
