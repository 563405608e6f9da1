"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operands have incompatible jet order, dimension or array shape."""


class UnsupportedOrderError(ContractError):
    """Requested Taylor order exceeds what the jet engine supports."""


class NumericFailure(RuntimeError):
    """Training or evaluation produced non-finite or divergent values."""

    def __init__(self, message, *, iteration=None, loss_id=None):
        where = [f"loss {loss_id}"] if loss_id is not None else []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.iteration = iteration
        self.loss_id = loss_id


class VacuousBoundError(NumericFailure):
    """A divergence term overflowed so the bound carries no information."""


class EstimationFailure(RuntimeError):
    """Constant estimation could not produce a finite value."""


class ParseError(ValueError):
    """A serialised artifact is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage was run before the stage it depends on."""
