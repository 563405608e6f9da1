"""Taylor-jet forward mode nested inside a reverse-mode tape."""

from ..errors import ContractError
from . import tape as ops
from .jets import (
    MAX_ORDER,
    TaylorJet,
    constant_jet,
    jet_apply,
    jet_mul,
    jet_seed,
    jet_univariate,
    multi_indices,
    n_coeffs,
)
from .tape import Tape, Var


def reverse_sweep(tape: Tape, output, wrt, coefficient=None):
    """Gradient of one scalar with respect to the leaves ``wrt``.

    ``output`` may be a ``Var`` holding a single number or a ``TaylorJet``
    with a one-element batch, in which case ``coefficient`` (a multi-index,
    default the primal) selects which Taylor coefficient is differentiated.
    """
    if isinstance(output, TaylorJet):
        alpha = coefficient if coefficient is not None else (0,) * output.dims
        output = output.coefficient(alpha)
    elif coefficient is not None:
        raise ContractError("coefficient selection needs a TaylorJet output")
    if output.value.size != 1:
        raise ContractError(f"reverse sweep target must be scalar, got shape {output.value.shape}")
    return tape.gradient(ops.reshape(output, ()), wrt)


__all__ = [
    "MAX_ORDER",
    "Tape",
    "TaylorJet",
    "Var",
    "constant_jet",
    "jet_apply",
    "jet_mul",
    "jet_seed",
    "jet_univariate",
    "multi_indices",
    "n_coeffs",
    "ops",
    "reverse_sweep",
]
