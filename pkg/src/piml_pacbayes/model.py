"""Tanh multilayer perceptron ``u_theta: R^2 -> R`` evaluated on Taylor jets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import TaylorJet, Tape, Var, jet_apply, jet_seed, ops
from .errors import ContractError, ParseError

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MLPSpec:
    hidden: tuple = (32, 32)
    activation: str = "tanh"
    input_dim: int = 2
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if not self.hidden:
            raise ContractError("MLP needs at least one hidden layer")
        if any(w < 1 for w in self.hidden):
            raise ContractError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list:
        widths = (self.input_dim,) + self.hidden + (self.output_dim,)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)

    def slices(self) -> list:
        """``(weight_slice, bias_slice, shape)`` per layer in the flat layout."""
        out, pos = [], 0
        for fan_in, fan_out in self.layer_shapes:
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b, (fan_in, fan_out)))
        return out

    def digest(self) -> str:
        text = json.dumps({"hidden": list(self.hidden), "activation": self.activation,
                           "input_dim": self.input_dim, "output_dim": self.output_dim},
                          sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector; layer ``k`` is ``W_k`` (row-major) then ``b_k``."""

    values: np.ndarray
    spec: MLPSpec

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if vals.size != self.spec.n_params:
            raise ContractError(f"expected {self.spec.n_params} parameters, got {vals.size}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size

    def layers(self) -> list:
        return [(self.values[w].reshape(shape), self.values[b]) for w, b, shape in self.spec.slices()]

    @classmethod
    def from_layers(cls, layers, spec: MLPSpec) -> "ParamVector":
        return cls(np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers]), spec)

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.spec)

    def distance(self, other: "ParamVector") -> float:
        return float(np.linalg.norm(self.values - other.values))


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    std: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        std = np.array(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ContractError("normalizer mean/std length mismatch")
        if np.any(~(std > 0)):
            raise ContractError(f"normalizer std must be strictly positive, got {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, points) -> "Normalizer":
        pts = np.asarray(points, dtype=np.float64)[:, :2]
        std = pts.std(axis=0)
        return cls(pts.mean(axis=0), np.where(std > 0, std, 1.0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def init_params(spec: MLPSpec, seed: int) -> ParamVector:
    """Uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases alike."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return ParamVector.from_layers(layers, spec)


def perturb(theta: ParamVector, sigma: float, seed: int) -> ParamVector:
    """``theta + eps`` with ``eps ~ N(0, sigma^2 I)``."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if sigma == 0:
        return theta
    eps = np.random.default_rng(seed).standard_normal(len(theta))
    return theta.replace(theta.values + sigma * eps)


def sample_at_distance(center: ParamVector, radius: float, seed: int) -> ParamVector:
    """Point at exactly ``radius`` from ``center`` in a uniformly random direction."""
    if radius < 0:
        raise ContractError("radius must be non-negative")
    if radius == 0:
        return center
    rng = np.random.default_rng(seed)
    while True:
        g = rng.standard_normal(len(center))
        norm = np.linalg.norm(g)
        if norm > 0:
            break
    return center.replace(center.values + radius * (g / norm))


# --------------------------------------------------------------------------
# evaluation


def layer_vars(theta) -> list:
    """Per-layer ``(W, b)`` as ``Var`` objects.

    ``theta`` may be a ``ParamVector`` (constants), a tracked flat ``Var`` with
    its spec attached as ``(var, spec)``, or a ready list of pairs.
    """
    if isinstance(theta, ParamVector):
        return [(Var(w), Var(b)) for w, b in theta.layers()]
    if isinstance(theta, tuple) and len(theta) == 2 and isinstance(theta[1], MLPSpec):
        flat, spec = theta
        return [
            (ops.reshape(flat[w], shape), flat[b])
            for w, b, shape in spec.slices()
        ]
    return list(theta)


def watch_layers(tape: Tape, theta: ParamVector) -> list:
    """Separate leaves per weight/bias, as needed for per-sample gradients."""
    return [(tape.watch(w), tape.watch(b)) for w, b in theta.layers()]


def mlp_jet(layers, inputs: list, activation: str = "tanh") -> TaylorJet:
    """Push input jets (one per coordinate, same order/batch) through the MLP."""
    order, dims = inputs[0].order, inputs[0].dims
    h = ops.stack([j.coeffs for j in inputs], axis=-1)  # (C, N, in)
    for k, (w, b) in enumerate(layers):
        h = ops.linear(h, w, b)
        if k < len(layers) - 1 and activation != "identity":
            h = jet_apply(activation, TaylorJet(h, order, dims)).coeffs
    return TaylorJet(h[..., 0], order, dims)


class Field:
    """Callable ``u(x_jet, t_jet) -> jet`` backed by network parameters."""

    def __init__(self, theta, spec: MLPSpec, normalizer: Normalizer | None = None):
        self.layers = layer_vars(theta)
        self.spec = spec
        self.normalizer = normalizer or Normalizer()

    def __call__(self, x: TaylorJet, t: TaylorJet) -> TaylorJet:
        m, s = self.normalizer.mean, self.normalizer.std
        z = [(x - m[0]) * (1.0 / s[0]), (t - m[1]) * (1.0 / s[1])]
        return mlp_jet(self.layers, z, self.spec.activation)


def forward_jets(theta, spec: MLPSpec, x, order: int, normalizer: Normalizer | None = None) -> TaylorJet:
    """Jet of ``u_theta`` at the points ``x`` (shape ``(N, 2)`` or ``(2,)``)."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xj = jet_seed(pts[:, 0], 0, order)
    tj = jet_seed(pts[:, 1], 1, order)
    return Field(theta, spec, normalizer)(xj, tj)


def predict(theta: ParamVector, X, normalizer: Normalizer | None = None) -> np.ndarray:
    """Plain forward pass, no jets."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    norm = normalizer or Normalizer()
    h = (X[:, :2] - norm.mean) / norm.std
    layers = theta.layers()
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1 and theta.spec.activation == "tanh":
            h = np.tanh(h)
    return h[:, 0]


# --------------------------------------------------------------------------
# checkpoints: MAGIC, u32 header length, JSON header, little-endian f64 values

MAGIC = b"PIPBCKP1"


def save_checkpoint(path, theta: ParamVector, *, seed: int, normalizer: Normalizer | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "spec_hash": theta.spec.digest(),
        "hidden": list(theta.spec.hidden),
        "activation": theta.spec.activation,
        "seed": int(seed),
        "normalizer": (normalizer or Normalizer()).to_dict(),
        "n_params": len(theta),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(theta.values.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(theta, normalizer, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a parameter checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n].decode())
    spec = MLPSpec(hidden=tuple(header["hidden"]), activation=header["activation"])
    if spec.digest() != header["spec_hash"]:
        raise ParseError(f"{path}: spec hash mismatch")
    values = np.frombuffer(data[12 + n :], dtype="<f8")
    if values.size != header["n_params"]:
        raise ParseError(f"{path}: expected {header['n_params']} values, found {values.size}")
    norm = Normalizer(header["normalizer"]["mean"], header["normalizer"]["std"])
    return ParamVector(values.astype(np.float64), spec), norm, header
