"""Small dense networks with a hand-rolled reverse-mode tape.

Everything is float64 numpy.  A network is a flat layer list ending in a
dense output layer; the only layer kinds are ``Dense`` (relu/tanh/linear)
and ``Dropout`` (inverted scaling, active only in training mode).  The
forward pass records per-layer intermediates on a tape; ``backward`` walks
the tape once and accumulates parameter gradients into a ``ParamStore``.

When an orthogonalization basis Q is passed to ``forward``, the input of
the final dense layer is projected onto the orthogonal complement of
col(Q) batchwise; the projector is treated as a constant in the backward
pass, so gradients are projected the same way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "linear"
    use_bias: bool = True


@dataclass(frozen=True)
class Dropout:
    rate: float


Layer = Dense | Dropout


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    inputs: tuple[str, ...]
    layers: tuple[Layer, ...]

    def validate(self) -> None:
        if not self.inputs:
            raise ConfigError(f"network {self.name!r} has no input variables")
        if not self.layers:
            raise ConfigError(f"network {self.name!r} has no layers")
        last = self.layers[-1]
        if not isinstance(last, Dense):
            raise ConfigError(f"network {self.name!r} must end in a dense layer")
        for layer in self.layers:
            if isinstance(layer, Dense):
                if layer.units < 1:
                    raise ConfigError(f"network {self.name!r}: units must be positive")
                if layer.activation not in ACTIVATIONS:
                    raise ConfigError(
                        f"network {self.name!r}: unknown activation {layer.activation!r}"
                    )
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ConfigError(
                        f"network {self.name!r}: dropout rate must be in [0, 1)"
                    )
            else:
                raise ConfigError(f"network {self.name!r}: unknown layer {layer!r}")

    @property
    def out_width(self) -> int:
        last = self.layers[-1]
        assert isinstance(last, Dense)
        return last.units


class ParamStore:
    """Named float64 parameter arrays with matching gradient slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.values[name] = np.asarray(value, np.float64)
        self.grads[name] = np.zeros_like(self.values[name])

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def add_grad(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.values[k][...] = v


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_network_params(
    spec: NetworkSpec,
    input_width: int,
    store: ParamStore,
    prefix: str,
    rng: np.random.Generator,
) -> int:
    """Register Glorot-uniform weights and zero biases; returns out width."""
    spec.validate()
    width = input_width
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            store.add(f"{prefix}/L{i}/W", glorot_uniform(rng, width, layer.units))
            if layer.use_bias:
                store.add(f"{prefix}/L{i}/b", np.zeros(layer.units))
            width = layer.units
    return width


class Tape:
    """Recorded forward intermediates; single use."""

    def __init__(self):
        self.ops: list[tuple] = []
        self.consumed = False


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def forward(
    spec: NetworkSpec,
    store: ParamStore,
    prefix: str,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | int | None = None,
    oz_basis: np.ndarray | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run the network on a batch; deterministic given (params, batch, rng).

    ``oz_basis`` is an orthonormal basis of the constraint column space for
    this batch; when given, the final dense layer's input h is replaced by
    h - Q (Q'h).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h = np.asarray(x, np.float64)
    if h.ndim != 2:
        raise ConfigError(f"network {spec.name!r}: input must be 2-d, got {h.ndim}-d")
    tape = Tape()
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        if i == last and oz_basis is not None:
            h = h - oz_basis @ (oz_basis.T @ h)
            tape.ops.append(("project", oz_basis))
        if isinstance(layer, Dense):
            wname = f"{prefix}/L{i}/W"
            bname = f"{prefix}/L{i}/b" if layer.use_bias else None
            z = h @ store.values[wname]
            if bname is not None:
                z = z + store.values[bname]
            a = _activate(z, layer.activation)
            tape.ops.append(("dense", wname, bname, h, layer.activation, a))
            h = a
        else:
            if training and layer.rate > 0.0:
                mask = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                h = h * mask
                tape.ops.append(("dropout", mask))
    return h, tape


def backward(tape: Tape, out_grad: np.ndarray, store: ParamStore) -> np.ndarray:
    """Accumulate parameter gradients for d(loss)/d(output) = out_grad.

    Returns the gradient with respect to the network input.  A tape can be
    consumed once.
    """
    if tape.consumed:
        raise ConfigError("tape already consumed")
    tape.consumed = True
    g = np.asarray(out_grad, np.float64)
    for op in reversed(tape.ops):
        kind = op[0]
        if kind == "dense":
            _, wname, bname, h_in, activation, a_out = op
            if activation == "relu":
                dz = g * (a_out > 0.0)
            elif activation == "tanh":
                dz = g * (1.0 - a_out * a_out)
            else:
                dz = g
            store.add_grad(wname, h_in.T @ dz)
            if bname is not None:
                store.add_grad(bname, dz.sum(axis=0))
            g = dz @ store.values[wname].T
        elif kind == "dropout":
            g = g * op[1]
        elif kind == "project":
            q = op[1]
            g = g - q @ (q.T @ g)
    return g


def penultimate_features(
    spec: NetworkSpec, store: ParamStore, prefix: str, x: np.ndarray
) -> np.ndarray:
    """Inference-mode input of the final dense layer (no projection)."""
    h = np.asarray(x, np.float64)
    for i, layer in enumerate(spec.layers[:-1]):
        if isinstance(layer, Dense):
            z = h @ store.values[f"{prefix}/L{i}/W"]
            if layer.use_bias:
                z = z + store.values[f"{prefix}/L{i}/b"]
            h = _activate(z, layer.activation)
    return h
