"""Coordinate networks for the real and imaginary image components."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coords import CoordinateGrid, positional_encode
from .tensorgrad import ShapeError, Tape

BRANCHES = ("real", "imag")
RENDER_CHUNK = 16384


def layer_sizes(in_features: int = 2, hidden_layers: int = 6, width: int = 256, out_features: int = 1):
    """Sizes [in, width x hidden_layers, out]; the first hidden layer is the input layer's output."""
    if hidden_layers < 1:
        raise ValueError("need at least one hidden layer")
    return [in_features] + [width] * hidden_layers + [out_features]


@dataclass
class InrParameters:
    """Two independent MLPs. ``branches[b][l]`` is (W: (fan_out, fan_in), b: (fan_out,))."""

    branches: tuple[list[tuple[np.ndarray, np.ndarray]], list[tuple[np.ndarray, np.ndarray]]]
    activation: str = "sine"
    w0: float = 30.0
    pe_bands: int = 0  # 0: raw (x, y) input

    @property
    def sizes(self):
        layers = self.branches[0]
        return [layers[0][0].shape[1]] + [w.shape[0] for w, _ in layers]

    @property
    def dtype(self):
        return self.branches[0][0][0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Flat list [real W0, real b0, ..., imag W0, imag b0, ...]."""
        return [a for layers in self.branches for wb in layers for a in wb]

    def with_arrays(self, arrays) -> "InrParameters":
        it = iter(arrays)
        branches = tuple([(next(it), next(it)) for _ in layers] for layers in self.branches)
        return InrParameters(branches, self.activation, self.w0, self.pe_bands)

    def n_params(self, per_branch=False) -> int:
        n = sum(w.size + b.size for w, b in self.branches[0])
        return n if per_branch else 2 * n

    def astype(self, dtype) -> "InrParameters":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def network_input(self, grid: CoordinateGrid | np.ndarray) -> np.ndarray:
        c = grid.coords if isinstance(grid, CoordinateGrid) else np.asarray(grid)
        if self.pe_bands:
            c = positional_encode(c, self.pe_bands)
        return c.astype(self.dtype, copy=False)


def _uniform(rng, bound, shape, dtype, factor=1.0):
    limit = bound * factor
    w = (rng.uniform(-bound, bound, size=shape) * factor).astype(dtype)
    # a narrowing cast may round past an unrepresentable bound
    lim = np.dtype(dtype).type(limit)
    if float(lim) > limit:
        lim = np.nextafter(lim, lim.dtype.type(0))
    return np.clip(w, -lim, lim)


def init_siren(sizes, w0: float = 30.0, seed: int = 0, dtype=np.float64) -> InrParameters:
    """SIREN init: first layer U(-1/n, 1/n) * w0, later layers U(-sqrt(6/n), sqrt(6/n)); zero biases.

    The two branches draw from one generator, real branch first.
    """
    if w0 <= 0:
        raise ValueError("w0 must be positive")
    rng = np.random.default_rng(seed)
    branches = []
    for _ in BRANCHES:
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if k == 0:
                w = _uniform(rng, 1.0 / n_in, (n_out, n_in), dtype, factor=w0)
            else:
                w = _uniform(rng, np.sqrt(6.0 / n_in), (n_out, n_in), dtype)
            layers.append((w, np.zeros(n_out, dtype=dtype)))
        branches.append(layers)
    return InrParameters(tuple(branches), "sine", float(w0), 0)


def init_relu_mlp(sizes, seed: int = 0, dtype=np.float64, pe_bands: int = 0) -> InrParameters:
    """ReLU network with He-style uniform weights U(-sqrt(6/n), sqrt(6/n)) and zero biases."""
    rng = np.random.default_rng(seed)
    branches = []
    for _ in BRANCHES:
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            layers.append((_uniform(rng, np.sqrt(6.0 / n_in), (n_out, n_in), dtype),
                           np.zeros(n_out, dtype=dtype)))
        branches.append(layers)
    return InrParameters(tuple(branches), "relu", 0.0, pe_bands)


def _branch_forward(tape: Tape, x: int, leaf_pairs, activation: str) -> int:
    act = tape.sin if activation == "sine" else tape.relu
    h = x
    last = len(leaf_pairs) - 1
    for k, (w, b) in enumerate(leaf_pairs):
        h = tape.affine(h, w, b)
        if k < last:
            h = act(h)
    return h


def eval_image(params: InrParameters, grid: CoordinateGrid, tape: Tape, requires_grad=True):
    """Record both branches on ``tape``.

    Returns ``(image, leaves)``: ``image`` is a node of shape (2, d1, d2) and
    ``leaves`` lists the parameter leaf ids in ``params.arrays()`` order.
    """
    inp = params.network_input(grid)
    if inp.shape[1] != params.sizes[0]:
        raise ShapeError(f"network expects {params.sizes[0]} input features, grid gives {inp.shape[1]}")
    x = tape.const(inp)
    leaves = [tape.leaf(a, requires_grad) for a in params.arrays()]
    outs = []
    n = len(params.branches[0])
    for bi in range(2):
        ids = leaves[2 * n * bi: 2 * n * (bi + 1)]
        pairs = list(zip(ids[0::2], ids[1::2]))
        out = _branch_forward(tape, x, pairs, params.activation)
        outs.append(tape.reshape(out, (grid.d1, grid.d2)))
    return tape.pair(*outs), leaves


def render(params: InrParameters, grid: CoordinateGrid, chunk: int = RENDER_CHUNK) -> np.ndarray:
    """Complex image on ``grid`` without gradient tracking, evaluated in row chunks."""
    inp = params.network_input(grid)
    if inp.shape[1] != params.sizes[0]:
        raise ShapeError(f"network expects {params.sizes[0]} input features, grid gives {inp.shape[1]}")
    parts = []
    for layers in params.branches:
        rows = []
        for start in range(0, inp.shape[0], chunk):
            tape = Tape()
            x = tape.const(inp[start:start + chunk])
            pairs = [(tape.const(w), tape.const(b)) for w, b in layers]
            rows.append(tape.value(_branch_forward(tape, x, pairs, params.activation))[:, 0])
        parts.append(np.concatenate(rows).reshape(grid.d1, grid.d2))
    return parts[0] + 1j * parts[1]
