"""Losses, optimizers and the full-grid training loop."""
from __future__ import annotations

import csv
import json
import math
import time
from decimal import Decimal
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .coilmodel import PolyCoefficients, build_basis, eval_sensitivities, init_poly
from .coords import CoordinateGrid, make_grid
from .inr import InrParameters, eval_image, init_relu_mlp, init_siren, layer_sizes
from .mrop import KSpaceVolume, forward_model, ifft2c
from .tensorgrad import Tape, backward

# (w0, lambda) found per dataset by the hyperparameter search
PRESETS = {
    "knee": (31.0, 3.8),
    "macaque": (24.0, 36.7),
    "brain": (17.0, 1.5),
    "lesion": (22.0, 4.2),
}

VARIANTS = ("full", "no-tv", "no-kc", "relu", "relu-pe")

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ReconConfig:
    w0: float = 31.0
    lam: float = 3.8
    iters: int = 1500
    lr_inr: float = 1e-4
    lr_inr_decay: float = 0.8
    lr_poly: float = 0.1
    lr_poly_decay: float = 0.5
    decay_every: int = 500
    poly_order: int = 15
    hidden_layers: int = 6
    width: int = 256
    activation: str = "sine"
    use_pe: bool = False
    pe_bands: int = 6
    use_tv: bool = True
    use_kc: bool = True
    seed: int = 0
    poly_seed: int = 0
    precision: str = "float32"
    # Adam runs on the weights of sin(omega * (W' x + b')), omega = w0 for the first
    # layer and omega_hidden after it; equivalent to scaling those layers' learning rate
    omega_lr: bool = True
    omega_hidden: float = 30.0
    # measured k-space is scaled so the peak of its root-sum-of-squares zero-filled
    # image equals data_peak while fitting (0 disables); the network output is scaled back
    data_peak: float = 200.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr_inr < 0 or self.lr_poly < 0:
            raise ValueError("learning rates must be >= 0")
        if not (0 < self.lr_inr_decay <= 1 and 0 < self.lr_poly_decay <= 1):
            raise ValueError("decay factors must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.w0 <= 0 and self.activation == "sine":
            raise ValueError("w0 must be positive")
        if self.omega_hidden <= 0:
            raise ValueError("omega_hidden must be positive")
        if self.data_peak < 0:
            raise ValueError("data_peak must be >= 0")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def with_variant(self, variant: str) -> "ReconConfig":
        """Ablation settings: no-tv, no-kc, relu (plain ReLU MLP), relu-pe (ReLU MLP on encoded input)."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        d = asdict(self)
        if variant == "no-tv":
            d["use_tv"] = False
        elif variant == "no-kc":
            d["use_kc"] = False
        elif variant == "relu":
            d.update(activation="relu", use_pe=False)
        elif variant == "relu-pe":
            d.update(activation="relu", use_pe=True)
        return ReconConfig(**d)

    # JSON uses "lambda" for the TV weight
    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ReconConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def dc_loss(predicted: int, measured: KSpaceVolume, tape: Tape) -> int:
    """Component-wise L1 misfit sum_j |Re r_j| + |Im r_j| over sampled entries.

    ``predicted`` must already be masked; measured data are zero off the mask,
    so unsampled entries contribute nothing.
    """
    dtype = tape.value(predicted).dtype
    meas = np.stack([measured.data.real, measured.data.imag]).astype(dtype)
    return tape.l1(tape.sub(tape.const(meas), predicted))


def tv_loss(image: int, tape: Tape) -> int:
    """Anisotropic TV of the real and imaginary parts, forward differences, replicate edge."""
    return tape.add(tape.l1(tape.diff_x(image)), tape.l1(tape.diff_y(image)))


def total_loss(dc: int, tv: int | None, lam: float, tape: Tape) -> int:
    if tv is None:
        return dc
    return tape.add(dc, tape.scale(tv, lam))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class NonFiniteError(FloatingPointError):
    """Training produced NaN or Inf."""

    def __init__(self, message, iteration=None, last_good=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, t: int,
              beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[k] if names else f"parameter {k}"
            raise NonFiniteError(f"non-finite gradient in {name}")
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
    state.t = t
    return params, state


def lr_schedule(initial: float, factor: float, every: int, t: int) -> float:
    """Step decay: initial * factor ** (t // every), with t counted from 0.

    The product is formed in decimal so that e.g. 1e-4 * 0.8**2 gives 6.4e-05
    rather than 6.400000000000001e-05.
    """
    if not 0 < factor <= 1:
        raise ValueError("decay factor must lie in (0, 1]")
    return float(Decimal(repr(float(initial))) * Decimal(repr(float(factor))) ** (t // every))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    iteration: int
    dc: float
    tv: float
    total: float
    lr_inr: float
    lr_poly: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "L_DC", "L_TV", "L_tot", "lr_inr", "lr_poly", "seconds"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.dc), repr(r.tv), repr(r.total),
                            repr(r.lr_inr), repr(r.lr_poly), f"{r.seconds:.6f}"])


def init_models(cfg: ReconConfig, n_coils: int):
    dtype = cfg.dtype
    if cfg.activation == "sine":
        sizes = layer_sizes(2, cfg.hidden_layers, cfg.width)
        params = init_siren(sizes, cfg.w0, cfg.seed, dtype)
    else:
        n_in = 4 * cfg.pe_bands if cfg.use_pe else 2
        sizes = layer_sizes(n_in, cfg.hidden_layers, cfg.width)
        params = init_relu_mlp(sizes, cfg.seed, dtype, cfg.pe_bands if cfg.use_pe else 0)
    coeffs = init_poly(n_coils, cfg.poly_order, cfg.poly_seed, dtype)
    return params, coeffs


def layer_lr_scales(params: InrParameters, cfg: ReconConfig) -> list[float]:
    """Learning-rate multiplier per network array, in ``params.arrays()`` order."""
    n = len(params.branches[0])
    per_layer = [1.0] * n
    if cfg.omega_lr and params.activation == "sine":
        per_layer = [cfg.w0] + [cfg.omega_hidden] * (n - 2) + [1.0] if n > 1 else [1.0]
    return [per_layer[k // 2] for _ in range(2) for k in range(2 * n)]


def data_scale(measured: KSpaceVolume, peak: float) -> float:
    """Factor that brings the RSS zero-filled image peak of ``measured`` to ``peak`` (1 when disabled)."""
    if peak == 0:
        return 1.0
    rss = np.sqrt(np.sum(np.abs(ifft2c(measured.data)) ** 2, axis=0))
    top = float(rss.max())
    return peak / top if top > 0 else 1.0


def scale_output_layer(params: InrParameters, factor: float) -> InrParameters:
    """Multiply the last layer of both branches by ``factor``, i.e. scale the rendered image."""
    arrays = params.arrays()
    per_branch = len(arrays) // 2
    out = []
    for k, a in enumerate(arrays):
        out.append(a * a.dtype.type(factor) if k % per_branch >= per_branch - 2 else a.copy())
    return params.with_arrays(out)


def build_loss(params: InrParameters, coeffs: PolyCoefficients, grid: CoordinateGrid, basis: np.ndarray,
               measured: KSpaceVolume, cfg: ReconConfig, tape: Tape):
    """Record the full objective. Returns (loss, dc, tv or None, network leaves, coefficient leaf)."""
    image, net_leaves = eval_image(params, grid, tape)
    sens, coef_leaf = eval_sensitivities(coeffs, basis, grid.shape, tape)
    pred = forward_model(image, sens, measured.mask, tape)
    dc = dc_loss(pred, measured, tape)
    tv = tv_loss(image, tape) if cfg.use_tv else None
    return total_loss(dc, tv, cfg.lam, tape), dc, tv, net_leaves, coef_leaf


def train(measured: KSpaceVolume, cfg: ReconConfig, params=None, coeffs=None, callback=None):
    """Jointly fit the image networks and the coil polynomials.

    Every iteration evaluates the whole grid, then applies one Adam step to
    the networks and, with its own optimizer and schedule, to the
    coefficients. Returns ``(params, coeffs, history)``. Loss values in the
    history are in the internally scaled data units (see ``data_peak``).
    The scale lives in the network's output layer: supplied networks are
    multiplied by it on entry, and every returned network (including the
    last-good checkpoint) renders the image in the units of ``measured``.
    Coefficients are never rescaled.
    """
    if not measured.mask.kept_lines:
        raise ValueError("measurement mask is empty")
    scale = data_scale(measured, cfg.data_peak)
    if scale != 1.0:
        measured = KSpaceVolume(measured.data * scale, measured.mask)
    d1, d2 = measured.shape
    grid = make_grid(d1, d2)
    basis = build_basis(grid, cfg.poly_order)
    if params is not None and scale != 1.0:
        params = scale_output_layer(params, scale)
    if params is None or coeffs is None:
        p0, c0 = init_models(cfg, measured.n_coils)
        params = params or p0
        coeffs = coeffs or c0
    net = [a.copy() for a in params.arrays()]
    coef = coeffs.coeffs.copy()
    names = [f"{b}.layer{k // 2}.{'W' if k % 2 == 0 else 'b'}"
             for b in ("real", "imag") for k in range(2 * len(params.branches[0]))]
    lr_scales = layer_lr_scales(params, cfg)
    net_state = AdamState.zeros_like(net)
    coef_state = AdamState.zeros_like([coef])
    history = TrainHistory()
    t_start = time.perf_counter()
    last_good = None

    for it in range(cfg.iters):
        if not (all(np.all(np.isfinite(a)) for a in net) and np.all(np.isfinite(coef))):
            raise NonFiniteError(f"non-finite parameters at iteration {it}", it, last_good)
        cur_params = params.with_arrays(net)
        cur_coeffs = PolyCoefficients(coef)
        tape = Tape()
        loss, dc, tv, net_leaves, coef_leaf = build_loss(cur_params, cur_coeffs, grid, basis, measured, cfg, tape)
        l_tot = float(tape.value(loss))
        l_dc = float(tape.value(dc))
        l_tv = float(tape.value(tv)) if tv is not None else 0.0
        if not math.isfinite(l_tot):
            raise NonFiniteError(f"non-finite loss at iteration {it}", it, last_good)
        last_good = (scale_output_layer(params.with_arrays(net), 1.0 / scale), PolyCoefficients(coef.copy()))
        grads = backward(tape, loss)
        lr_n = lr_schedule(cfg.lr_inr, cfg.lr_inr_decay, cfg.decay_every, it)
        lr_c = lr_schedule(cfg.lr_poly, cfg.lr_poly_decay, cfg.decay_every, it)
        try:
            net_grads = [grads[i] for i in net_leaves]
            if all(f == 1.0 for f in lr_scales):
                adam_step(net, net_grads, net_state, lr_n, it + 1, names=names)
            else:
                for k, f in enumerate(lr_scales):
                    sub = AdamState([net_state.m[k]], [net_state.v[k]])
                    adam_step([net[k]], [net_grads[k]], sub, lr_n * f, it + 1, names=[names[k]])
                net_state.t = it + 1
            g_coef = grads[coef_leaf].reshape(coef.shape)
            adam_step([coef], [g_coef], coef_state, lr_c, it + 1, names=["coefficients"])
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} at iteration {it}", it, last_good) from None
        history.records.append(TrainRecord(it, l_dc, l_tv, l_tot, lr_n, lr_c, time.perf_counter() - t_start))
        if callback is not None:
            callback(history.records[-1])
        del tape, grads
    out = params.with_arrays(net)
    if scale != 1.0:
        out = scale_output_layer(out, 1.0 / scale)
    return out, PolyCoefficients(coef), history
