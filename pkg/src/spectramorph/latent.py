"""Latent estimation network: a per-pixel MLP feeding a fixed linear-mixing head.

The network maps an MSI spectrum (optionally concatenated with a coarse
spectral prior) to ``K`` abundance-like latents; spectra are reconstructed as
``latents @ E`` with the endmember dictionary ``E`` held fixed. Training is
plain numpy: analytic backprop, Adam, and a cosine one-cycle schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from .cube import DataCube, apply_srf, flatten

HIDDEN_ACTIVATIONS = ("relu", "leaky_relu", "gelu", "tanh")
OUTPUT_MODES = ("linear", "relu", "softmax")
LOSSES = ("mae", "mse")
LEAKY_SLOPE = 0.01
INFER_CHUNK = 2048

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(eq=False)
class LenModel:
    """Dense layers stored as ``(out, in)`` weight matrices plus bias vectors.

    ``hidden`` lists the hidden widths; an empty tuple wires the input straight
    to the output layer.
    """

    d_in: int
    K: int
    hidden: tuple
    weights: list
    biases: list
    hidden_activation: str = "relu"
    output_mode: str = "linear"

    @property
    def W1(self) -> np.ndarray:
        return self.weights[0]

    @property
    def b1(self) -> np.ndarray:
        return self.biases[0]

    @property
    def W2(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def b2(self) -> np.ndarray:
        return self.biases[-1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, flat: Sequence[np.ndarray]) -> "LenModel":
        return LenModel(self.d_in, self.K, self.hidden, list(flat[0::2]), list(flat[1::2]),
                        self.hidden_activation, self.output_mode)

    def copy(self) -> "LenModel":
        return self.with_params([p.copy() for p in self.params()])


def _hidden_tuple(hidden: Union[int, Sequence[int]]) -> tuple:
    if isinstance(hidden, (int, np.integer)):
        hidden = () if hidden == 0 else (int(hidden),)
    hidden = tuple(int(h) for h in hidden)
    if any(h < 1 for h in hidden):
        raise ValueError(f"hidden widths must be positive, got {hidden}")
    return hidden


def init_model(
    d_in: int,
    K: int,
    hidden: Union[int, Sequence[int]] = 1024,
    hidden_activation: str = "relu",
    output_mode: str = "linear",
    seed: int = 0,
) -> LenModel:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    if d_in < 1 or K < 1:
        raise ValueError(f"d_in and K must be >= 1, got d_in={d_in}, K={K}")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown hidden activation {hidden_activation!r}")
    if output_mode not in OUTPUT_MODES:
        raise ValueError(f"unknown output mode {output_mode!r}")
    hidden = _hidden_tuple(hidden)
    rng = np.random.default_rng(seed)
    sizes = (d_in,) + hidden + (K,)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return LenModel(d_in, K, hidden, weights, biases, hidden_activation, output_mode)


# ------------------------------------------------------------------ activations


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "gelu":
        return x * ndtr(x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(name)


def _act_grad(name: str, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (x > 0)
    if name == "leaky_relu":
        return g * np.where(x > 0, 1.0, LEAKY_SLOPE)
    if name == "gelu":
        return g * (ndtr(x) + x * np.exp(-0.5 * x * x) / _SQRT_2PI)
    if name == "tanh":
        return g * (1.0 - np.tanh(x) ** 2)
    raise ValueError(name)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _output(mode: str, x: np.ndarray) -> np.ndarray:
    if mode == "linear":
        return x
    if mode == "relu":
        return np.maximum(x, 0.0)
    return _softmax(x)


def _output_grad(mode: str, x: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if mode == "linear":
        return g
    if mode == "relu":
        return g * (x > 0)
    return out * (g - np.sum(g * out, axis=-1, keepdims=True))


# ---------------------------------------------------------------- forward pass


def _check_inputs(model: LenModel, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[-1] != model.d_in:
        raise ValueError(f"model expects {model.d_in} input features, got {Z.shape[-1]}")
    return Z


def forward_batch(model: LenModel, Z: np.ndarray, cache: bool = False):
    """Latents for a ``B x d_in`` batch; with ``cache=True`` also returns pre-activations."""
    Z = _check_inputs(model, Z)
    pre, post = [], [Z]
    x = Z
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        s = x @ w.T + b
        pre.append(s)
        x = _output(model.output_mode, s) if i == last else _act(model.hidden_activation, s)
        post.append(x)
    if cache:
        return x, (pre, post)
    return x


def forward(model: LenModel, z: np.ndarray) -> np.ndarray:
    """Latent vector for a single input spectrum."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("forward takes a single spectrum; use forward_batch for batches")
    return forward_batch(model, z)[0]


def _dense_fixed_order(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise accumulation in input order: each row's result is independent of batch size
    out = np.broadcast_to(b, (x.shape[0], w.shape[0])).copy()
    for j in range(w.shape[1]):
        out += x[:, j : j + 1] * w[:, j]
    return out


def forward_stable(model: LenModel, Z: np.ndarray) -> np.ndarray:
    """Forward pass whose per-row results do not depend on how rows are batched."""
    Z = _check_inputs(model, Z)
    x = Z
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        s = _dense_fixed_order(x, w, b)
        x = _output(model.output_mode, s) if i == last else _act(model.hidden_activation, s)
    return x


def reconstruct(a: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Linear mixing ``a @ E`` for one latent vector or a batch of them."""
    a = np.asarray(a, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if a.shape[-1] != E.shape[0]:
        raise ValueError(f"{a.shape[-1]} latents cannot mix {E.shape[0]} endmembers")
    return a @ E


# ------------------------------------------------------------------ loss/grads


def loss(pred: np.ndarray, target: np.ndarray, kind: str = "mae") -> float:
    """Mean over pixels of the per-pixel L1 (``mae``) or squared L2 (``mse``) spectral error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[None], target[None]
    r = pred - target
    if kind == "mae":
        return float(np.abs(r).sum(axis=1).mean())
    if kind == "mse":
        return float((r * r).sum(axis=1).mean())
    raise ValueError(f"unknown loss {kind!r}")


def _loss_grad(r: np.ndarray, kind: str) -> np.ndarray:
    n = r.shape[0]
    if kind == "mae":
        # np.sign(0) == 0: zero residual contributes no subgradient
        return np.sign(r) / n
    return 2.0 * r / n


@dataclass(eq=False)
class Gradients:
    weights: list
    biases: list
    loss: float

    def flat(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(model: LenModel, Z: np.ndarray, Y: np.ndarray, E: np.ndarray, kind: str = "mae") -> Gradients:
    """Exact gradients of the batch loss w.r.t. every layer; ``E`` receives none."""
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    E = np.asarray(E, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    a, (pre, post) = forward_batch(model, Z, cache=True)
    if Y.shape != (a.shape[0], E.shape[1]):
        raise ValueError(f"targets have shape {Y.shape}, expected {(a.shape[0], E.shape[1])}")
    r = a @ E - Y
    value = loss(a @ E, Y, kind)
    g = _loss_grad(r, kind) @ E.T
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        if i == n_layers - 1:
            g = _output_grad(model.output_mode, pre[i], post[i + 1], g)
        else:
            g = _act_grad(model.hidden_activation, pre[i], g)
        gw[i] = g.T @ post[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i]
    return Gradients(gw, gb, value)


# ------------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    lr_max: float = 1e-3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    warmup_fraction: float = 0.3
    loss: str = "mae"

    def __post_init__(self):
        if not self.lr_max > 0:
            raise ValueError("lr_max must be > 0")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class OneCycleState:
    step: int
    total_steps: int

    @classmethod
    def for_data(cls, cfg: TrainConfig, n_samples: int) -> "OneCycleState":
        return cls(0, cfg.epochs * math.ceil(n_samples / cfg.batch_size))


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(cfg: TrainConfig, state: OneCycleState) -> float:
    """Cosine warm-up from ``lr_max / div_factor`` to ``lr_max``, then cosine decay to ``lr_max / final_div_factor``."""
    if not 0 <= state.step <= state.total_steps:
        raise ValueError(f"step {state.step} outside [0, {state.total_steps}]")
    lr_start = cfg.lr_max / cfg.div_factor
    lr_end = cfg.lr_max / cfg.final_div_factor
    warm = cfg.warmup_fraction * state.total_steps
    if state.step <= warm:
        return _cos_interp(lr_start, cfg.lr_max, state.step / warm if warm > 0 else 1.0)
    return _cos_interp(cfg.lr_max, lr_end, (state.step - warm) / (state.total_steps - warm))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: list, grads: list, moments: tuple, t: int, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update. Returns ``(new_params, (m, v))``; inputs are not modified."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m_prev, v_prev = moments
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


def zero_moments(params: list) -> tuple:
    return [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params]


# --------------------------------------------------------------------- training


@dataclass(eq=False)
class TrainResult:
    model: LenModel
    final_loss: float
    steps: int
    loss_history: list = field(default_factory=list)


def fit_pixels(model: LenModel, inputs: np.ndarray, targets: np.ndarray, E: np.ndarray,
               cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on ``(inputs, targets)`` pixel pairs with a one-cycle schedule.

    Batches are drawn from a fresh permutation each epoch, keyed by ``cfg.seed``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError(f"{inputs.shape[0]} inputs vs {targets.shape[0]} targets")
    E = np.asarray(E, dtype=np.float64)
    n = inputs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    state = OneCycleState.for_data(cfg, n)
    params = [p.copy() for p in model.params()]
    moments = zero_moments(params)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            current = model.with_params(params)
            grads = backward(current, inputs[idx], targets[idx], E, cfg.loss)
            lr = one_cycle_lr(cfg, state)
            state.step += 1
            params, moments = adam_step(params, grads.flat(), moments, state.step, lr)
            epoch_loss += grads.loss * len(idx)
        history.append(epoch_loss / n)
    trained = model.with_params(params)
    final = loss(reconstruct(forward_batch(trained, inputs), E), targets, cfg.loss)
    return TrainResult(trained, final, state.step, history)


def _pixel_inputs(msi: DataCube, csp: Optional[DataCube]) -> np.ndarray:
    z = flatten(msi).astype(np.float64)
    if csp is None:
        return z
    if csp.shape[:2] != msi.shape[:2]:
        raise ValueError(f"CSP is {csp.height}x{csp.width}, MSI is {msi.height}x{msi.width}")
    return np.concatenate([z, flatten(csp).astype(np.float64)], axis=1)


def train(
    lr_msi: DataCube,
    lr_hsi: DataCube,
    E: np.ndarray,
    cfg: TrainConfig,
    csp: Optional[DataCube] = None,
    hidden: Union[int, Sequence[int]] = 1024,
    hidden_activation: str = "relu",
    output_mode: str = "linear",
) -> TrainResult:
    """Fit the network so that ``net(z_n [+ csp_n]) @ E`` matches the LR-HSI pixel ``y_n``."""
    if lr_msi.shape[:2] != lr_hsi.shape[:2]:
        raise ValueError(f"LR-MSI {lr_msi.shape[:2]} and LR-HSI {lr_hsi.shape[:2]} differ spatially")
    E = np.asarray(E, dtype=np.float64)
    if E.shape[1] != lr_hsi.bands:
        raise ValueError(f"dictionary has {E.shape[1]} bands, LR-HSI has {lr_hsi.bands}")
    inputs = _pixel_inputs(lr_msi, csp)
    model = init_model(inputs.shape[1], E.shape[0], hidden, hidden_activation, output_mode, cfg.seed)
    return fit_pixels(model, inputs, flatten(lr_hsi), E, cfg)


def infer(model: LenModel, hr_msi: DataCube, E: np.ndarray,
          csp: Optional[DataCube] = None) -> tuple[DataCube, DataCube]:
    """HR-HSI estimate and the ``K``-band latent (ALLE) cube for every HR-MSI pixel."""
    E = np.asarray(E, dtype=np.float64)
    inputs = _pixel_inputs(hr_msi, csp)
    if inputs.shape[1] != model.d_in:
        raise ValueError(f"model expects {model.d_in} input features, got {inputs.shape[1]}")
    latents = np.empty((inputs.shape[0], model.K))
    for start in range(0, inputs.shape[0], INFER_CHUNK):
        latents[start : start + INFER_CHUNK] = forward_stable(model, inputs[start : start + INFER_CHUNK])
    spectra = _dense_fixed_order(latents, E.T, np.zeros(E.shape[1]))
    h, w = hr_msi.height, hr_msi.width
    return DataCube(spectra.reshape(h, w, -1)), DataCube(latents.reshape(h, w, -1))


def synthesize_lr_msi(lr_hsi: DataCube, srf: np.ndarray) -> DataCube:
    """The training input: the LR-HSI seen through the MSI's spectral response."""
    return apply_srf(lr_hsi, srf)


# ------------------------------------------------------------------ complexity


def count_params(model_or_dims: Union[LenModel, tuple]) -> int:
    """Parameter count; accepts a model or a ``(d_in, hidden, K)`` tuple."""
    if isinstance(model_or_dims, LenModel):
        d_in, hidden, K = model_or_dims.d_in, model_or_dims.hidden, model_or_dims.K
    else:
        d_in, hidden, K = model_or_dims
        hidden = _hidden_tuple(hidden)
    if d_in < 1 or K < 1:
        raise ValueError(f"degenerate model dims d_in={d_in}, K={K}")
    sizes = (d_in,) + tuple(hidden) + (K,)
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def estimate_flops(model: LenModel, pixels: int, bands: int) -> int:
    """Forward-pass FLOPs over ``pixels`` pixels, counting a multiply-add as 2.

    Includes the ``K x bands`` mixing head.
    """
    if model.d_in < 1:
        raise ValueError("degenerate model with d_in < 1")
    sizes = (model.d_in,) + tuple(model.hidden) + (model.K,)
    macs = sum(a * b for a, b in zip(sizes[:-1], sizes[1:])) + model.K * bands
    return int(pixels) * 2 * macs


# ------------------------------------------------------------------ checkpoint

_MAGIC = "spectramorph-len"


def save_model(model: LenModel, path) -> None:
    """Text header (dims, activation, output mode) then little-endian float64 weights."""
    header = [
        _MAGIC,
        f"d_in = {model.d_in}",
        f"K = {model.K}",
        "hidden = " + ",".join(str(h) for h in model.hidden),
        f"hidden_activation = {model.hidden_activation}",
        f"output_mode = {model.output_mode}",
        "dtype = f64le",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> LenModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"end_header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: missing end_header")
    lines = blob[:cut].decode("utf-8").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    fields = dict(line.split(" = ", 1) for line in lines[1:] if " = " in line)
    hidden = tuple(int(x) for x in fields["hidden"].split(",") if x)
    shell = init_model(int(fields["d_in"]), int(fields["K"]), hidden,
                       fields["hidden_activation"], fields["output_mode"])
    payload = np.frombuffer(blob[cut + len(marker):], dtype="<f8")
    expected = sum(p.size for p in shell.params())
    if payload.size != expected:
        raise ValueError(f"{path}: payload has {payload.size} values, expected {expected}")
    flat, offset = [], 0
    for p in shell.params():
        flat.append(payload[offset : offset + p.size].reshape(p.shape).astype(np.float64))
        offset += p.size
    return shell.with_params(flat)
