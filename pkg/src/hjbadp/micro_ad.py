"""Small fully-connected networks with hand-written derivatives.

Every routine accepts either a single input vector of shape ``(n_in,)`` or a
batch of shape ``(batch, n_in)``. Gradients with respect to parameters are
always summed over the batch, so callers that want a mean loss scale the
upstream vector by ``1 / batch`` themselves.

Four derivative products are provided:

* ``param_grad``        d(upstream . y) / d params       (reverse mode)
* ``input_grad``        dy / dx for scalar y             (reverse mode)
* ``directional_derivative``  <dy/dx, v>                 (forward tangent)
* ``mixed_param_grad``  d<dy/dx, v> / d params           (forward-over-reverse)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolation,
    DimensionError,
    TrainingDivergenceError,
)

CHECKPOINT_HEADER = "HJBADP-CKPT-1"
ACTIVATIONS = ("linear", "elu", "tanh", "softplus", "scaled_tanh")


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "linear"
    scale: float = 1.0  # only read by scaled_tanh

    def __post_init__(self):
        if int(self.input_width) < 1 or int(self.output_width) < 1:
            raise ConfigurationError(
                f"layer widths must be >= 1, got {self.input_width}->{self.output_width}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.activation == "scaled_tanh" and not self.scale > 0:
            raise ConfigurationError("scaled_tanh needs scale > 0")

    def to_dict(self) -> dict:
        d = {
            "input_width": int(self.input_width),
            "output_width": int(self.output_width),
            "activation": self.activation,
        }
        if self.activation == "scaled_tanh":
            d["scale"] = float(self.scale)
        return d


def activate(spec: LayerSpec, z: np.ndarray):
    """Return the activation and its first and second derivatives at ``z``."""
    kind = spec.activation
    if kind == "linear":
        return z, np.ones_like(z), np.zeros_like(z)
    if kind == "elu":
        # alpha = 1
        e = np.exp(np.minimum(z, 0.0))
        pos = z > 0
        return np.where(pos, z, e - 1.0), np.where(pos, 1.0, e), np.where(pos, 0.0, e)
    if kind == "softplus":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.logaddexp(0.0, z), s, s * (1.0 - s)
    th = np.tanh(z)
    d1 = 1.0 - th * th
    c = spec.scale if kind == "scaled_tanh" else 1.0
    return c * th, c * d1, -2.0 * c * th * d1


@dataclass(frozen=True, eq=False)
class ParamGradient:
    """Per-layer gradient arrays, congruent with an ``MlpParams``."""

    weights: tuple
    biases: tuple

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def __mul__(self, c: float) -> "ParamGradient":
        return ParamGradient(tuple(c * w for w in self.weights), tuple(c * b for b in self.biases))

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)

    @classmethod
    def zeros_like(cls, params: "MlpParams") -> "ParamGradient":
        return cls(
            tuple(np.zeros_like(w) for w in params.weights),
            tuple(np.zeros_like(b) for b in params.biases),
        )


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple
    biases: tuple
    specs: tuple
    seed: int | None = None

    def __post_init__(self):
        _check_chain(self.specs)
        for w, b, s in zip(self.weights, self.biases, self.specs):
            if w.shape != (s.output_width, s.input_width) or b.shape != (s.output_width,):
                raise DimensionError(f"parameter shapes {w.shape}, {b.shape} do not match {s}")

    @property
    def input_width(self) -> int:
        return self.specs[0].input_width

    @property
    def output_width(self) -> int:
        return self.specs[-1].output_width

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """Row-major weights then bias, layer by layer."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} values, got {vec.shape}")
        weights, biases, i = [], [], 0
        for s in self.specs:
            n = s.output_width * s.input_width
            weights.append(vec[i : i + n].reshape(s.output_width, s.input_width).copy())
            i += n
            biases.append(vec[i : i + s.output_width].copy())
            i += s.output_width
        return MlpParams(tuple(weights), tuple(biases), self.specs, self.seed)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layers": [s.to_dict() for s in self.specs],
            "values": self.flat().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        specs = tuple(LayerSpec(**s) for s in d["layers"])
        template = mlp_init(specs, seed=0)
        p = template.with_flat(d["values"])
        return cls(p.weights, p.biases, specs, d.get("seed"))


def _check_chain(specs) -> None:
    if len(specs) == 0:
        raise ConfigurationError("a network needs at least one layer")
    for k in range(len(specs) - 1):
        if specs[k].output_width != specs[k + 1].input_width:
            raise ConfigurationError(
                f"layer {k} outputs {specs[k].output_width} values but layer {k + 1} "
                f"expects {specs[k + 1].input_width}"
            )


def mlp_init(specs, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, drawn from ``numpy.random.default_rng(seed)``."""
    specs = tuple(specs)
    _check_chain(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        limit = np.sqrt(6.0 / (s.input_width + s.output_width))
        weights.append(rng.uniform(-limit, limit, size=(s.output_width, s.input_width)))
        biases.append(np.zeros(s.output_width))
    return MlpParams(tuple(weights), tuple(biases), specs, seed)


def mlp_specs(n_in: int, width: int, hidden_layers: int, n_out: int, output: str,
              hidden: str = "elu", scale: float = 1.0) -> tuple:
    """Layer specs for ``hidden_layers`` equal-width hidden layers and one output layer."""
    if hidden_layers < 0:
        raise ConfigurationError("hidden_layers must be >= 0")
    widths = [n_in] + [width] * hidden_layers
    specs = [LayerSpec(widths[k], widths[k + 1], hidden) for k in range(hidden_layers)]
    specs.append(LayerSpec(widths[-1], n_out, output, scale))
    return tuple(specs)


@dataclass(eq=False)
class ForwardCache:
    params: MlpParams
    single: bool
    activations: list  # a_0 (the input) .. a_L
    d1: list  # activation slopes per layer
    d2: list = field(default_factory=list)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.input_width:
        raise DimensionError(f"network expects inputs of width {params.input_width}, got shape {x.shape}")
    return x2, single


def mlp_forward(params: MlpParams, x):
    """Evaluate the network; returns ``(output, cache)``."""
    a, single = _as_batch(params, x)
    acts, d1s, d2s = [a], [], []
    for w, b, s in zip(params.weights, params.biases, params.specs):
        a, g1, g2 = activate(s, a @ w.T + b)
        acts.append(a)
        d1s.append(g1)
        d2s.append(g2)
    out = a[0] if single else a
    return out, ForwardCache(params, single, acts, d1s, d2s)


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    """Forward pass without building a cache."""
    a = np.asarray(x, dtype=float)
    for w, b, s in zip(params.weights, params.biases, params.specs):
        z = a @ w.T
        z += b
        a = activate_value(s, z)
    return a


def activate_value(spec: LayerSpec, z):
    kind = spec.activation
    if kind == "linear":
        return z
    if kind == "elu":
        # expm1(z) >= z for z <= 0, so the max picks the right branch
        return np.maximum(z, np.expm1(np.minimum(z, 0.0)))
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    return (spec.scale if kind == "scaled_tanh" else 1.0) * np.tanh(z)


def _check_cache(params: MlpParams, cache: ForwardCache) -> None:
    if cache.params is not params:
        raise ContractViolation("forward cache was produced by a different parameter set")


def _upstream_batch(cache: ForwardCache, upstream, width: int) -> np.ndarray:
    g = np.asarray(upstream, dtype=float)
    n = cache.activations[0].shape[0]
    if cache.single:
        g = g.reshape(1, -1)
    elif g.ndim == 1 and width == 1 and g.shape[0] == n:
        g = g[:, None]
    if g.shape != (n, width):
        raise DimensionError(f"upstream has shape {np.shape(upstream)}, expected ({n}, {width})")
    return g


def param_grad(params: MlpParams, cache: ForwardCache, upstream) -> ParamGradient:
    """Gradient of ``sum(upstream * output)`` with respect to every parameter."""
    _check_cache(params, cache)
    g = _upstream_batch(cache, upstream, params.output_width)
    gw, gb = [None] * len(params.specs), [None] * len(params.specs)
    for k in range(len(params.specs) - 1, -1, -1):
        gz = g * cache.d1[k]
        gw[k] = gz.T @ cache.activations[k]
        gb[k] = gz.sum(axis=0)
        if k:
            g = gz @ params.weights[k]
    return ParamGradient(tuple(gw), tuple(gb))


def input_grad(params: MlpParams, cache: ForwardCache) -> np.ndarray:
    """Gradient of a scalar output with respect to the input."""
    _check_cache(params, cache)
    if params.output_width != 1:
        raise ContractViolation("input_grad requires a scalar-output network")
    g = np.ones((cache.activations[0].shape[0], 1))
    for k in range(len(params.specs) - 1, -1, -1):
        g = (g * cache.d1[k]) @ params.weights[k]
    return g[0] if cache.single else g


@dataclass(eq=False)
class TangentCache:
    forward: ForwardCache
    tangents: list  # tangent of a_0 (the direction) .. a_L
    z_tangents: list  # tangent of each pre-activation


def tangent_forward(params: MlpParams, x, direction):
    """Primal pass plus tangent propagation along ``direction``.

    Returns ``(output, output_tangent, cache)``.
    """
    if params.output_width != 1:
        raise ContractViolation("directional derivatives require a scalar-output network")
    out, fc = mlp_forward(params, x)
    v = np.asarray(direction, dtype=float)
    v2 = v[None, :] if v.ndim == 1 else v
    if v2.shape != fc.activations[0].shape:
        raise DimensionError(f"direction shape {v.shape} does not match input shape {np.shape(x)}")
    tans, ztans = [v2], []
    for k, w in enumerate(params.weights):
        zt = tans[-1] @ w.T
        ztans.append(zt)
        tans.append(fc.d1[k] * zt)
    return out, tans[-1][:, 0], TangentCache(fc, tans, ztans)


def directional_derivative(params: MlpParams, x, direction):
    """``<d output / d input, direction>`` computed by one forward tangent pass."""
    _, dd, tc = tangent_forward(params, x, direction)
    return float(dd[0]) if tc.forward.single else dd


def tangent_param_grad(params: MlpParams, tc: TangentCache, upstream) -> ParamGradient:
    """Reverse sweep through the primal+tangent computation of ``tangent_forward``.

    Differentiates ``sum(upstream * output_tangent)`` with respect to the parameters.
    """
    fc = tc.forward
    _check_cache(params, fc)
    n = fc.activations[0].shape[0]
    gt = np.asarray(upstream, dtype=float).reshape(n, 1)  # adjoint of the tangent
    ga = np.zeros_like(gt)  # adjoint of the primal value
    gw, gb = [None] * len(params.specs), [None] * len(params.specs)
    for k in range(len(params.specs) - 1, -1, -1):
        w = params.weights[k]
        gzt = gt * fc.d1[k]
        gz = gt * fc.d2[k] * tc.z_tangents[k] + ga * fc.d1[k]
        gw[k] = gz.T @ fc.activations[k] + gzt.T @ tc.tangents[k]
        gb[k] = gz.sum(axis=0)
        if k:
            ga = gz @ w
            gt = gzt @ w
    return ParamGradient(tuple(gw), tuple(gb))


def mixed_param_grad(params: MlpParams, x, direction, upstream=None) -> ParamGradient:
    """Parameter gradient of the directional derivative (forward-over-reverse).

    With a batch input the per-sample gradients are weighted by ``upstream``
    (default all ones) and summed.
    """
    _, dd, tc = tangent_forward(params, x, direction)
    if upstream is None:
        upstream = np.ones_like(dd)
    return tangent_param_grad(params, tc, upstream)


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: ParamGradient
    second_moment: ParamGradient
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        z = ParamGradient.zeros_like(params)
        return cls(z, ParamGradient.zeros_like(params), 0, beta1, beta2, epsilon)


def adam_step(params: MlpParams, grad: ParamGradient, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    if not lr > 0:
        raise ConfigurationError("learning rate must be positive")
    if not grad.is_finite():
        raise TrainingDivergenceError("non-finite gradient passed to the optimizer")
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    t = state.step_count + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    m_new, v_new, w_new, bias_new = [], [], [], []
    for p_list, g_list, m_list, v_list, out in (
        (params.weights, grad.weights, state.first_moment.weights, state.second_moment.weights, w_new),
        (params.biases, grad.biases, state.first_moment.biases, state.second_moment.biases, bias_new),
    ):
        for p, g, m, v in zip(p_list, g_list, m_list, v_list):
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
            m_new.append(m)
            v_new.append(v)
    nw = len(params.weights)
    new_state = AdamState(
        ParamGradient(tuple(m_new[:nw]), tuple(m_new[nw:])),
        ParamGradient(tuple(v_new[:nw]), tuple(v_new[nw:])),
        t, b1, b2, eps,
    )
    new_params = MlpParams(tuple(w_new), tuple(bias_new), params.specs, params.seed)
    if not new_params.is_finite():
        raise TrainingDivergenceError("optimizer produced non-finite parameters")
    return new_params, new_state


def save_checkpoint(path, networks: dict, meta: dict | None = None) -> Path:
    """Write networks to a text checkpoint: a header line followed by one JSON document."""
    path = Path(path)
    body = {"networks": {name: p.to_dict() for name, p in networks.items()}, "meta": meta or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(CHECKPOINT_HEADER + "\n" + json.dumps(body, indent=1) + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    text = Path(path).read_text()
    header, _, rest = text.partition("\n")
    if header.strip() != CHECKPOINT_HEADER:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint (header {header[:40]!r})")
    body = json.loads(rest)
    nets = {name: MlpParams.from_dict(d) for name, d in body["networks"].items()}
    return nets, body.get("meta", {})
