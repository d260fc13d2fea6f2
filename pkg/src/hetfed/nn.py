"""Dense-network core used by every other module.

Plain-numpy multilayer perceptrons with hand-rolled backprop, ReLU6-capped
hidden activations, cross-entropy and KL-divergence losses, and SGD/Adam
parameter updates.  Models are lists of per-layer parameter pairs in float64
so they can be sliced, copied and averaged directly, with no framework graph
behind them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RELU6_CAP = 6.0


@dataclass
class DenseLayer:
    """One fully connected layer; weights are [fan_in, fan_out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-d and bias 1-d")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weights.shape[1]} weight columns"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy())


@dataclass
class MlpModel:
    """Stack of dense layers; hidden layers use the configured activation,
    the final layer always emits raw logits."""

    layers: list[DenseLayer]
    hidden_activation: str = "relu6"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.hidden_activation not in ("relu6", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.fan_out != nxt.fan_in:
                raise ValueError(
                    f"layer {i} emits {prev.fan_out} features but layer {i + 1} "
                    f"expects {nxt.fan_in}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def copy(self) -> "MlpModel":
        return MlpModel([layer.copy() for layer in self.layers], self.hidden_activation)


@dataclass
class ForwardCache:
    """Intermediate values from one forward pass, consumed by backward()."""

    model: MlpModel
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


@dataclass
class LayerGrads:
    dweights: np.ndarray
    dbias: np.ndarray


def init_dense(fan_in: int, fan_out: int, rng: np.random.Generator) -> DenseLayer:
    """Uniform init in +-1/sqrt(fan_in) for both weights and bias."""
    bound = 1.0 / math.sqrt(fan_in)
    return DenseLayer(
        rng.uniform(-bound, bound, size=(fan_in, fan_out)),
        rng.uniform(-bound, bound, size=fan_out),
    )


def zero_grads(model: MlpModel) -> list[LayerGrads]:
    return [
        LayerGrads(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers
    ]


def flatten_layers(layers: list[DenseLayer]) -> np.ndarray:
    """Concatenate all parameters (per layer: weights row-major, then bias)."""
    parts = []
    for layer in layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def forward(model: MlpModel, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the model on a [batch, in_dim] matrix, returning logits and the
    cache backward() needs.  Hidden activations are clipped to [0, RELU6_CAP]."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("inputs must be a [batch, features] matrix")
    if x.shape[0] < 1:
        raise ValueError("batch must contain at least one row")
    if x.shape[1] != model.in_dim:
        raise ValueError(f"input width {x.shape[1]} does not match model in_dim {model.in_dim}")

    saved_inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    a = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        saved_inputs.append(a)
        z = a @ layer.weights + layer.bias
        preacts.append(z)
        if i < last and model.hidden_activation == "relu6":
            a = np.clip(z, 0.0, RELU6_CAP)
        else:
            a = z
    return a, ForwardCache(model=model, inputs=saved_inputs, preacts=preacts)


def backward(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray) -> list[LayerGrads]:
    """Backpropagate an upstream gradient w.r.t. the logits through the model."""
    if cache.model is not model:
        raise ValueError("cache is stale: it was produced by forward() on a different model")
    if dlogits.shape != cache.preacts[-1].shape:
        raise ValueError("dlogits shape does not match the cached logits")

    n_layers = len(model.layers)
    grads: list[LayerGrads] = [None] * n_layers  # type: ignore[list-item]
    delta = dlogits
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1 and model.hidden_activation == "relu6":
            z = cache.preacts[i]
            delta = delta * ((z > 0.0) & (z < RELU6_CAP))
        a = cache.inputs[i]
        grads[i] = LayerGrads(a.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ model.layers[i].weights.T
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-d vector of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return labels.astype(np.int64)


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = _check_labels(labels, logits.shape[1])
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward_ce(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> list[LayerGrads]:
    """Gradients of mean cross-entropy w.r.t. every model parameter."""
    logits = cache.preacts[-1]
    labels = _check_labels(labels, model.out_dim)
    if len(labels) != logits.shape[0]:
        raise ValueError("labels length does not match the cached batch")
    d = softmax(logits)
    d[np.arange(len(labels)), labels] -= 1.0
    d /= len(labels)
    return backward(model, cache, d)


def kl_loss_and_grad(
    student_logits: np.ndarray, teacher_logits: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean KL(teacher || student) over rows at temperature 1, plus its
    gradient w.r.t. the student logits.  The teacher side is a constant."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits must have the same shape")
    logp_s = log_softmax(student_logits)
    logp_t = log_softmax(teacher_logits)
    p_t = np.exp(logp_t)
    batch = student_logits.shape[0]
    loss = float((p_t * (logp_t - logp_s)).sum() / batch)
    grad = (np.exp(logp_s) - p_t) / batch
    return max(loss, 0.0), grad


def kl_teacher_grad(student_logits: np.ndarray, teacher_logits: np.ndarray) -> np.ndarray:
    """Gradient of mean KL(teacher || student) w.r.t. the teacher logits.

    Per row with p = softmax(teacher), q = softmax(student):
    d/dz_j = p_j * ((log p_j - log q_j) - KL(p || q)).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits must have the same shape")
    logp_s = log_softmax(student_logits)
    logp_t = log_softmax(teacher_logits)
    p_t = np.exp(logp_t)
    diff = logp_t - logp_s
    row_kl = (p_t * diff).sum(axis=1, keepdims=True)
    return p_t * (diff - row_kl) / student_logits.shape[0]


@dataclass
class OptimizerState:
    """Per-model optimizer state; buffers mirror the model's shapes."""

    kind: str
    learning_rate: float
    momentum: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int
    m: list[LayerGrads]
    v: list[LayerGrads] | None


def init_optimizer(
    model: MlpModel,
    kind: str,
    learning_rate: float,
    momentum: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    return OptimizerState(
        kind=kind,
        learning_rate=learning_rate,
        momentum=momentum,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        weight_decay=weight_decay,
        step=0,
        m=zero_grads(model),
        v=zero_grads(model) if kind == "adam" else None,
    )


def apply_update(model: MlpModel, grads: list[LayerGrads], state: OptimizerState) -> None:
    """One optimizer step, in place.

    SGD: buf = momentum*buf + g;  w -= lr * (buf + weight_decay*w).
    Adam: standard bias-corrected moments on (g + weight_decay*w).
    """
    lr = state.learning_rate
    if state.kind == "sgd":
        for layer, g, buf in zip(model.layers, grads, state.m, strict=True):
            buf.dweights *= state.momentum
            buf.dweights += g.dweights
            buf.dbias *= state.momentum
            buf.dbias += g.dbias
            layer.weights -= lr * (buf.dweights + state.weight_decay * layer.weights)
            layer.bias -= lr * (buf.dbias + state.weight_decay * layer.bias)
        return

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    assert state.v is not None
    for layer, g, m, v in zip(model.layers, grads, state.m, state.v, strict=True):
        for param, grad, buf_m, buf_v in (
            (layer.weights, g.dweights, m.dweights, v.dweights),
            (layer.bias, g.dbias, m.dbias, v.dbias),
        ):
            eff = grad + state.weight_decay * param if state.weight_decay else grad
            buf_m *= state.beta1
            buf_m += (1.0 - state.beta1) * eff
            buf_v *= state.beta2
            buf_v += (1.0 - state.beta2) * np.square(eff)
            param -= lr * (buf_m / bc1) / (np.sqrt(buf_v / bc2) + state.eps)
