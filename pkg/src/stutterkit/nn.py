"""Minimal differentiable kernels: every layer the model needs, nothing more.

The network is a fixed chain with three heads, so each layer carries an
explicit forward/backward pair instead of a general autodiff tape. Forward
caches whatever backward needs; backward returns the input gradient and
accumulates parameter gradients in place. Every backward formula here is
validated against central finite differences (see finite_difference_check
and the gradient test suite).

Shapes are batched: temporal tensors are (batch, channels, frames), flat
tensors are (batch, features). Kernels are deterministic pure functions of
(inputs, params, rng state); parameters are owned by the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatch,
    IndexOutOfRange,
    InputTooShort,
    InvalidRate,
    NonDeterministicLoss,
    ShapeMismatch,
)


@dataclass
class Param:
    """A learnable tensor and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def zeros_like(cls, value: np.ndarray) -> "Param":
        return cls(value=value, grad=np.zeros_like(value))


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base: a layer owns named Params and optional non-learnable buffers."""

    def params(self) -> dict[str, Param]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        for p in self.params().values():
            p.grad[...] = 0.0


class TdnnLayer(Layer):
    """Time-delay layer: valid 1-D convolution over an explicit offset set.

    out[b, c, t] = bias[c] + sum_k sum_c' W[c, c', k] * x[b, c', t + off_k - off_min]

    Output length is T - span where span = max(offsets) - min(offsets).
    """

    def __init__(self, in_channels, out_channels, offsets, rng, dtype=np.float32):
        self.offsets = tuple(sorted(int(o) for o in offsets))
        self.span = self.offsets[-1] - self.offsets[0]
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * len(self.offsets)
        self.weight = Param.zeros_like(
            _uniform_init(rng, (out_channels, in_channels, len(self.offsets)), fan_in, dtype)
        )
        self.bias = Param.zeros_like(_uniform_init(rng, (out_channels,), fan_in, dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"expected (batch, {self.in_channels}, frames), got {x.shape}"
            )
        t_in = x.shape[2]
        if t_in <= self.span:
            raise InputTooShort(
                f"need more than {self.span} frames for offsets {self.offsets}, got {t_in}"
            )
        t_out = t_in - self.span
        w = self.weight.value
        out = np.broadcast_to(
            self.bias.value[None, :, None], (x.shape[0], self.out_channels, t_out)
        ).copy()
        base = self.offsets[0]
        for k, off in enumerate(self.offsets):
            s = off - base
            out += np.matmul(w[:, :, k], x[:, :, s : s + t_out])
        self._cache = x
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cache
        t_out = dy.shape[2]
        w = self.weight.value
        dx = np.zeros_like(x)
        base = self.offsets[0]
        for k, off in enumerate(self.offsets):
            s = off - base
            xs = x[:, :, s : s + t_out]
            self.weight.grad[:, :, k] += np.einsum("bot,bct->oc", dy, xs)
            dx[:, :, s : s + t_out] += np.matmul(w[:, :, k].T, dy)
        self.bias.grad += dy.sum(axis=(0, 2))
        return dx


class Linear(Layer):
    """Affine map y = x W^T + b on (batch, features)."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param.zeros_like(
            _uniform_init(rng, (out_features, in_features), in_features, dtype)
        )
        self.bias = Param.zeros_like(_uniform_init(rng, (out_features,), in_features, dtype))
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"expected (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cache
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class Relu(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._cache


class BatchNorm1d(Layer):
    """Per-channel normalization over batch (and frames, for temporal input).

    Train mode uses batch statistics (population variance, eps=1e-5) and
    updates running statistics with momentum 0.1; eval mode uses the running
    statistics. Input is (batch, channels) or (batch, channels, frames).
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param.zeros_like(np.ones(channels, dtype=dtype))
        self.beta = Param.zeros_like(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _shaped(self, v, ndim):
        return v[None, :, None] if ndim == 3 else v[None, :]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim not in (2, 3) or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected channel axis of {self.channels}, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2)
        if train:
            count = int(np.prod([x.shape[a] for a in axes]))
            if count < 2:
                raise DegenerateBatch(
                    f"train-mode batch norm needs >= 2 elements per channel, got {count}"
                )
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean[...] = (
                (1 - self.momentum) * self.running_mean + self.momentum * mean
            )
            self.running_var[...] = (
                (1 - self.momentum) * self.running_var + self.momentum * var
            )
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._shaped(mean, x.ndim)) * self._shaped(inv_std, x.ndim)
        self._cache = (xhat, inv_std, train, axes)
        return self._shaped(self.gamma.value, x.ndim) * xhat + self._shaped(
            self.beta.value, x.ndim
        )

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std, train, axes = self._cache
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        g = self._shaped(self.gamma.value * inv_std, dy.ndim)
        if not train:
            return dy * g
        count = int(np.prod([dy.shape[a] for a in axes]))
        mean_dy = self._shaped(dy.mean(axis=axes), dy.ndim)
        mean_dy_xhat = self._shaped((dy * xhat).mean(axis=axes), dy.ndim)
        return g * (dy - mean_dy - xhat * mean_dy_xhat)


class StatPool(Layer):
    """Statistical pooling: concat per-channel mean and population std over frames.

    (batch, channels, frames) -> (batch, 2 * channels); std uses
    sqrt(mean((x - mu)^2) + eps) with eps = 1e-9 so silence stays finite.
    """

    def __init__(self, eps=1e-9):
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3:
            raise ShapeMismatch(f"expected (batch, channels, frames), got {x.shape}")
        mu = x.mean(axis=2)
        centered = x - mu[:, :, None]
        std = np.sqrt((centered**2).mean(axis=2) + self.eps)
        self._cache = (centered, std, x.shape[2])
        return np.concatenate([mu, std], axis=1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        centered, std, t = self._cache
        c = centered.shape[1]
        dmu = dy[:, :c]
        dstd = dy[:, c:]
        dx = np.broadcast_to(dmu[:, :, None] / t, centered.shape).copy()
        dx += dstd[:, :, None] * centered / (t * std[:, :, None])
        return dx


class Dropout(Layer):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""

    def __init__(self, p: float):
        if not (0.0 <= p < 1.0):
            raise InvalidRate(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None
                ) -> np.ndarray:
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype)
        self._mask = keep / (1.0 - self.p)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dy
        return dy * self._mask


class GradReverse(Layer):
    """Identity forward; backward multiplies the incoming gradient by -lambda."""

    def __init__(self):
        self._lam = 0.0

    def forward(self, x: np.ndarray, lam: float) -> np.ndarray:
        self._lam = lam
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return -self._lam * dy


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable for logits of any finite magnitude."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target):
    """Cross-entropy loss and its logit gradient.

    1-D logits with an int target give (scalar loss, grad of shape (k,)).
    2-D (batch, k) logits with an int vector give per-sample losses (batch,)
    and per-sample grads (batch, k); callers reduce as they see fit.
    grad = softmax(logits) - onehot(target).
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lg = logits[None, :] if single else logits
    tg = np.asarray([target] if single else target, dtype=np.intp)
    k = lg.shape[1]
    if tg.min(initial=0) < 0 or tg.max(initial=-1) >= k:
        raise IndexOutOfRange(f"target outside [0, {k})")
    zmax = lg.max(axis=1, keepdims=True)
    z = lg - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(lg.shape[0])
    losses = -logp[rows, tg]
    grads = np.exp(logp)
    grads[rows, tg] -= 1.0
    if single:
        return float(losses[0]), grads[0]
    return losses, grads


class Adam:
    """Bias-corrected Adam with per-parameter state and step counts.

    Only parameters whose names are passed as trainable are touched; anything
    else keeps its bits, its moments, and its step count.
    """

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, named_params: dict[str, Param], trainable) -> None:
        """Apply one update to every named param for which trainable(name)."""
        for name, p in named_params.items():
            if not trainable(name):
                continue
            if p.grad.shape != p.value.shape:
                raise ShapeMismatch(f"{name}: grad shape {p.grad.shape} vs {p.value.shape}")
            st = self.state.setdefault(
                name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value), "t": 0}
            )
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype, copy=False
            )


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def finite_difference_check(
    loss_fn,
    params: dict[str, Param],
    tolerance: float | None = None,
    step: float | None = None,
) -> GradCheckReport:
    """Validate analytic gradients against central finite differences.

    loss_fn() must run forward + backward and return (scalar loss, grads dict
    keyed like params); it must be deterministic (dropout off or a fixed
    mask). Step and tolerance default per dtype: 1e-3 / 1e-3 for float32
    params, 1e-5 / 1e-6 for float64.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    loss0, grads0 = loss_fn()
    loss1, _ = loss_fn()
    if loss0 != loss1:
        raise NonDeterministicLoss(f"loss changed between evaluations: {loss0} vs {loss1}")
    analytic = {name: np.array(g, dtype=np.float64, copy=True) for name, g in grads0.items()}

    report = GradCheckReport(tolerance=tolerance if tolerance is not None else 0.0)
    for name, p in params.items():
        is32 = p.value.dtype == np.float32
        h = step if step is not None else (1e-3 if is32 else 1e-5)
        tol = tolerance if tolerance is not None else (1e-3 if is32 else 1e-6)
        report.tolerance = tol
        flat = p.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()[0]
            flat[i] = orig - h
            f_minus = loss_fn()[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[i] - numeric) / denom)
        report.max_rel_error[name] = worst
        if worst > tol:
            report.passed = False
    return report
