"""Dense three-stage classifier with manual backprop.

The model is a chain  features -> sphere -> logits:

* feature stage: affine layers with ReLU, output is elementwise nonnegative;
* sphere stage: two affine layers with a ReLU between, L2-normalized output,
  so dot products between sphere vectors are cosine similarities;
* classifier: a single affine layer; softmax is applied where probabilities
  are needed.

Everything is float64 numpy with a fixed reduction order, so a fixed seed
gives bitwise-identical parameter trajectories. One forward pass caches what
the matching backward pass needs; a backward consumes the caches of the most
recent forward. Parameters update via Adam on a per-epoch cosine-annealed
learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import stream

# CE stability floor: log-probabilities below this are clamped, and clamped
# rows stop contributing gradient (keeps loss and gradient consistent).
LOG_PROB_FLOOR = -30.0

_NORM_EPS = 1e-12  # added to the L2 norm denominator


class Affine:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_dim)
        self.W = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.b = rng.uniform(-bound, bound, size=out_dim)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.dW = self._x.T @ grad
        self.db = grad.sum(axis=0)
        return grad @ self.W.T

    def params(self):
        return [("W", self.W), ("b", self.b)]

    def grads(self):
        return [("W", self.dW), ("b", self.db)]


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        return np.where(self._mask, grad, 0.0)

    def params(self):
        return []

    def grads(self):
        return []


class L2Normalize:
    """Row-wise x / (||x|| + eps)."""

    def __init__(self):
        self._x = None
        self._norm = None
        self._denom = None

    def forward(self, x):
        self._x = x
        self._norm = np.linalg.norm(x, axis=1, keepdims=True)
        self._denom = self._norm + _NORM_EPS
        return x / self._denom

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        # y = x/r with r = ||x|| + eps:  dx = g/r - x (g.x) / (r^2 ||x||)
        gx = (grad * self._x).sum(axis=1, keepdims=True)
        return grad / self._denom - self._x * gx / (self._denom**2 * np.maximum(self._norm, _NORM_EPS))

    def params(self):
        return []

    def grads(self):
        return []


class Chain:
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"{prefix}.{i}.{name}", p))
        return out

    def named_grads(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            for name, g in layer.grads():
                out.append((f"{prefix}.{i}.{name}", g))
        return out


@dataclass
class ModelConfig:
    in_dim: int
    k: int
    d1: int = 32  # feature dimension
    d2: int = 16  # sphere dimension
    f_hidden: int = 64
    s_hidden: int = 32
    f_layers: int = 2  # affine layers in the feature stage (2 or 3)


class Model:
    """features f -> sphere s -> classifier l."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "init")
        widths = [cfg.in_dim] + [cfg.f_hidden] * (cfg.f_layers - 1) + [cfg.d1]
        layers = []
        for a, b in zip(widths, widths[1:]):
            layers += [Affine(a, b, rng), Relu()]
        self.f = Chain(layers)
        self.s = Chain([
            Affine(cfg.d1, cfg.s_hidden, rng),
            Relu(),
            Affine(cfg.s_hidden, cfg.d2, rng),
            L2Normalize(),
        ])
        self.l = Chain([Affine(cfg.d2, cfg.k, rng)])
        self.last_logits = None

    def forward(self, x):
        """Run all three stages; returns (features, sphere, probs)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.in_dim:
            raise ValueError(f"expected batch of shape (n, {self.cfg.in_dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in input batch")
        feats = self.f.forward(x)
        sphere = self.s.forward(feats)
        logits = self.l.forward(sphere)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite activations in forward pass")
        self.last_logits = logits
        return feats, sphere, softmax(logits)

    def backward(self, dlogits):
        """Backprop a gradient w.r.t. the logits of the most recent forward."""
        if self.last_logits is None:
            raise RuntimeError("backward called before forward")
        return self.f.backward(self.s.backward(self.l.backward(dlogits)))

    def features(self, x):
        return self.forward(x)[0]

    def sphere(self, x):
        return self.forward(x)[1]

    def predict(self, x):
        self.forward(x)
        return self.last_logits.argmax(axis=1)

    def named_params(self):
        return self.f.named_params("f") + self.s.named_params("s") + self.l.named_params("l")

    def named_grads(self):
        return self.f.named_grads("f") + self.s.named_grads("s") + self.l.named_grads("l")

    def get_params(self):
        """Copies of all parameters, keyed by name."""
        return {name: p.copy() for name, p in self.named_params()}

    def set_params(self, values):
        for name, p in self.named_params():
            p[...] = values[name]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _ce_rows(logits, y):
    """Per-row cross entropy with the log-prob floor, and d(ce)/d(logits)."""
    n = len(y)
    logp = log_softmax(logits)
    lp_y = logp[np.arange(n), y]
    clamped = lp_y < LOG_PROB_FLOOR
    ce = -np.maximum(lp_y, LOG_PROB_FLOOR)
    dce = np.exp(logp)
    dce[np.arange(n), y] -= 1.0
    dce[clamped] = 0.0
    return ce, dce


def wce_value_grad(logits, y, weights, trusted):
    """Signed weighted CE over the trusted rows.

    loss = sum_{i in trusted} w_i * sgn_i * CE_i   with sgn_i = 0 when the
    sample has negative weight and is already predicted away from its label
    (unlearning stops once the sample is forgotten), else 1.

    Returns (loss, dloss/dlogits); untrusted and gated rows contribute exactly
    zero to both.
    """
    y = np.asarray(y)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(y)
    ce, dce = _ce_rows(logits, y)
    pred = logits.argmax(axis=1)
    sgn = np.where((weights < 0.0) & (pred != y), 0.0, 1.0)
    mask = np.zeros(n)
    mask[np.asarray(trusted, dtype=np.intp)] = 1.0
    coeff = mask * weights * sgn
    loss = float((coeff * ce).sum())
    return loss, coeff[:, None] * dce


def wce_loss(model: Model, x, y, weights, trusted):
    """Forward + signed weighted CE + backward; leaves gradients in the model.

    `weights` aligns with the rows of `x`; `trusted` holds the row indices
    allowed to contribute. Empty trusted set gives zero loss and zero
    gradients (callers should skip the optimizer step).
    """
    model.forward(x)
    loss, dlogits = wce_value_grad(model.last_logits, y, weights, trusted)
    model.backward(dlogits)
    return loss


def ce_loss(model: Model, x, y):
    """Plain (sum-reduced) cross entropy: WCE with unit weights, all trusted."""
    n = len(y)
    return wce_loss(model, x, y, np.ones(n), np.arange(n))


def ce_per_sample(model: Model, x, y):
    """Per-sample CE values without touching gradients."""
    model.forward(x)
    ce, _ = _ce_rows(model.last_logits, np.asarray(y))
    return ce


def cosine_lr(epoch: int, total_epochs: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing by epoch: lr_start at epoch 0, lr_end at the last epoch."""
    if total_epochs <= 1:
        return lr_start
    e = min(max(epoch, 0), total_epochs - 1)
    return lr_end + (lr_start - lr_end) * (1.0 + math.cos(math.pi * e / (total_epochs - 1))) / 2.0


class Adam:
    """Adaptive-moment optimizer with the per-epoch cosine schedule."""

    def __init__(self, model: Model, lr_start=0.01, lr_end=0.0001, total_epochs=55,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.total_epochs = total_epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.epoch = 0
        self.m = {name: np.zeros_like(p) for name, p in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_params()}

    @property
    def lr(self) -> float:
        return cosine_lr(self.epoch, self.total_epochs, self.lr_start, self.lr_end)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def step(self, model: Model):
        self.t += 1
        lr = self.lr
        grads = dict(model.named_grads())
        for name, p in model.named_params():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name} at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**self.t)
            vhat = v / (1.0 - self.beta2**self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
