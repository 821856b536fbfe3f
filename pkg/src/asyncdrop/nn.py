"""Small neural models with hand-written gradients.

Two models are provided:

* the one-hidden-layer patch CNN used by the convergence analysis, whose
  second layer ``a`` is fixed at random signs and whose output is scaled by
  ``scale``;
* a two-layer bias-free ReLU MLP used by the simulation experiments.

All arithmetic is float64. Dropout masks are per hidden unit: filters of the
CNN, hidden neurons of the MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


@dataclass
class Dataset:
    """A set of samples with regression targets or class labels.

    ``inputs`` is ``(n, d_hat, p)`` for image data or ``(n, dim)`` for flat
    vectors. ``bound`` is the label magnitude bound ``C`` for regression data.
    """

    inputs: np.ndarray
    labels: np.ndarray
    kind: str = "regression"
    num_classes: int = 0
    bound: float = 0.0
    _patched: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.kind == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.num_classes <= 0 and self.labels.size:
                self.num_classes = int(self.labels.max()) + 1
        elif self.kind == "regression":
            self.labels = np.asarray(self.labels, dtype=np.float64)
        else:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if len(self.inputs) != len(self.labels):
            raise DimensionError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.kind,
                       self.num_classes, self.bound)

    def patched(self, q: int) -> np.ndarray:
        """Patched images, shape ``(n, q*d_hat, p)``; cached per ``q``."""
        if q not in self._patched:
            self._patched[q] = patch_batch(self.inputs, q)
        return self._patched[q]

    def flat(self) -> np.ndarray:
        return self.inputs.reshape(len(self.inputs), -1)

    def targets(self) -> np.ndarray:
        """Regression targets as a column, or one-hot rows for classes."""
        if self.kind == "regression":
            return self.labels.reshape(-1, 1)
        onehot = np.zeros((len(self.labels), self.num_classes))
        onehot[np.arange(len(self.labels)), self.labels] = 1.0
        return onehot


def patch(image, q: int) -> np.ndarray:
    """Extend each pixel to the window of ``q`` pixels starting at it.

    Column ``j`` of the result stacks, for ``k = 0..q-1``, all channels of
    pixel ``j + k``; windows running past the right edge are zero padded.

    >>> patch(np.array([[1.0, 2.0, 3.0]]), 2)
    array([[1., 2., 3.],
           [2., 3., 0.]])
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"image must be (channels, pixels), got {image.shape}")
    return patch_batch(image[None], q)[0]


def patch_batch(images, q: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise DimensionError(f"images must be (n, channels, pixels), got {images.shape}")
    n, d_hat, p = images.shape
    if q < 1 or p < 1:
        raise ConfigError("patch width and pixel count must be >= 1")
    if q > p:
        raise ConfigError(f"invalid patch width {q} for {p} pixels")
    out = np.zeros((n, q * d_hat, p))
    for k in range(q):
        out[:, k * d_hat:(k + 1) * d_hat, :p - k] = images[:, :, k:]
    return out


@dataclass
class CnnModel:
    """One-hidden-layer patch CNN; only ``W`` is trainable."""

    W: np.ndarray
    a: np.ndarray
    q: int
    scale: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.a.setflags(write=False)
        if self.W.ndim != 2 or self.a.ndim != 2 or self.W.shape[0] != self.a.shape[0]:
            raise DimensionError(f"W {self.W.shape} and a {self.a.shape} disagree")

    @property
    def width(self) -> int:
        return self.W.shape[0]

    @property
    def pixels(self) -> int:
        return self.a.shape[1]

    def with_weights(self, W) -> "CnnModel":
        return CnnModel(np.array(W, dtype=np.float64), self.a, self.q, self.scale, self.kappa)


def init_cnn(m: int, d_hat: int, p: int, q: int, kappa: float = 1.0,
             scale: float = 1.0, rng=None) -> CnnModel:
    """Gaussian filters with std ``kappa``; second layer ``±1/(p*sqrt(m))``."""
    rng = np.random.default_rng(rng)
    W = kappa * rng.standard_normal((m, q * d_hat))
    signs = rng.integers(0, 2, size=(m, p)) * 2.0 - 1.0
    a = signs / (p * np.sqrt(m))
    return CnnModel(W, a, q, scale, kappa)


def _unit_coefficients(model: CnnModel, mask) -> np.ndarray:
    if mask is None:
        return np.full(model.width, float(model.scale))
    kept = np.asarray(getattr(mask, "kept", mask), dtype=bool)
    if kept.shape != (model.width,):
        raise DimensionError(f"mask over {kept.shape} units, model has {model.width} filters")
    return kept.astype(np.float64)


def _check_patched(model: CnnModel, xhat: np.ndarray):
    if xhat.shape[-2:] != (model.W.shape[1], model.pixels):
        raise DimensionError(
            f"patched input {xhat.shape[-2:]} does not match model "
            f"({model.W.shape[1]}, {model.pixels})"
        )


def cnn_predict(model: CnnModel, xhat, mask=None) -> np.ndarray:
    """Outputs for a batch of patched inputs ``(n, q*d_hat, p)``.

    Without a mask this is the full network scaled by ``model.scale``; with a
    mask it is the unscaled subnetwork of the kept filters.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    _check_patched(model, xhat)
    coef = _unit_coefficients(model, mask)
    pre = np.einsum("rd,ndp->nrp", model.W, xhat)
    act = np.maximum(pre, 0.0)
    return np.einsum("r,rp,nrp->n", coef, model.a, act)


def cnn_forward(model: CnnModel, xhat, mask=None) -> float:
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.ndim != 2:
        raise DimensionError(f"single patched input expected, got {xhat.shape}")
    return float(cnn_predict(model, xhat[None], mask)[0])


def cnn_gradient(model: CnnModel, data, mask=None, indices=None) -> np.ndarray:
    """Closed-form gradient with respect to the filters ``W``.

    Row ``r`` is ``c_r * sum_i (u_i - y_i) sum_j a_rj x_i^(j) 1{<x_i^(j), w_r> > 0}``
    where ``c_r`` is the mask bit (subnetwork) or ``scale`` (full network).
    This is the gradient of half the squared error.
    """
    xhat, y = _cnn_batch(model, data, indices)
    coef = _unit_coefficients(model, mask)
    pre = np.einsum("rd,ndp->nrp", model.W, xhat)
    act = pre > 0.0
    u = np.einsum("r,rp,nrp->n", coef, model.a, np.where(act, pre, 0.0))
    resid = u - y
    weighted = np.einsum("n,rp,nrp->nrp", resid, model.a, act.astype(np.float64))
    return coef[:, None] * np.einsum("nrp,ndp->rd", weighted, xhat)


def cnn_loss(model: CnnModel, data, mask=None, indices=None) -> float:
    xhat, y = _cnn_batch(model, data, indices)
    return mse_loss(cnn_predict(model, xhat, mask), y)


def _cnn_batch(model, data, indices):
    if isinstance(data, Dataset):
        xhat, y = data.patched(model.q), data.labels
    else:
        xhat, y = data
        xhat = np.asarray(xhat, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
    if indices is not None:
        xhat, y = xhat[indices], y[indices]
    _check_patched(model, xhat)
    if y.shape != (len(xhat),):
        raise DimensionError(f"{len(xhat)} inputs but targets of shape {y.shape}")
    return xhat, y


@dataclass
class MlpModel:
    """Bias-free two-layer ReLU network ``W2 @ relu(W1 @ x)``."""

    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W2.shape[1] != self.W1.shape[0]:
            raise DimensionError(f"W1 {self.W1.shape} and W2 {self.W2.shape} disagree")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]


def init_mlp(input_dim: int, hidden: int, output_dim: int, rng=None) -> MlpModel:
    rng = np.random.default_rng(rng)
    W1 = rng.standard_normal((hidden, input_dim)) * np.sqrt(2.0 / input_dim)
    W2 = rng.standard_normal((output_dim, hidden)) * np.sqrt(1.0 / hidden)
    return MlpModel(W1, W2)


def _hidden_mask(model: MlpModel, mask) -> np.ndarray:
    if mask is None:
        return np.ones(model.hidden)
    kept = np.asarray(getattr(mask, "kept", mask), dtype=bool)
    if kept.shape != (model.hidden,):
        raise DimensionError(f"mask over {kept.shape} units, model has {model.hidden} neurons")
    return kept.astype(np.float64)


def mlp_outputs(model: MlpModel, inputs, mask=None) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W1.shape[1]:
        raise DimensionError(f"inputs {X.shape} do not match W1 {model.W1.shape}")
    keep = _hidden_mask(model, mask)
    hid = np.maximum(X @ (model.W1 * keep[:, None]).T, 0.0)
    return hid @ (model.W2 * keep[None, :]).T


def mlp_forward_backward(model: MlpModel, batch, mask=None, loss: str = "mse"):
    """Loss and gradients ``{"W1", "W2"}`` for a batch ``(inputs, targets)``.

    ``targets`` are rows of the output dimension (one-hot for classes). With
    ``loss="mse"`` the loss is the summed squared error; with ``"xent"`` it is
    the summed softmax cross-entropy against the target distribution rows.
    Dropped hidden neurons contribute nothing and receive zero gradient.
    """
    X, Y = batch
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W1.shape[1]:
        raise DimensionError(f"inputs {X.shape} do not match W1 {model.W1.shape}")
    if Y.shape != (X.shape[0], model.W2.shape[0]):
        raise DimensionError(f"targets {Y.shape} do not match outputs")
    keep = _hidden_mask(model, mask)
    W1 = model.W1 * keep[:, None]
    W2 = model.W2 * keep[None, :]
    z = X @ W1.T
    active = (z > 0.0).astype(np.float64) * keep[None, :]
    hid = z * active
    out = hid @ W2.T
    if loss == "mse":
        value = mse_loss(out.ravel(), Y.ravel())
        dout = 2.0 * (out - Y)
    elif loss == "xent":
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        value = float(-(Y * logp).sum())
        dout = np.exp(logp) * Y.sum(axis=1, keepdims=True) - Y
    else:
        raise ConfigError(f"unknown loss {loss!r}")
    gW2 = (dout.T @ hid) * keep[None, :]
    dz = (dout @ W2) * active
    gW1 = (dz.T @ X) * keep[:, None]
    return value, {"W1": gW1, "W2": gW2}


def mse_loss(predictions, targets) -> float:
    """Sum of squared residuals, with no ``1/n`` factor."""
    pred = np.asarray(predictions, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if pred.shape != targ.shape:
        raise DimensionError(f"predictions {pred.shape} vs targets {targ.shape}")
    resid = pred - targ
    return float(np.dot(resid.ravel(), resid.ravel()))


def sgd_step(params, gradient, lr: float):
    """``params - lr * gradient``; arrays or mappings of arrays."""
    if lr < 0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be finite and >= 0, got {lr}")
    if isinstance(params, Mapping):
        return {k: sgd_step(v, gradient[k], lr) for k, v in params.items()}
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    p = np.asarray(params, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"params {p.shape} vs gradient {g.shape}")
    return p - lr * g
