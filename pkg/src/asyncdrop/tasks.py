"""Adapters binding a model family to ModelParams for the simulator.

A task knows how to build initial parameters, compute the local training
gradient for a (possibly masked) submodel, and evaluate the full model.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .nn import (CnnModel, Dataset, MlpModel, cnn_gradient, cnn_predict, init_cnn,
                 init_mlp, mlp_forward_backward, mlp_outputs, mse_loss)
from .params import ModelParams


class CnnTask:
    """Regression with the fixed-second-layer patch CNN.

    The local objective is half the squared error, whose gradient is the
    closed form in :func:`asyncdrop.nn.cnn_gradient`. Reported losses are the
    full squared error of the scaled network.
    """

    name = "cnn"

    def __init__(self, model: CnnModel):
        self.template = model

    @classmethod
    def create(cls, m, d_hat, p, q, kappa=1.0, scale=1.0, rng=None):
        return cls(init_cnn(m, d_hat, p, q, kappa, scale, rng))

    def init_params(self) -> ModelParams:
        return ModelParams({"W": self.template.W.copy()}, {"W": 0})

    def model(self, params) -> CnnModel:
        W = params["W"] if not isinstance(params, ModelParams) else params.groups["W"]
        return self.template.with_weights(W)

    def gradient(self, params: dict, data: Dataset, mask=None, indices=None) -> dict:
        return {"W": cnn_gradient(self.model(params), data, mask, indices)}

    def objective(self, params: dict, data: Dataset, mask=None, indices=None) -> float:
        model = self.model(params)
        xhat, y = data.patched(model.q), data.labels
        if indices is not None:
            xhat, y = xhat[indices], y[indices]
        return 0.5 * mse_loss(cnn_predict(model, xhat, mask), y)

    def evaluate(self, params, data: Dataset):
        model = self.model(params)
        return mse_loss(cnn_predict(model, data.patched(model.q)), data.labels), None


class MlpTask:
    """Two-layer MLP; hidden neurons are the maskable units."""

    name = "mlp"

    def __init__(self, model: MlpModel, loss: str = "mse"):
        if loss not in ("mse", "xent"):
            raise ConfigError(f"unknown loss {loss!r}")
        self.template = model
        self.loss = loss

    @classmethod
    def create(cls, input_dim, hidden, output_dim, loss="mse", rng=None):
        return cls(init_mlp(input_dim, hidden, output_dim, rng), loss)

    def init_params(self) -> ModelParams:
        return ModelParams({"W1": self.template.W1.copy(), "W2": self.template.W2.copy()},
                           {"W1": 0, "W2": 1})

    @staticmethod
    def model(params) -> MlpModel:
        groups = params.groups if isinstance(params, ModelParams) else params
        return MlpModel(groups["W1"], groups["W2"])

    def _batch(self, data: Dataset, indices):
        X, Y = data.flat(), data.targets()
        if indices is not None:
            X, Y = X[indices], Y[indices]
        return X, Y

    def gradient(self, params: dict, data: Dataset, mask=None, indices=None) -> dict:
        return mlp_forward_backward(self.model(params), self._batch(data, indices), mask, self.loss)[1]

    def objective(self, params: dict, data: Dataset, mask=None, indices=None) -> float:
        return mlp_forward_backward(self.model(params), self._batch(data, indices), mask, self.loss)[0]

    def evaluate(self, params, data: Dataset):
        model = self.model(params)
        loss = mlp_forward_backward(model, (data.flat(), data.targets()), None, self.loss)[0]
        acc = None
        if data.kind == "classification":
            pred = np.argmax(mlp_outputs(model, data.flat()), axis=1)
            acc = float(np.mean(pred == data.labels))
        return loss, acc
