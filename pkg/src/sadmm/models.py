"""Parametric predictors, their training losses, gradients and Hessians.

Three model kinds are supported:

``linear_features``
    ``f(u, x) = phi(u)^T W`` with a fixed basis ``phi``; the squared loss is
    a convex quadratic in the parameters.
``mlp_regressor``
    One sigmoid hidden layer and a linear output layer, squared loss.
``softmax_classifier``
    One sigmoid hidden layer and a softmax output layer, cross-entropy loss.

Parameters travel as one flat vector. The packing order is fixed:
``w0`` row-major (``m x q``), ``b0`` (``q``), ``w1`` row-major (``q x o``),
``b1`` (``o``); for ``linear_features`` it is ``W`` row-major
(``p x o``).

Losses are means over the shard's samples. Gradients are analytic
(backpropagation); Hessians are exact for ``linear_features`` and central
finite differences of the analytic gradient otherwise.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear_features", "mlp_regressor", "softmax_classifier")
BASES = ("identity", "affine", "quadratic")
LOG_CLAMP = 1e-300
# cube root of machine epsilon: balances truncation and rounding for a
# central difference of an analytic gradient
HESS_FD_STEP = 6e-6


class ModelError(ValueError):
    """Raised on inconsistent model, parameter or shard dimensions."""


class ClampWarning(RuntimeWarning):
    """A predicted class probability underflowed and was clamped before the log."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int = 1
    hidden: int = 5
    basis: str = "affine"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ModelError("input_dim and output_dim must be positive")
        if self.kind != "linear_features" and self.hidden < 1:
            raise ModelError("hidden must be positive")
        if self.kind == "linear_features" and self.basis not in BASES:
            raise ModelError(f"unknown basis {self.basis!r}")
        if self.kind == "softmax_classifier" and self.output_dim < 2:
            raise ModelError("a classifier needs at least two classes")

    @property
    def n_params(self):
        return parameter_count(self)

    @property
    def is_classifier(self):
        return self.kind == "softmax_classifier"

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": self.hidden,
            "basis": self.basis,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def basis_dim(spec):
    m = spec.input_dim
    return {"identity": m, "affine": m + 1, "quadratic": 2 * m + 1}[spec.basis]


def parameter_count(spec):
    """Length of the packed parameter vector for `spec`."""
    if spec.kind == "linear_features":
        return basis_dim(spec) * spec.output_dim
    m, q, o = spec.input_dim, spec.hidden, spec.output_dim
    return m * q + q + q * o + o


@dataclass(frozen=True)
class Shard:
    """One worker's slice of the training data.

    `labels` is ``(M, o)`` float for regression and ``(M,)`` int class
    indices for classification. Arrays are stored read-only.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0
    _onehot: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        U = np.array(self.features, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if U.ndim != 2 or U.shape[0] < 1:
            raise ModelError("features must be a non-empty 2-D array")
        if self.n_classes:
            y = np.array(self.labels).reshape(-1)
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(y == np.round(y)):
                    raise ModelError("class labels must be integers")
                y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ModelError(f"class index outside 0..{self.n_classes - 1}")
            onehot = np.zeros((y.size, self.n_classes))
            onehot[np.arange(y.size), y] = 1.0
            onehot.setflags(write=False)
            object.__setattr__(self, "_onehot", onehot)
        else:
            y = np.array(self.labels, dtype=float)
            if y.ndim == 1:
                y = y[:, None]
        if y.shape[0] != U.shape[0]:
            raise ModelError(f"{U.shape[0]} feature rows but {y.shape[0]} label rows")
        if not np.all(np.isfinite(U)):
            raise ModelError("features contain non-finite values")
        U.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", U)
        object.__setattr__(self, "labels", y)

    @property
    def sample_count(self):
        return self.features.shape[0]

    def __len__(self):
        return self.sample_count


def _check(spec, x, shard=None):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != parameter_count(spec):
        raise ModelError(f"expected {parameter_count(spec)} parameters, got {x.size}")
    if shard is not None:
        if shard.features.shape[1] != spec.input_dim:
            raise ModelError(
                f"shard has {shard.features.shape[1]} features, model expects {spec.input_dim}"
            )
        if spec.is_classifier:
            if shard.n_classes != spec.output_dim:
                raise ModelError("shard class count does not match the model")
        elif shard.n_classes or shard.labels.shape[1] != spec.output_dim:
            raise ModelError("shard labels do not match the model output dimension")
    return x


def basis(spec, U):
    """Evaluate the feature basis row-wise: ``(M, m) -> (M, p)``."""
    U = np.atleast_2d(U)
    if spec.basis == "identity":
        return U
    ones = np.ones((U.shape[0], 1))
    if spec.basis == "affine":
        return np.hstack([ones, U])
    return np.hstack([ones, U, U**2])


def unpack(spec, x):
    """Split a packed parameter vector (or a batch of them) into layer arrays.

    The leading axes of `x` are kept as batch axes.
    """
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    if spec.kind == "linear_features":
        return (x.reshape(lead + (basis_dim(spec), spec.output_dim)),)
    m, q, o = spec.input_dim, spec.hidden, spec.output_dim
    i0, i1, i2 = m * q, m * q + q, m * q + q + q * o
    w0 = x[..., :i0].reshape(lead + (m, q))
    b0 = x[..., i0:i1]
    w1 = x[..., i1:i2].reshape(lead + (q, o))
    b1 = x[..., i2:]
    return w0, b0, w1, b1


def pack(spec, *arrays):
    """Inverse of :func:`unpack` for a single parameter set."""
    x = np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in arrays])
    if x.size != parameter_count(spec):
        raise ModelError(f"packed {x.size} values, expected {parameter_count(spec)}")
    return x


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(spec, X, U):
    """Batched forward pass. `X` is ``(B, n)``; returns hidden activations and outputs."""
    w0, b0, w1, b1 = unpack(spec, X)
    A = _sigmoid(np.matmul(U, w0) + b0[:, None, :])
    out = np.matmul(A, w1) + b1[:, None, :]
    return A, out


def _log_softmax(Z):
    Z = Z - Z.max(axis=-1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))


def predict(spec, x, u):
    """Model output for feature rows `u`.

    A single feature row gives a 1-D output; a 2-D block of rows gives one
    output row per input row. Classifiers return class probabilities.
    """
    x = _check(spec, x)
    U = np.asarray(u, dtype=float)
    single = U.ndim == 1
    U = np.atleast_2d(U)
    if U.shape[1] != spec.input_dim:
        raise ModelError(f"feature rows have {U.shape[1]} entries, expected {spec.input_dim}")
    if spec.kind == "linear_features":
        out = basis(spec, U) @ unpack(spec, x)[0]
    else:
        _, out = _forward(spec, x[None, :], U)
        out = out[0]
        if spec.is_classifier:
            out = np.exp(_log_softmax(out))
            out /= out.sum(axis=-1, keepdims=True)
    return out[0] if single else out


def loss_details(spec, x, shard):
    """Return ``(loss, clamped)``; `clamped` flags a probability clamped at 1e-300."""
    x = _check(spec, x, shard)
    M = shard.sample_count
    if spec.kind == "linear_features":
        res = basis(spec, shard.features) @ unpack(spec, x)[0] - shard.labels
        return float(np.sum(res * res) / M), False
    _, out = _forward(spec, x[None, :], shard.features)
    if not spec.is_classifier:
        res = out[0] - shard.labels
        return float(np.sum(res * res) / M), False
    logp = _log_softmax(out[0])
    floor = np.log(LOG_CLAMP)
    clamped = bool(np.any(logp[shard._onehot > 0] < floor))
    logp = np.maximum(logp, floor)
    return float(-np.sum(shard._onehot * logp) / M), clamped


def loss(spec, x, shard):
    """Mean training loss of parameters `x` on `shard`.

    Squared error summed over outputs for regressors; cross-entropy for the
    classifier, with log-probabilities clamped at ``log(1e-300)`` (a
    :class:`ClampWarning` is emitted when that happens).
    """
    value, clamped = loss_details(spec, x, shard)
    if clamped:
        warnings.warn("class probability clamped at 1e-300 in cross-entropy", ClampWarning)
    return value


def _grad_batch(spec, X, shard):
    """Analytic gradients for a batch of parameter vectors ``X`` (``(B, n)``)."""
    U = shard.features
    M = shard.sample_count
    A, out = _forward(spec, X, U)
    if spec.is_classifier:
        P = np.exp(_log_softmax(out))
        dout = (P - shard._onehot) / M
    else:
        dout = 2.0 * (out - shard.labels) / M
    w1 = unpack(spec, X)[2]
    dw1 = np.matmul(A.transpose(0, 2, 1), dout)
    db1 = dout.sum(axis=1)
    dZ = np.matmul(dout, w1.transpose(0, 2, 1)) * A * (1.0 - A)
    dw0 = np.matmul(U.T, dZ)
    db0 = dZ.sum(axis=1)
    B = X.shape[0]
    return np.concatenate(
        [dw0.reshape(B, -1), db0, dw1.reshape(B, -1), db1], axis=1
    )


def grad(spec, x, shard):
    """Analytic gradient of :func:`loss` with respect to the packed parameters."""
    x = _check(spec, x, shard)
    if spec.kind == "linear_features":
        Phi = basis(spec, shard.features)
        res = Phi @ unpack(spec, x)[0] - shard.labels
        return (2.0 / shard.sample_count * (Phi.T @ res)).reshape(-1)
    return _grad_batch(spec, x[None, :], shard)[0]


def hessian(spec, x, shard):
    """Hessian of :func:`loss`, exactly symmetric.

    Exact ``2/M * kron(Phi^T Phi, I_o)`` for ``linear_features``; otherwise
    central differences of :func:`grad` with step ``6e-6 * (1 + |x_k|)``,
    all ``2n`` perturbed gradients evaluated in one batch, then symmetrized.
    """
    x = _check(spec, x, shard)
    n = x.size
    if spec.kind == "linear_features":
        Phi = basis(spec, shard.features)
        G = (2.0 / shard.sample_count) * (Phi.T @ Phi)
        H = np.kron(G, np.eye(spec.output_dim))
    else:
        h = HESS_FD_STEP * (1.0 + np.abs(x))
        E = np.diag(h)
        X = np.concatenate([x + E, x - E], axis=0)
        Gs = _grad_batch(spec, X, shard)
        H = (Gs[:n] - Gs[n:]) / (2.0 * h[:, None])
    return 0.5 * (H + H.T)


def init_params(spec, rng, low=-0.5, high=0.5):
    """Uniform draws in ``[low, high]`` for every packed parameter."""
    return rng.uniform(low, high, size=parameter_count(spec))


class ShardObjective:
    """Training loss of one model on one shard, seen as a function of ``x``."""

    def __init__(self, spec, shard):
        _check(spec, np.zeros(parameter_count(spec)), shard)
        self.spec = spec
        self.shard = shard
        self.dim = parameter_count(spec)
        self.is_quadratic = spec.kind == "linear_features"

    def value(self, x):
        return loss(self.spec, x, self.shard)

    def grad(self, x):
        return grad(self.spec, x, self.shard)

    def hess(self, x):
        return hessian(self.spec, x, self.shard)


class QuadraticObjective:
    """``J(x) = 0.5 x^T H x - c^T x + const`` with exact derivatives."""

    is_quadratic = True

    def __init__(self, H, c=None, const=0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        self.H = 0.5 * (H + H.T)
        self.dim = self.H.shape[0]
        self.c = np.zeros(self.dim) if c is None else np.asarray(c, dtype=float).reshape(-1)
        self.const = float(const)

    def value(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(0.5 * x @ self.H @ x - self.c @ x + self.const)

    def grad(self, x):
        return self.H @ np.asarray(x, dtype=float).reshape(-1) - self.c

    def hess(self, x):
        return self.H.copy()


class FunctionObjective:
    """Wrap plain callables ``value``, ``grad`` and ``hess`` as an objective."""

    def __init__(self, value, grad, hess, dim, is_quadratic=False):
        self._value, self._grad, self._hess = value, grad, hess
        self.dim = dim
        self.is_quadratic = is_quadratic

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=float)))

    def grad(self, x):
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float).reshape(-1)

    def hess(self, x):
        H = np.atleast_2d(np.asarray(self._hess(np.asarray(x, dtype=float)), dtype=float))
        return 0.5 * (H + H.T)
