"""Convolutional-recurrent flow predictor written directly on numpy.

The network maps a ``lags x loops`` window of recent flow to one scalar:

    Conv1D over the lag axis (loops as channels, ReLU)
    -> LSTM over the resulting short sequence (gate order i, f, g, o)
    -> dense ReLU layer on the final hidden state
    -> linear scalar output

Gradients are exact for a single window: backpropagation runs through every
LSTM step of the window and stops at the state the window started from. When
the LSTM state is carried between consecutive windows that incoming state is
treated as a constant.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .errors import ContractError, DataError, SpecificationError

PARAM_ORDER = (
    "conv_w",
    "conv_b",
    "lstm_w",
    "lstm_b",
    "dense_w",
    "dense_b",
    "out_w",
    "out_b",
)

GradientSet = dict  # parameter name -> array congruent with NetworkModel.params


@dataclass(frozen=True)
class NetworkSpec:
    input_lags: int = 5
    input_loops: int = 9
    conv_filters: int = 50
    conv_kernel: int = 2
    lstm_cells: int = 75
    dense_units: int = 50
    stateful: bool = True

    def __post_init__(self):
        counts = {
            "input_lags": self.input_lags,
            "input_loops": self.input_loops,
            "conv_filters": self.conv_filters,
            "conv_kernel": self.conv_kernel,
            "lstm_cells": self.lstm_cells,
            "dense_units": self.dense_units,
        }
        for name, value in counts.items():
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise SpecificationError(f"{name} must be a positive integer, got {value!r}")
        if self.conv_kernel > self.input_lags:
            raise SpecificationError(
                f"conv_kernel ({self.conv_kernel}) exceeds input_lags ({self.input_lags})"
            )

    @property
    def conv_length(self) -> int:
        """Number of LSTM steps per window."""
        return self.input_lags - self.conv_kernel + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        F, C, K = self.conv_filters, self.input_loops, self.conv_kernel
        H, U = self.lstm_cells, self.dense_units
        return {
            "conv_w": (F, C, K),
            "conv_b": (F,),
            "lstm_w": (4, H, F + H),
            "lstm_b": (4, H),
            "dense_w": (U, H),
            "dense_b": (U,),
            "out_w": (1, U),
            "out_b": (1,),
        }

    def param_count(self) -> int:
        F, C, K = self.conv_filters, self.input_loops, self.conv_kernel
        H, U = self.lstm_cells, self.dense_units
        conv = F * (C * K) + F
        lstm = 4 * (H * (F + H) + H)
        dense = U * H + U
        output = U + 1
        return conv + lstm + dense + output


@dataclass
class NetworkModel:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    hidden: np.ndarray
    cell: np.ndarray
    rng_seed: int | None = None

    @property
    def lstm_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.hidden, self.cell

    @property
    def dtype(self):
        return self.params["conv_w"].dtype

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkModel":
        """Copy of the model with every array cast to ``dtype``."""
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.hidden = out.hidden.astype(dtype)
        out.cell = out.cell.astype(dtype)
        return out

    def audit_shapes(self) -> None:
        """Raise ContractError unless every array matches the spec's closed form."""
        expected = self.spec.param_shapes()
        if tuple(self.params) != PARAM_ORDER:
            raise ContractError(f"parameter names/order {tuple(self.params)} != {PARAM_ORDER}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        H = self.spec.lstm_cells
        if self.hidden.shape != (H,) or self.cell.shape != (H,):
            raise ContractError("LSTM state shape does not match lstm_cells")
        if self.n_params() != self.spec.param_count():
            raise ContractError("parameter count differs from closed form")

    def weights_equal(self, other: "NetworkModel") -> bool:
        """Bit-level comparison of specs and all weight arrays (state ignored)."""
        if self.spec != other.spec:
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_ORDER)


def _fan_in(name: str, spec: NetworkSpec) -> int:
    return {
        "conv_w": spec.input_loops * spec.conv_kernel,
        "lstm_w": spec.conv_filters + spec.lstm_cells,
        "dense_w": spec.lstm_cells,
        "out_w": spec.dense_units,
    }[name]


def init_model(spec: NetworkSpec, seed: int) -> NetworkModel:
    """Fresh model: weights ~ U(-sqrt(3/fan_in), +sqrt(3/fan_in)), zero biases and state."""
    if not isinstance(spec, NetworkSpec):
        raise SpecificationError("spec must be a NetworkSpec")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(3.0 / _fan_in(name, spec))
            params[name] = rng.uniform(-limit, limit, size=shape)
    H = spec.lstm_cells
    return NetworkModel(spec, params, np.zeros(H), np.zeros(H), rng_seed=seed)


def zeros_like_params(model: NetworkModel) -> GradientSet:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# forward / backward kernels
# ---------------------------------------------------------------------------


@dataclass
class _Trace:
    X: np.ndarray  # (N, L, C)
    z: np.ndarray  # conv pre-activation (N, S, F)
    a: np.ndarray  # conv output (N, S, F)
    gates: np.ndarray  # activated gates (N, S, 4H) in order i, f, g, o
    hs: np.ndarray  # (N, S+1, H); hs[:, 0] is the incoming state
    cs: np.ndarray  # (N, S+1, H)
    zd: np.ndarray  # dense pre-activation (N, U)
    d: np.ndarray  # dense output (N, U)
    y: np.ndarray  # predictions (N,)


def _split_lstm(params):
    W = params["lstm_w"]
    G, H, _ = W.shape
    F = W.shape[2] - H
    Wx = W[:, :, :F].reshape(G * H, F)
    Wh = W[:, :, F:].reshape(G * H, H)
    return Wx, Wh, params["lstm_b"].reshape(G * H)


def _cell_step(pre, c, H, out):
    # pre: (..., 4H) pre-activations; writes activated gates into ``out``
    np.copyto(out, expit(pre))
    out[..., 2 * H : 3 * H] = np.tanh(pre[..., 2 * H : 3 * H])
    i = out[..., :H]
    f = out[..., H : 2 * H]
    g = out[..., 2 * H : 3 * H]
    o = out[..., 3 * H :]
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


@numba.njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _chain_recurrence(P, Wh, h0, c0, gates, hs, cs):
    # sequential LSTM over N windows x S steps; state flows across windows
    N, S, G = P.shape
    H = G // 4
    h = h0.copy()
    c = c0.copy()
    for n in range(N):
        hs[n, 0, :] = h
        cs[n, 0, :] = c
        for s in range(S):
            pre = P[n, s] + np.dot(Wh, h)
            act = gates[n, s]
            for j in range(H):
                ig = _sigmoid(pre[j])
                fg = _sigmoid(pre[H + j])
                gg = np.tanh(pre[2 * H + j])
                og = _sigmoid(pre[3 * H + j])
                act[j] = ig
                act[H + j] = fg
                act[2 * H + j] = gg
                act[3 * H + j] = og
                c[j] = fg * c[j] + ig * gg
                h[j] = og * np.tanh(c[j])
            hs[n, s + 1, :] = h
            cs[n, s + 1, :] = c


def _forward_trace(params, X, h0, c0, chain=True) -> _Trace:
    """Run the network on N windows.

    With ``chain`` the windows are consumed in order and each starts from the
    state the previous one ended in; otherwise every window starts at (h0, c0).
    """
    W = params["conv_w"]
    F, C, K = W.shape
    N, L, _ = X.shape
    S = L - K + 1
    z = X[:, 0:S, :] @ W[:, :, 0].T
    for k in range(1, K):
        z = z + X[:, k : k + S, :] @ W[:, :, k].T
    z = z + params["conv_b"]
    a = np.maximum(z, 0.0)

    Wx, Wh, b = _split_lstm(params)
    H = Wh.shape[1]
    P = a @ Wx.T + b  # (N, S, 4H)

    dtype = P.dtype
    gates = np.empty((N, S, 4 * H), dtype=dtype)
    hs = np.empty((N, S + 1, H), dtype=dtype)
    cs = np.empty((N, S + 1, H), dtype=dtype)
    if chain:
        _chain_recurrence(
            np.ascontiguousarray(P),
            np.ascontiguousarray(Wh),
            np.asarray(h0, dtype=dtype),
            np.asarray(c0, dtype=dtype),
            gates,
            hs,
            cs,
        )
    else:
        hs[:, 0] = h0
        cs[:, 0] = c0
        h, c = hs[:, 0], cs[:, 0]
        for s in range(S):
            h, c = _cell_step(P[:, s] + h @ Wh.T, c, H, gates[:, s])
            hs[:, s + 1] = h
            cs[:, s + 1] = c

    zd = hs[:, S] @ params["dense_w"].T + params["dense_b"]
    d = np.maximum(zd, 0.0)
    y = d @ params["out_w"][0] + params["out_b"][0]
    return _Trace(X, z, a, gates, hs, cs, zd, d, y)


def _backward(params, tr: _Trace, dy) -> GradientSet:
    """Gradients of sum_n dy[n] * y[n] with respect to every parameter."""
    N, S, F = tr.a.shape
    Wx, Wh, _ = _split_lstm(params)
    H = Wh.shape[1]
    grads = {}

    grads["out_w"] = (dy @ tr.d)[None, :]
    grads["out_b"] = np.array([dy.sum()], dtype=tr.d.dtype)
    dzd = np.outer(dy, params["out_w"][0]) * (tr.zd > 0)
    grads["dense_w"] = dzd.T @ tr.hs[:, S]
    grads["dense_b"] = dzd.sum(axis=0)
    dh = dzd @ params["dense_w"]
    dc = np.zeros_like(dh)

    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H, dtype=dWx.dtype)
    da = np.empty_like(tr.a)
    for s in range(S - 1, -1, -1):
        act = tr.gates[:, s]
        i = act[:, :H]
        f = act[:, H : 2 * H]
        g = act[:, 2 * H : 3 * H]
        o = act[:, 3 * H :]
        tc = np.tanh(tr.cs[:, s + 1])
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * tr.cs[:, s] * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += dpre.T @ tr.a[:, s]
        dWh += dpre.T @ tr.hs[:, s]
        db += dpre.sum(axis=0)
        da[:, s] = dpre @ Wx
        dh = dpre @ Wh
        dc = dc * f
    grads["lstm_w"] = np.concatenate([dWx, dWh], axis=1).reshape(4, H, F + H)
    grads["lstm_b"] = db.reshape(4, H)

    dz = da * (tr.z > 0)
    Fc, C, K = params["conv_w"].shape
    dzf = dz.reshape(-1, F)
    dW = np.empty_like(params["conv_w"])
    for k in range(K):
        dW[:, :, k] = dzf.T @ tr.X[:, k : k + S, :].reshape(-1, C)
    grads["conv_w"] = dW
    grads["conv_b"] = dzf.sum(axis=0)
    return {k: grads[k] for k in PARAM_ORDER}


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _check_windows(model: NetworkModel, X) -> np.ndarray:
    X = np.asarray(X)
    spec = model.spec
    if X.shape[-2:] != (spec.input_lags, spec.input_loops):
        raise ContractError(
            f"window shape {X.shape[-2:]} does not match ({spec.input_lags}, {spec.input_loops})"
        )
    if not np.all(np.isfinite(X)):
        raise DataError("window contains non-finite values")
    return X.astype(model.dtype, copy=False)


def _initial_state(model: NetworkModel, carry: bool):
    if carry and model.spec.stateful:
        return model.hidden, model.cell
    H = model.spec.lstm_cells
    return np.zeros(H, dtype=model.dtype), np.zeros(H, dtype=model.dtype)


def forward(model: NetworkModel, window, carry_state: bool = False):
    """Predict one window.

    Returns ``(prediction, (hidden, cell))``. With ``carry_state`` the pass
    starts from, and then overwrites, the model's LSTM state.
    """
    X = _check_windows(model, window)
    if X.ndim != 2:
        raise ContractError("forward expects a single 2-D window")
    h0, c0 = _initial_state(model, carry_state)
    tr = _forward_trace(model.params, X[None], h0, c0)
    h, c = tr.hs[0, -1].copy(), tr.cs[0, -1].copy()
    _assert_finite_state(h, c)
    if carry_state and model.spec.stateful:
        model.hidden, model.cell = h, c
    return float(tr.y[0]), (h, c)


def _assert_finite_state(h, c):
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise DataError("LSTM state became non-finite")


def compute_gradients(model: NetworkModel, window, target: float, carry_state: bool = False):
    """Squared-error loss of one window and its exact gradient.

    Neither weights nor LSTM state are modified; ``carry_state`` only selects
    whether the pass starts from the model's state or from zeros.
    """
    X = _check_windows(model, window)
    if not np.isfinite(target):
        raise DataError("target is not finite")
    h0, c0 = _initial_state(model, carry_state)
    tr = _forward_trace(model.params, X[None], h0, c0)
    resid = tr.y[0] - target
    dy = np.array([2.0 * resid], dtype=tr.y.dtype)
    return float(resid * resid), _backward(model.params, tr, dy)


def batch_gradients(model: NetworkModel, windows, targets, carry_state: bool = True):
    """Mean squared error over a chronological batch and its gradient.

    With ``carry_state`` the LSTM state is threaded through the batch and the
    model's state is left at the batch's final state. Returns
    ``(per_window_squared_errors, predictions, grads)``.
    """
    X = _check_windows(model, windows)
    targets = np.asarray(targets, dtype=model.dtype)
    if X.ndim != 3 or targets.shape != (X.shape[0],):
        raise ContractError("windows must be (N, lags, loops) with N targets")
    if X.shape[0] == 0:
        raise ContractError("empty batch")
    if not np.all(np.isfinite(targets)):
        raise DataError("targets contain non-finite values")
    carry = carry_state and model.spec.stateful
    h0, c0 = _initial_state(model, carry)
    tr = _forward_trace(model.params, X, h0, c0, chain=carry)
    resid = tr.y - targets
    dy = 2.0 * resid / X.shape[0]
    grads = _backward(model.params, tr, dy)
    if carry:
        h, c = tr.hs[-1, -1].copy(), tr.cs[-1, -1].copy()
        _assert_finite_state(h, c)
        model.hidden, model.cell = h, c
    return resid * resid, tr.y.copy(), grads


def apply_update(model: NetworkModel, grads: GradientSet, learning_rate: float) -> NetworkModel:
    """In-place gradient-descent step ``w <- w - lr * grad``; state untouched."""
    if learning_rate < 0:
        raise ContractError("learning_rate must be >= 0")
    if set(grads) != set(model.params):
        raise ContractError("gradient set does not match model parameters")
    for name, g in grads.items():
        if np.shape(g) != model.params[name].shape:
            raise ContractError(f"gradient for {name} has shape {np.shape(g)}")
    for name in PARAM_ORDER:
        model.params[name] -= learning_rate * grads[name]
    return model


def reset_state(model: NetworkModel) -> NetworkModel:
    model.hidden = np.zeros_like(model.hidden)
    model.cell = np.zeros_like(model.cell)
    return model


def _window_loss(params, X, h0, c0, target):
    y = _forward_trace(params, X, h0, c0).y[0]
    return (y - target) ** 2


def gradient_check(model: NetworkModel, window, target: float, epsilon: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The analytic gradient is computed in the model's own precision; the
    central differences are always evaluated in float64 so the oracle does not
    inherit single-precision rounding. The error per weight is
    ``|a - n| / max(|a|, |n|, 1e-12)``. Expect < 1e-4 for float64 models and
    < 1e-2 for float32 ones.
    """
    if not 0 < epsilon <= 1e-3:
        raise ContractError("epsilon must lie in (0, 1e-3]")
    _, analytic = compute_gradients(model, window, target)
    X = _check_windows(model, window).astype(np.float64)[None]
    H = model.spec.lstm_cells
    h0 = np.zeros(H)
    c0 = np.zeros(H)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    worst = 0.0
    for name in PARAM_ORDER:
        flat = params[name].reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = _window_loss(params, X, h0, c0, target)
            flat[j] = orig - epsilon
            down = _window_loss(params, X, h0, c0, target)
            flat[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(a_flat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return float(worst)
