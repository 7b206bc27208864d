"""Toy differentiable detectors and the selector's LSTM gate.

All networks here are deliberately small: a frozen per-cell backbone, a
two-layer per-cell decoder head (the only trainable detection component),
and a single-cell LSTM with a scalar readout.  Gradients are written out
analytically; finite-difference tests pin them down.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from .detection import GridShape, sigmoid


@dataclass(frozen=True)
class FeatureFrame:
    """One frame as an (s, s, d) grid of feature vectors."""

    frame_id: int
    values: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.values.shape[-1]


class Backbone:
    """Frozen per-cell affine + tanh transform, fixed at construction.

    Stands in for a pretrained feature extractor: deterministic given the
    seed, never updated.  Also produces the pooled feature summary consumed
    by the key-frame selector (per-channel mean and max over the grid).
    """

    def __init__(self, feature_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, feature_dim))
        self.b = rng.normal(0.0, 0.1, size=feature_dim)

    def forward(self, frame: FeatureFrame) -> tuple[FeatureFrame, np.ndarray]:
        out = np.tanh(frame.values @ self.w + self.b)
        summary = np.concatenate([out.mean(axis=(0, 1)), out.max(axis=(0, 1))])
        return FeatureFrame(frame_id=frame.frame_id, values=out), summary


@dataclass(frozen=True)
class DecoderParams:
    """Two-layer per-cell head: d -> hidden (tanh) -> 5 + c logits.

    version increases by one on every committed update; a frozen copy keeps
    version 0 forever.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    version: int = 0


@dataclass(frozen=True)
class DecoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in (self.w1, self.b1, self.w2, self.b2))


def init_decoder(feature_dim: int, hidden: int, shape: GridShape, seed: int,
                 scale: float = 0.1) -> DecoderParams:
    rng = np.random.default_rng(seed)
    return DecoderParams(
        w1=rng.normal(0.0, scale, size=(feature_dim, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, scale, size=(hidden, shape.channels)),
        b2=np.zeros(shape.channels),
        version=0,
    )


def decoder_forward(params: DecoderParams, features: FeatureFrame) -> np.ndarray:
    """Apply the head to every cell; returns an (s, s, 5 + c) logit tensor."""
    if features.values.shape[-1] != params.w1.shape[0]:
        raise ValueError(
            f"feature dim {features.values.shape[-1]} does not match decoder input {params.w1.shape[0]}"
        )
    hidden = np.tanh(features.values @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def decoder_grad(params: DecoderParams, features: FeatureFrame, out_grad: np.ndarray) -> DecoderGrads:
    """Exact parameter gradient of the head output contracted with out_grad."""
    x = features.values.reshape(-1, params.w1.shape[0])
    g = out_grad.reshape(-1, params.w2.shape[1])
    a = np.tanh(x @ params.w1 + params.b1)
    gw2 = a.T @ g
    gb2 = g.sum(axis=0)
    dz = (g @ params.w2.T) * (1.0 - a * a)
    gw1 = x.T @ dz
    gb1 = dz.sum(axis=0)
    return DecoderGrads(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def sgd_step(params: DecoderParams, grads: DecoderGrads, lr: float) -> DecoderParams:
    """One plain gradient step; bumps the version counter."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not grads.is_finite():
        raise ValueError("non-finite gradient, update rejected")
    return DecoderParams(
        w1=params.w1 - lr * grads.w1,
        b1=params.b1 - lr * grads.b1,
        w2=params.w2 - lr * grads.w2,
        b2=params.b2 - lr * grads.b2,
        version=params.version + 1,
    )


class ParamStore:
    """Snapshot-read / atomic-commit holder for decoder parameters.

    Readers always see a complete parameter set at some version; a single
    writer commits strictly increasing versions.  DecoderParams instances
    are frozen, so a snapshot stays consistent while the writer advances.
    """

    def __init__(self, params: DecoderParams):
        self._lock = threading.Lock()
        self._params = params

    def snapshot(self) -> DecoderParams:
        with self._lock:
            return self._params

    def commit(self, params: DecoderParams) -> None:
        with self._lock:
            if params.version <= self._params.version:
                raise ValueError(
                    f"stale commit: version {params.version} <= {self._params.version}"
                )
            self._params = params


@dataclass(frozen=True)
class LstmParams:
    """Single LSTM cell plus scalar sigmoid readout.

    w_gates stacks the input, forget, output and candidate gates, each of
    size hidden, applied to [x, h_prev].  h and c are the recurrent state;
    they are reset only at stream start.
    """

    w_gates: np.ndarray  # (4 * hidden, input + hidden)
    b_gates: np.ndarray  # (4 * hidden,)
    w_out: np.ndarray    # (hidden,)
    b_out: float
    h: np.ndarray
    c: np.ndarray

    @property
    def hidden(self) -> int:
        return self.h.shape[0]


def init_lstm(input_dim: int, hidden: int, seed: int, scale: float = 0.1) -> LstmParams:
    """Gate weights small random, readout zero so the initial score is 0.5."""
    rng = np.random.default_rng(seed)
    return LstmParams(
        w_gates=rng.normal(0.0, scale, size=(4 * hidden, input_dim + hidden)),
        b_gates=np.zeros(4 * hidden),
        w_out=np.zeros(hidden),
        b_out=0.0,
        h=np.zeros(hidden),
        c=np.zeros(hidden),
    )


def _lstm_cell(params: LstmParams, x: np.ndarray):
    n = params.hidden
    z = np.concatenate([x, params.h])
    pre = params.w_gates @ z + params.b_gates
    i = sigmoid(pre[0:n])
    f = sigmoid(pre[n:2 * n])
    o = sigmoid(pre[2 * n:3 * n])
    g = np.tanh(pre[3 * n:4 * n])
    c_new = f * params.c + i * g
    h_new = o * np.tanh(c_new)
    return z, i, f, o, g, c_new, h_new


def lstm_forward(params: LstmParams, summary: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """One cell update followed by the sigmoid readout.

    Pure: returns (score, h_new, c_new) without touching params; the caller
    decides whether to commit the advanced state.
    """
    if summary.shape[0] + params.hidden != params.w_gates.shape[1]:
        raise ValueError(
            f"summary dim {summary.shape[0]} does not match LSTM input "
            f"{params.w_gates.shape[1] - params.hidden}"
        )
    _, _, _, _, _, c_new, h_new = _lstm_cell(params, summary)
    score = float(sigmoid(params.w_out @ h_new + params.b_out))
    return score, h_new, c_new


def advance_lstm(params: LstmParams, summary: np.ndarray) -> tuple[float, LstmParams]:
    """lstm_forward that also commits the new hidden state."""
    score, h_new, c_new = lstm_forward(params, summary)
    return score, replace(params, h=h_new, c=c_new)


def lstm_train_step(params: LstmParams, summary: np.ndarray, label: int, lr: float) -> LstmParams:
    """One SGD step on binary cross-entropy between the gate score and label.

    The gradient is truncated at the current step: h and c held in params are
    treated as constants, and the returned params keep them unchanged.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    n = params.hidden
    z, i, f, o, g, c_new, h_new = _lstm_cell(params, summary)
    th = np.tanh(c_new)
    score = sigmoid(params.w_out @ h_new + params.b_out)

    d_u = score - label  # d BCE / d readout-logit
    gw_out = d_u * h_new
    gb_out = d_u
    dh = d_u * params.w_out
    do = dh * th
    dc = dh * o * (1.0 - th * th)
    df = dc * params.c
    di = dc * g
    dg = dc * i
    d_pre = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ])
    gw_gates = np.outer(d_pre, z)
    gb_gates = d_pre

    return replace(
        params,
        w_gates=params.w_gates - lr * gw_gates,
        b_gates=params.b_gates - lr * gb_gates,
        w_out=params.w_out - lr * gw_out,
        b_out=params.b_out - lr * gb_out,
    )


def bce(score: float, label: int, eps: float = 1e-12) -> float:
    p = min(max(score, eps), 1.0 - eps)
    return -(label * np.log(p) + (1 - label) * np.log(1.0 - p))
