"""Tiny volumetric segmenter with hand-derived reverse-mode gradients.

Three 3x3x3 convolutions (1 -> F -> F -> C, zero padding, tanh between
layers, per-class sigmoid output) plus a 1x1x1 sigmoid head on the
second-layer features for deep supervision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def im2col(x: np.ndarray) -> np.ndarray:
    """(Cin, H, W, L) -> (Cin*27, H*W*L) columns for a padded 3x3x3 stencil."""
    cin, H, W, L = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((cin, 27, H, W, L), dtype=x.dtype)
    n = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[:, n] = xp[:, i : i + H, j : j + W, k : k + L]
                n += 1
    return cols.reshape(cin * 27, H * W * L)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    cin, H, W, L = shape
    cols = cols.reshape(cin, 27, H, W, L)
    xp = np.zeros((cin, H + 2, W + 2, L + 2), dtype=cols.dtype)
    n = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                xp[:, i : i + H, j : j + W, k : k + L] += cols[:, n]
                n += 1
    return xp[:, 1:-1, 1:-1, 1:-1]


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (output, cached columns)."""
    cols = im2col(x)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:]), cols


def conv3d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True):
    d2 = dout.reshape(dout.shape[0], -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = col2im(w.reshape(w.shape[0], -1).T @ d2, x_shape) if need_dx else None
    return dx, dw, db


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def upsample_nearest(x: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor resize of (C, h, w, l) to spatial ``shape``."""
    if x.shape[1:] == tuple(shape):
        return x
    idx = [np.minimum((np.arange(n) * s // n), s - 1) for n, s in zip(shape, x.shape[1:])]
    return x[:, idx[0]][:, :, idx[1]][:, :, :, idx[2]]


@dataclass
class ForwardCache:
    x_shape: tuple
    cols1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    cols3: np.ndarray
    prob: np.ndarray
    deep: np.ndarray


class SegModel:
    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "wd", "bd")

    def __init__(self, n_classes: int, features: int = 8, seed: int = 0,
                 out_bias: float = -2.0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        f, c = features, n_classes
        self.dtype = np.dtype(dtype)

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(1.0 / fan_in), shape)

        p = {
            "w1": he((f, 1, 3, 3, 3), 27),
            "b1": np.zeros(f),
            "w2": he((f, f, 3, 3, 3), 27 * f),
            "b2": np.zeros(f),
            "w3": he((c, f, 3, 3, 3), 27 * f),
            "b3": np.full(c, out_bias),
            "wd": he((c, f), f),
            "bd": np.full(c, out_bias),
        }
        self.params = {k: v.astype(self.dtype) for k, v in p.items()}
        self.n_classes = c
        self.features = f

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def astype(self, dtype) -> "SegModel":
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        return self

    def forward(self, x: np.ndarray, cache: bool = False):
        """``x``: normalized CT (H, W, L). Returns (prob, deep_prob[, cache])."""
        p = self.params
        x = np.asarray(x, dtype=self.dtype)[None]
        z1, cols1 = conv3d(x, p["w1"], p["b1"])
        a1 = np.tanh(z1)
        z2, cols2 = conv3d(a1, p["w2"], p["b2"])
        a2 = np.tanh(z2)
        z3, cols3 = conv3d(a2, p["w3"], p["b3"])
        prob = sigmoid(z3)
        zd = np.einsum("cf,fhwl->chwl", p["wd"], a2) + p["bd"][:, None, None, None]
        deep = upsample_nearest(sigmoid(zd), x.shape[1:])
        if not cache:
            return prob, deep
        return prob, deep, ForwardCache(x.shape, cols1, a1, cols2, a2, cols3, prob, deep)

    def backward(self, cache: ForwardCache, d_prob: np.ndarray, d_deep: np.ndarray | None = None) -> dict:
        """Parameter gradients given loss gradients w.r.t. both probability outputs."""
        p = self.params
        dt = self.dtype
        dz3 = (np.asarray(d_prob, dtype=dt) * cache.prob * (1 - cache.prob)).astype(dt)
        da2, dw3, db3 = conv3d_backward(dz3, cache.cols3, p["w3"], cache.a2.shape)
        g = {"w3": dw3, "b3": db3}
        if d_deep is None:
            g["wd"] = np.zeros_like(p["wd"])
            g["bd"] = np.zeros_like(p["bd"])
        else:
            dzd = (np.asarray(d_deep, dtype=dt) * cache.deep * (1 - cache.deep)).astype(dt)
            g["wd"] = np.einsum("chwl,fhwl->cf", dzd, cache.a2)
            g["bd"] = dzd.sum(axis=(1, 2, 3))
            da2 = da2 + np.einsum("cf,chwl->fhwl", p["wd"], dzd)
        dz2 = da2 * (1 - cache.a2**2)
        da1, dw2, db2 = conv3d_backward(dz2, cache.cols2, p["w2"], cache.a1.shape)
        g["w2"], g["b2"] = dw2, db2
        dz1 = da1 * (1 - cache.a1**2)
        _, dw1, db1 = conv3d_backward(dz1, cache.cols1, p["w1"], cache.x_shape, need_dx=False)
        g["w1"], g["b1"] = dw1, db1
        return {k: g[k].astype(dt) for k in self.PARAM_NAMES}

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k in self.PARAM_NAMES:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {self.params[k].shape}")
        for k in self.PARAM_NAMES:
            self.params[k][...] = np.asarray(state[k], dtype=self.dtype)
