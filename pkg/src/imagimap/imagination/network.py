"""Small encoder-decoder ("desk-scale UNet") written directly in numpy.

Layout is NHWC. The network is::

    conv3x3(3->c1) relu ---------------------------------------.
    maxpool2  conv3x3(c1->c2) relu                              |
    maxpool2  conv3x3(c2->c3) relu                              |
    up2       conv3x3(c3->c4) relu                              |
    up2       concat(skip) -> conv3x3(c4+c1 -> 1) -> sigmoid  <-'

Inputs whose side is not a multiple of 4 are zero-padded on the bottom and
right before the forward pass and the output is cropped back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..errors import DimensionError

IN_CHANNELS = 3
DEFAULT_WIDTHS = (8, 16, 16, 8)
PROB_CLAMP = 1e-7


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, 9C) of zero-padded 3x3 neighbourhoods."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=-1)


def _col2im(dcols: np.ndarray, C: int) -> np.ndarray:
    B, H, W, _ = dcols.shape
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W, :] += dcols[..., k * C:(k + 1) * C]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _kernel_cat(w: np.ndarray) -> np.ndarray:
    """(3, 3, C, O) -> (C, 9O) with tap k = 3i + j in columns [kO, (k+1)O)."""
    C, O = w.shape[2:]
    return w.reshape(9, C, O).transpose(1, 0, 2).reshape(C, 9 * O)


def conv_forward(x, w, b):
    """3x3 'same' convolution. Returns the output and a cache for backward.

    Layers with fewer outputs than inputs multiply first and shift the
    nine per-tap results (cheap when ``O`` is small); the others gather
    shifted inputs (im2col) and multiply once.
    """
    B, H, W, C = x.shape
    O = w.shape[-1]
    if O < C:
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        z = (xp.reshape(-1, C) @ _kernel_cat(w)).reshape(B, H + 2, W + 2, 9 * O)
        out = np.empty((B, H, W, O), dtype=z.dtype)
        out[...] = b
        k = 0
        for i in range(3):
            for j in range(3):
                out += z[:, i:i + H, j:j + W, k * O:(k + 1) * O]
                k += 1
        return out, ("out", xp)
    cols = _im2col(x)
    return cols @ w.reshape(-1, O) + b, ("in", cols)


def conv_backward(dout, cache, w, need_dx=True):
    B, H, W, O = dout.shape
    C = w.shape[2]
    db = dout.reshape(-1, O).sum(axis=0)
    kind, saved = cache
    if kind == "out":
        xp = saved
        dz = np.zeros((B, H + 2, W + 2, 9 * O), dtype=dout.dtype)
        k = 0
        for i in range(3):
            for j in range(3):
                dz[:, i:i + H, j:j + W, k * O:(k + 1) * O] = dout
                k += 1
        dz2 = dz.reshape(-1, 9 * O)
        dwcat = xp.reshape(-1, C).T @ dz2
        dw = dwcat.reshape(C, 9, O).transpose(1, 0, 2).reshape(w.shape)
        dx = None
        if need_dx:
            dx = (dz2 @ _kernel_cat(w).T).reshape(B, H + 2, W + 2, C)[:, 1:-1, 1:-1, :]
        return dx, dw, db
    cols = saved
    d2 = dout.reshape(-1, O)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
    dx = _col2im(dout @ w.reshape(-1, O).T, C) if need_dx else None
    return dx, dw, db


def maxpool_forward(x):
    B, H, W, C = x.shape
    blocks = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, arg, shape):
    B, H, W, C = shape
    dblocks = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


@dataclass
class ImaginationUnit:
    """One per-class network. ``params`` alternates kernel, bias for 5 convs."""

    class_id: int
    params: List[np.ndarray]
    widths: Tuple[int, int, int, int] = DEFAULT_WIDTHS
    _cache: Optional[dict] = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, class_id: int, rng: np.random.Generator, widths: Sequence[int] = DEFAULT_WIDTHS,
               dtype=np.float32, zero_final: bool = False) -> "ImaginationUnit":
        c1, c2, c3, c4 = widths
        shapes = [(IN_CHANNELS, c1), (c1, c2), (c2, c3), (c3, c4), (c4 + c1, 1)]
        params = []
        for i, (cin, cout) in enumerate(shapes):
            fan_in = 9 * cin
            # He init for ReLU layers, Xavier-ish for the sigmoid head
            std = np.sqrt(2.0 / fan_in) if i < 4 else np.sqrt(1.0 / fan_in)
            w = rng.normal(0.0, std, size=(3, 3, cin, cout))
            if i == 4 and zero_final:
                w = np.zeros_like(w)
            params += [w.astype(dtype), np.zeros(cout, dtype=dtype)]
        return cls(class_id, params, tuple(int(c) for c in widths))

    @property
    def dtype(self):
        return self.params[0].dtype

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "ImaginationUnit":
        return ImaginationUnit(self.class_id, [p.copy() for p in self.params], self.widths)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Probabilities ``(B, H, W)`` for an input batch ``(B, H, W, 3)``.

        Outputs are clamped to [1e-7, 1 - 1e-7]; the clamp is treated as a
        constant by :meth:`backward`.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != IN_CHANNELS or x.shape[1] != x.shape[2]:
            raise DimensionError(f"expected (B, S, S, {IN_CHANNELS}) input, got {x.shape}")
        B, S = x.shape[0], x.shape[1]
        P = -(-S // 4) * 4
        if P != S:
            x = np.pad(x, ((0, 0), (0, P - S), (0, P - S), (0, 0)))
        w1, b1, w2, b2, w3, b3, w4, b4, w5, b5 = self.params
        c = {"S": S}
        z1, c["cols1"] = conv_forward(x, w1, b1)
        a1 = np.maximum(z1, 0)
        p1, c["arg1"] = maxpool_forward(a1)
        z2, c["cols2"] = conv_forward(p1, w2, b2)
        a2 = np.maximum(z2, 0)
        p2, c["arg2"] = maxpool_forward(a2)
        z3, c["cols3"] = conv_forward(p2, w3, b3)
        a3 = np.maximum(z3, 0)
        u3 = upsample_forward(a3)
        z4, c["cols4"] = conv_forward(u3, w4, b4)
        a4 = np.maximum(z4, 0)
        u4 = upsample_forward(a4)
        cat = np.concatenate([u4, a1], axis=-1)
        z5, c["cols5"] = conv_forward(cat, w5, b5)
        raw = expit(z5[..., 0].astype(np.float64))
        prob = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
        c.update(z1=z1, z2=z2, z3=z3, z4=z4, a1_shape=a1.shape, a2_shape=a2.shape,
                 prob=prob, clamped=(raw != prob))
        self._cache = c
        return prob[:, :S, :S]

    def backward(self, dprob: np.ndarray) -> List[np.ndarray]:
        """Gradients of all parameters given ``dL/dprob`` for the last forward."""
        c = self._cache
        if c is None:
            raise RuntimeError("backward called before forward")
        S = c["S"]
        prob = c["prob"]
        full = np.zeros_like(prob)
        full[:, :S, :S] = dprob
        dz5 = full * prob * (1.0 - prob)
        dz5[c["clamped"]] = 0.0
        return self._backprop(dz5)

    def backward_logits(self, dlogits: np.ndarray) -> List[np.ndarray]:
        """Gradients given ``dL/dz`` at the pre-sigmoid output (clamp-aware)."""
        c = self._cache
        S = c["S"]
        full = np.zeros_like(c["prob"])
        full[:, :S, :S] = dlogits
        full[c["clamped"]] = 0.0
        return self._backprop(full)

    def _backprop(self, dz5) -> List[np.ndarray]:
        c = self._cache
        w1, _, w2, _, w3, _, w4, _, w5, _ = self.params
        c1 = w1.shape[-1]
        dz5 = dz5[..., None].astype(self.dtype)
        dcat, dw5, db5 = conv_backward(dz5, c["cols5"], w5)
        du4, da1_skip = dcat[..., :-c1], dcat[..., -c1:]
        da4 = upsample_backward(du4)
        dz4 = da4 * (c["z4"] > 0)
        du3, dw4, db4 = conv_backward(dz4, c["cols4"], w4)
        da3 = upsample_backward(du3)
        dz3 = da3 * (c["z3"] > 0)
        dp2, dw3, db3 = conv_backward(dz3, c["cols3"], w3)
        da2 = maxpool_backward(dp2, c["arg2"], c["a2_shape"])
        dz2 = da2 * (c["z2"] > 0)
        dp1, dw2, db2 = conv_backward(dz2, c["cols2"], w2)
        da1 = maxpool_backward(dp1, c["arg1"], c["a1_shape"]) + da1_skip
        dz1 = da1 * (c["z1"] > 0)
        _, dw1, db1 = conv_backward(dz1, c["cols1"], w1, need_dx=False)
        return [dw1, db1, dw2, db2, dw3, db3, dw4, db4, dw5, db5]
