"""Dense float32 tensor primitives and the TNS1 on-disk format.

Single images follow the [C, H, W] convention; the *_batch variants used by
the network code take a leading batch axis. Public single-image operations
validate their inputs and guarantee finite outputs; reductions elsewhere in
the package accumulate in float64 to limit drift.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS1"


class TensorError(ValueError):
    """An operation would produce or consume an invalid tensor."""


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite values in {what}")
    return arr


def as_f32(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernels, bias, padding: str = "same") -> np.ndarray:
    """Cross-correlate ``x`` [C_in,H,W] with ``kernels`` [C_out,C_in,k,k].

    ``padding="same"`` zero-pads so H and W are preserved; ``"valid"``
    shrinks them by k-1. Kernel size must be odd and square.
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.ndim != 3 or kernels.ndim != 4 or bias.ndim != 1:
        raise TensorError("conv2d expects x[C,H,W], kernels[Co,Ci,k,k], bias[Co]")
    co, ci, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise TensorError(f"kernel must be square with odd size, got {kh}x{kw}")
    if ci != x.shape[0]:
        raise TensorError(f"kernel expects {ci} input channels, input has {x.shape[0]}")
    if bias.shape[0] != co:
        raise TensorError(f"bias length {bias.shape[0]} != {co} output channels")
    if padding == "same":
        pad = kh // 2
    elif padding == "valid":
        pad = 0
        if x.shape[1] < kh or x.shape[2] < kw:
            raise TensorError("input smaller than kernel under valid padding")
    else:
        raise TensorError(f"unknown padding {padding!r}")
    check_finite(x, "conv2d input")
    out = conv2d_batch(x[None], kernels, bias, pad)[0]
    return check_finite(out, "conv2d output")


def im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    """Unfold padded [B,C,Hp,Wp] into a [C*k*k, B*ho*wo] column matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    c = xp.shape[1]
    cols = win.transpose(1, 4, 5, 0, 2, 3)
    return np.ascontiguousarray(cols).reshape(c * k * k, -1)


def col2im(dcols: np.ndarray, b: int, c: int, h: int, w: int, k: int, pad: int) -> np.ndarray:
    """Fold a column-matrix gradient back onto the (unpadded) input grid."""
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    d6 = dcols.reshape(c, k, k, b, ho, wo)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + ho, j : j + wo] += d6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_batch(xb: np.ndarray, kernels: np.ndarray, bias: np.ndarray, pad: int) -> np.ndarray:
    """Batched cross-correlation via one GEMM; [B,Ci,H,W] -> [B,Co,H',W']."""
    b, ci, h, w = xb.shape
    co = kernels.shape[0]
    k = kernels.shape[2]
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = im2col(xp, k, ho, wo)
    out = kernels.reshape(co, ci * k * k) @ cols
    out += bias[:, None]
    return out.reshape(co, b, ho, wo).transpose(1, 0, 2, 3)


def conv2d_backward_batch(dout, x, kernels, pad):
    """Gradients of conv2d_batch w.r.t. kernels, bias and input."""
    b, ci, h, w = x.shape
    co = kernels.shape[0]
    k = kernels.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = dout.shape[2], dout.shape[3]
    cols = im2col(xp, k, ho, wo)
    dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(co, -1)
    dk = (dmat @ cols.T).reshape(kernels.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = kernels.reshape(co, ci * k * k).T @ dmat
    dx = col2im(dcols, b, ci, h, w, k, pad)
    return dk, db, dx


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling on [C,H,W]; returns (pooled, window argmax).

    Indices are row-major offsets 0..3 inside each 2x2 window (3 is the
    bottom-right corner); the backward pass scatters gradients through them.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise TensorError("maxpool2d expects [C,H,W]")
    check_finite(x, "maxpool2d input")
    out, idx = maxpool2d_batch(x[None])
    return out[0], idx[0]


def maxpool2d_batch(xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise TensorError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    xw = xb.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xw = xw.reshape(b, c, h // 2, w // 2, 4)
    idx = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward_batch(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, c, ho, wo = dout.shape
    g = np.zeros((b, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return g.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)


def upsample_nearest(x) -> np.ndarray:
    """Replicate each pixel of [C,H,W] into a 2x2 block -> [C,2H,2W]."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise TensorError("upsample_nearest expects [C,H,W]")
    check_finite(x, "upsample input")
    return upsample_nearest_batch(x[None])[0]


def upsample_nearest_batch(xb: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(xb, 2, axis=2), 2, axis=3)


def upsample_nearest_backward_batch(dout: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = dout.shape
    return dout.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# probabilities


def softmax_channels(x) -> np.ndarray:
    """Per-pixel softmax across the channel axis of [K,H,W], K >= 2.

    Max-subtracted for stability: safe for logit magnitudes of 1e3 and
    beyond; output channels sum to 1 within 1e-6 at every pixel.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] < 2:
        raise TensorError("softmax_channels expects [K,H,W] with K >= 2")
    check_finite(x, "softmax input")
    return softmax_batch(x[None])[0]


def softmax_batch(xb: np.ndarray) -> np.ndarray:
    m = xb.max(axis=1, keepdims=True)
    e = np.exp(xb - m)
    return e / e.sum(axis=1, keepdims=True)


def entropy(p) -> float:
    """Shannon entropy in nats of a probability vector; 0*log(0) == 0.

    The result lies in [0, ln K]. Raises for vectors that are not a
    probability distribution (components outside [0,1] or sum off by
    more than 1e-6).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise TensorError("entropy expects a probability vector of length >= 2")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise TensorError("entropy components must be finite and in [0, 1]")
    if abs(p.sum() - 1.0) > 1e-6:
        raise TensorError(f"probabilities sum to {p.sum():.8f}, not 1")
    return float(entropy_field(p, axis=0))


def entropy_field(p, axis: int = 0) -> np.ndarray:
    """Elementwise -sum(p log p) along ``axis`` in float64, no validation."""
    p64 = np.asarray(p, dtype=np.float64)
    safe = np.where(p64 > 0.0, p64, 1.0)
    return -(p64 * np.log(safe)).sum(axis=axis)


def dropout_mask(shape, p: float, rng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p).

    Scaling at mask time keeps the expectation equal to the identity, so
    plain inference needs no rescaling.
    """
    if not 0.0 <= p < 1.0:
        raise TensorError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=np.float32)
    keep = rng.uniform(size=shape) >= p
    return keep.astype(np.float32) * np.float32(1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# TNS1 file format: 4-byte magic, u32 LE rank, rank x u32 LE dims,
# float32 LE row-major data.


def dumps_tns(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    check_finite(a, "TNS1 payload")
    head = TNS_MAGIC + np.asarray([a.ndim], dtype="<u4").tobytes()
    dims = np.asarray(a.shape, dtype="<u4").tobytes()
    return head + dims + a.tobytes()


def loads_tns(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != TNS_MAGIC:
        raise TensorError("bad TNS1 magic")
    rank = int(np.frombuffer(data, "<u4", 1, 4)[0])
    if rank > 16:
        raise TensorError(f"implausible TNS1 rank {rank}")
    if len(data) < 8 + 4 * rank:
        raise TensorError("truncated TNS1 header")
    dims = np.frombuffer(data, "<u4", rank, 8).astype(np.int64)
    n = int(dims.prod()) if rank else 1
    off = 8 + 4 * rank
    if len(data) != off + 4 * n:
        raise TensorError(f"TNS1 payload length {len(data) - off}, expected {4 * n}")
    arr = np.frombuffer(data, "<f4", n, off).reshape(dims).astype(np.float32)
    return check_finite(arr, "TNS1 payload")


def save_tns(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_tns(arr))
    os.replace(tmp, path)


def load_tns(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise TensorError(f"cannot read {path}: {exc}") from exc
    try:
        return loads_tns(data)
    except TensorError as exc:
        raise TensorError(f"{path}: {exc}") from exc
