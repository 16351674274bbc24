"""Minimal differentiable layers on numpy: dense and 3D convolution with
reverse-mode gradients (float64 accumulation), plus forward-only transposed
convolution, layer norm, softmax and multi-head attention for the
inference-only transformer path.

Weights are stored float32 and upcast to float64 for all math, so gradients
check against central finite differences at 1e-4 relative tolerance.
"""

from __future__ import annotations

import numpy as np


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# -- dense ---------------------------------------------------------------------

def dense(x, W, b):
    return x @ W + b


def dense_backward(x, W, dy):
    """Gradients of y = x @ W + b: returns (dW, db, dx)."""
    return x.T @ dy, dy.sum(axis=0), dy @ W.T


# -- rectifier -----------------------------------------------------------------

def relu(z):
    return np.maximum(z, 0.0)


def relu_backward(z, dy):
    return np.where(z > 0, dy, 0.0)


# -- row normalization (direction head) -----------------------------------------

def normalize_rows(v, eps: float = 1e-12):
    """Unit-normalize rows; returns (u, norms). Rows with norm <= eps are
    left zero and reported via norms for the caller's fallback policy."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    u = np.divide(v, norms, out=np.zeros_like(v), where=norms > eps)
    return u, norms[..., 0]


def normalize_rows_backward(v, dy, eps: float = 1e-12):
    """d/dv of u = v/|v|: (dy - u (u . dy)) / |v|; zero rows get zero grad."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = norms > eps
    u = np.divide(v, norms, out=np.zeros_like(v), where=safe)
    proj = (u * dy).sum(axis=-1, keepdims=True)
    return np.divide(dy - u * proj, norms, out=np.zeros_like(v), where=safe)


# -- 3D convolution (3x3x3 kernels, zero padding) --------------------------------

def conv3d(x, W, b, stride: int = 1):
    """x (X, Y, Z, Cin) * W (3, 3, 3, Cin, Cout) + b -> feature map.

    stride 1 keeps the grid; stride 2 halves it (dims must be even), with
    output voxel j centered on input voxel 2j.
    """
    X, Y, Z, _ = x.shape
    cout = W.shape[4]
    xp = np.zeros((X + 2, Y + 2, Z + 2, x.shape[3]), dtype=np.float64)
    xp[1:-1, 1:-1, 1:-1] = x
    if stride == 1:
        out = np.zeros((X, Y, Z, cout))
        for a in range(3):
            for bb in range(3):
                for c in range(3):
                    out += xp[a:a + X, bb:bb + Y, c:c + Z] @ np.float64(W[a, bb, c])
    elif stride == 2:
        if X % 2 or Y % 2 or Z % 2:
            raise ValueError("stride-2 convolution needs even dims")
        out = np.zeros((X // 2, Y // 2, Z // 2, cout))
        for a in range(3):
            for bb in range(3):
                for c in range(3):
                    out += (xp[a:a + X - 1:2, bb:bb + Y - 1:2, c:c + Z - 1:2]
                            @ np.float64(W[a, bb, c]))
    else:
        raise ValueError("stride must be 1 or 2")
    return out + np.float64(b)


def conv3d_backward(x, W, dy, stride: int = 1):
    """Gradients of conv3d: returns (dW, db, dx)."""
    X, Y, Z, cin = x.shape
    xp = np.zeros((X + 2, Y + 2, Z + 2, cin), dtype=np.float64)
    xp[1:-1, 1:-1, 1:-1] = x
    dxp = np.zeros_like(xp)
    dW = np.zeros(W.shape, dtype=np.float64)
    W64 = np.float64(W)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                if stride == 1:
                    window = xp[a:a + X, bb:bb + Y, c:c + Z]
                    dW[a, bb, c] = np.tensordot(window, dy, axes=([0, 1, 2], [0, 1, 2]))
                    dxp[a:a + X, bb:bb + Y, c:c + Z] += dy @ W64[a, bb, c].T
                else:
                    window = xp[a:a + X - 1:2, bb:bb + Y - 1:2, c:c + Z - 1:2]
                    dW[a, bb, c] = np.tensordot(window, dy, axes=([0, 1, 2], [0, 1, 2]))
                    dxp[a:a + X - 1:2, bb:bb + Y - 1:2, c:c + Z - 1:2] += dy @ W64[a, bb, c].T
    db = dy.sum(axis=(0, 1, 2))
    return dW, db, dxp[1:-1, 1:-1, 1:-1]


def conv3d_transpose2(x, W, b):
    """Stride-2 transposed convolution with a 2x2x2 kernel (forward only).

    out[2i+a, 2j+b, 2k+c] = x[i, j, k] @ W[a, b, c]; doubles the grid.
    """
    X, Y, Z, _ = x.shape
    cout = W.shape[4]
    out = np.empty((2 * X, 2 * Y, 2 * Z, cout))
    for a in range(2):
        for bb in range(2):
            for c in range(2):
                out[a::2, bb::2, c::2] = x @ np.float64(W[a, bb, c])
    return out + np.float64(b)


# -- transformer pieces (forward only) -------------------------------------------

def softmax(x, axis: int = -1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * np.float64(gamma) + np.float64(beta)


def multi_head_attention(x, Wq, Wk, Wv, Wo, n_heads: int):
    """Standard scaled dot-product attention over a token sequence.

    x (T, d) -> (output (T, d), attention (heads, T, T)); attention rows
    sum to 1.
    """
    T, d = x.shape
    if d % n_heads:
        raise ValueError("embedding width must divide evenly into heads")
    dh = d // n_heads
    q = (x @ np.float64(Wq)).reshape(T, n_heads, dh).transpose(1, 0, 2)
    k = (x @ np.float64(Wk)).reshape(T, n_heads, dh).transpose(1, 0, 2)
    v = (x @ np.float64(Wv)).reshape(T, n_heads, dh).transpose(1, 0, 2)
    attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
    mixed = (attn @ v).transpose(1, 0, 2).reshape(T, d)
    return mixed @ np.float64(Wo), attn


def sinusoidal_encoding(n_tokens: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional encoding over the flattened token index."""
    pos = np.arange(n_tokens, dtype=float)[:, None]
    i = np.arange(d // 2, dtype=float)[None, :]
    angles = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n_tokens, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
