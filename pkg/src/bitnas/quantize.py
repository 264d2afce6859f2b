"""k-bit quantization for weights and activations with straight-through gradients.

Weights follow the DoReFa recipe: squash with tanh, normalize by the detached
maximum into [0, 1], snap to the uniform k-bit grid, then map back to the
signed range.  NOTE: the source formula as printed omits the trailing "-1"
and would yield values in [0, 2]; the signed form 2*Q_k(t) - 1 is implemented
so convolution weights can be negative.

Activations follow PACT: clip to [0, alpha] with a learnable upper bound
alpha, quantize the normalized value, and rescale.  The alpha gradient uses
the standard PACT straight-through rule (1 where x >= alpha, else 0).
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor, custom_gradient

VALID_BITS = (1, 2, 3, 4, 8, 32)
FULL_PRECISION = 32
ALPHA_FLOOR = 1e-3
ALPHA_INIT = 8.0

__all__ = [
    "VALID_BITS", "FULL_PRECISION", "ALPHA_FLOOR", "ALPHA_INIT",
    "grid_snap", "quantize_grid", "dorefa_quantize", "pact_activation",
    "WeightQuantizer", "ActivationQuantizer",
]


def _check_bits(k: int, allow_full: bool = True):
    valid = VALID_BITS if allow_full else VALID_BITS[:-1]
    if k not in valid:
        raise ValueError(f"unsupported bit-width {k}; expected one of {valid}")


def grid_snap(x: np.ndarray, k: int) -> np.ndarray:
    """Snap values to the k-bit grid {i / (2^k - 1)}, numpy level.

    Inputs are clamped to [0, 1] first; exact midpoints round up.
    """
    _check_bits(k)
    if k == FULL_PRECISION:
        return np.asarray(x)
    n = float(2 ** k - 1)
    xc = np.clip(x, 0.0, 1.0)
    return np.floor(xc * n + 0.5) / np.asarray(n, dtype=np.asarray(x).dtype)


def quantize_grid(x: Tensor, k: int) -> Tensor:
    """Tape op: grid_snap forward, straight-through (identity) backward."""
    _check_bits(k)
    return custom_gradient(lambda a: grid_snap(a, k), lambda g, a: (g,))(x)


def dorefa_quantize(w: Tensor, k: int) -> Tensor:
    """Signed k-bit weight quantization, output in [-1, 1].

    k=32 is a passthrough.  An all-zero tensor maps to all zeros rather than
    dividing by max|tanh| = 0.
    """
    _check_bits(k)
    if k == FULL_PRECISION:
        return w
    m = float(np.max(np.abs(np.tanh(w.data))))
    if m == 0.0:
        return w * 0.0
    # max detached: m enters as a constant scale
    t = w.tanh() * (0.5 / m) + 0.5
    return quantize_grid(t, k) * 2.0 - 1.0


def pact_activation(x: Tensor, alpha: Tensor, k: int) -> Tensor:
    """Clip to [0, alpha], quantize to k bits, rescale by alpha.

    Non-positive alpha is clamped to ALPHA_FLOOR before use.  Backward:
    dx = g on the open interval (0, alpha), zero outside; dalpha = sum of g
    where x >= alpha.  For k=32 (no quantization) both rules are the exact
    gradients of the clipping function.
    """
    _check_bits(k)

    def forward(xd, ad):
        a = max(float(ad), ALPHA_FLOOR)
        y = np.clip(xd, 0.0, a)
        if k == FULL_PRECISION:
            return y
        return (grid_snap(y / a, k) * a).astype(xd.dtype)

    def backward(g, xd, ad):
        a = max(float(ad), ALPHA_FLOOR)
        dx = g * ((xd > 0) & (xd < a))
        dalpha = np.asarray((g * (xd >= a)).sum(), dtype=np.asarray(ad).dtype)
        return dx, dalpha.reshape(np.shape(ad))

    return custom_gradient(forward, backward)(x, alpha)


class WeightQuantizer:
    """Per-forward weight quantization at a fixed bit-width."""

    def __init__(self, k: int):
        _check_bits(k)
        self.k = k

    def __call__(self, w: Tensor) -> Tensor:
        return dorefa_quantize(w, self.k)

    def __repr__(self):
        return f"WeightQuantizer(k={self.k})"


class ActivationQuantizer:
    """PACT activation quantization with its own learnable clipping bound."""

    def __init__(self, k: int, alpha_init: float = ALPHA_INIT, dtype=np.float32):
        _check_bits(k)
        self.k = k
        self.alpha = Tensor(np.asarray(alpha_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return pact_activation(x, self.alpha, self.k)

    def __repr__(self):
        return f"ActivationQuantizer(k={self.k}, alpha={float(self.alpha.data):.4g})"
