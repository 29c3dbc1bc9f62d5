"""Signed distance function families used by inner tree nodes.

Every function exists twice: ``eval_sdf`` builds the expression on a
:class:`~segforest.grad_core.Tape` for a single point, and ``sdf_value_grad``
evaluates a batch of parameter vectors at many points with numpy and returns
the Jacobian with respect to the parameters.

Points are in block-normalized coordinates: pixel ``(x, y)`` of an ``S x S``
block sits at ``((2x+1)/S - 1, (2y+1)/S - 1)``.
"""
from __future__ import annotations

import enum
from collections.abc import Sequence

import numpy as np

from segforest.grad_core import DiffValue, max2, sigmoid, sqrt, square


class SdfKind(enum.Enum):
    LINE = "L"
    SQUARE = "S"
    CIRCLE = "C"
    ELLIPSE = "E"
    HYPERBOLA = "H"
    PARABOLA = "P"
    KD_X = "X"
    KD_Y = "Y"
    DYN_KD = "D"

    @property
    def code(self) -> str:
        return self.value

    @property
    def parameter_count(self) -> int:
        return _PARAM_COUNT[self]

    @classmethod
    def from_code(cls, code: str) -> SdfKind:
        try:
            return cls(code)
        except ValueError:
            raise ValueError(f"unknown SDF code {code!r}") from None


_PARAM_COUNT = {
    SdfKind.LINE: 3, SdfKind.SQUARE: 3, SdfKind.CIRCLE: 3,
    SdfKind.ELLIPSE: 5, SdfKind.HYPERBOLA: 5, SdfKind.PARABOLA: 5,
    SdfKind.KD_X: 1, SdfKind.KD_Y: 1, SdfKind.DYN_KD: 3,
}

# Names accepted by the tree DSL.
NAMES = {
    "line": SdfKind.LINE, "square": SdfKind.SQUARE, "circle": SdfKind.CIRCLE,
    "ellipse": SdfKind.ELLIPSE, "hyperbola": SdfKind.HYPERBOLA,
    "parabola": SdfKind.PARABOLA,
}


def parameter_count(kind: SdfKind) -> int:
    return kind.parameter_count


def _norm(a1, a2):
    return sqrt(square(a1) + square(a2))


def eval_sdf(kind: SdfKind, params: Sequence[DiffValue], p: tuple[float, float]) -> DiffValue:
    """Signed distance of point ``p`` for one node, on the tape of ``params``.

    Parameter order per kind:
    line ``(n1, n2, d)``; square and circle ``(x1, x2, s|r)``;
    ellipse and hyperbola ``(x1, x2, y1, y2, c)``; parabola ``(x1, x2, n1, n2, d)``;
    k-d ``(t,)``; dynamic k-d ``(g1, g2, t)``.
    """
    if len(params) != kind.parameter_count:
        raise ValueError(f"{kind.name} takes {kind.parameter_count} parameters, "
                         f"got {len(params)}")
    p1, p2 = float(p[0]), float(p[1])

    if kind is SdfKind.LINE:
        n1, n2, d = params
        return n1 * p1 + n2 * p2 - d
    if kind is SdfKind.SQUARE:
        x1, x2, s = params
        return max2(abs(x1 - p1), abs(x2 - p2)) - s
    if kind is SdfKind.CIRCLE:
        x1, x2, r = params
        return square(x1 - p1) + square(x2 - p2) - r
    if kind is SdfKind.ELLIPSE:
        x1, x2, y1, y2, c = params
        return _norm(x1 - p1, x2 - p2) + _norm(y1 - p1, y2 - p2) - c
    if kind is SdfKind.HYPERBOLA:
        x1, x2, y1, y2, c = params
        return abs(_norm(x1 - p1, x2 - p2) - _norm(y1 - p1, y2 - p2)) - c
    if kind is SdfKind.PARABOLA:
        x1, x2, n1, n2, d = params
        return _norm(x1 - p1, x2 - p2) - (n1 * p1 + n2 * p2 - d)
    if kind is SdfKind.KD_X:
        (t,) = params
        return t - p1
    if kind is SdfKind.KD_Y:
        (t,) = params
        return t - p2
    g1, g2, t = params
    a1 = sigmoid(g1 - g2)
    a2 = sigmoid(g2 - g1)
    return t - (a1 * p1 + a2 * p2)


def _sgn(x):
    return np.sign(x)


def expit(x):
    """Logistic sigmoid, overflow-free for either sign of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _norm_grad(dx, dy):
    r = np.sqrt(dx * dx + dy * dy)
    safe = np.where(r > 0, r, 1.0)
    return r, np.where(r > 0, dx / safe, 0.0), np.where(r > 0, dy / safe, 0.0)


def sdf_value_grad(kind: SdfKind, params: np.ndarray, pts: np.ndarray):
    """Vectorized SDF and its parameter Jacobian.

    ``params`` has shape ``(B, P)`` and ``pts`` shape ``(N, 2)``. Returns
    ``f`` of shape ``(B, N)`` and ``df`` of shape ``(B, N, P)``.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] != kind.parameter_count:
        raise ValueError(f"{kind.name} takes {kind.parameter_count} parameters, "
                         f"got {params.shape[-1]}")
    B = params.shape[0]
    p1 = pts[None, :, 0]
    p2 = pts[None, :, 1]
    col = [params[:, i:i + 1] for i in range(params.shape[1])]
    N = pts.shape[0]
    df = np.zeros((B, N, kind.parameter_count))
    ones = np.ones((B, N))

    if kind is SdfKind.LINE:
        n1, n2, d = col
        f = n1 * p1 + n2 * p2 - d
        df[..., 0] = p1
        df[..., 1] = p2
        df[..., 2] = -1.0
    elif kind is SdfKind.SQUARE:
        x1, x2, s = col
        u, v = x1 - p1, x2 - p2
        a, b = np.abs(u), np.abs(v)
        first = a >= b
        f = np.where(first, a, b) - s
        df[..., 0] = np.where(first, _sgn(u), 0.0)
        df[..., 1] = np.where(first, 0.0, _sgn(v))
        df[..., 2] = -1.0
    elif kind is SdfKind.CIRCLE:
        x1, x2, r = col
        u, v = x1 - p1, x2 - p2
        f = u * u + v * v - r
        df[..., 0] = 2.0 * u
        df[..., 1] = 2.0 * v
        df[..., 2] = -1.0
    elif kind in (SdfKind.ELLIPSE, SdfKind.HYPERBOLA):
        x1, x2, y1, y2, c = col
        d1, g1x, g1y = _norm_grad(x1 - p1, x2 - p2)
        d2, g2x, g2y = _norm_grad(y1 - p1, y2 - p2)
        if kind is SdfKind.ELLIPSE:
            f = d1 + d2 - c
            s1 = s2 = ones
        else:
            diff = d1 - d2
            sg = _sgn(diff)
            f = np.abs(diff) - c
            s1, s2 = sg, -sg
        df[..., 0] = s1 * g1x
        df[..., 1] = s1 * g1y
        df[..., 2] = s2 * g2x
        df[..., 3] = s2 * g2y
        df[..., 4] = -1.0
    elif kind is SdfKind.PARABOLA:
        x1, x2, n1, n2, d = col
        d1, gx, gy = _norm_grad(x1 - p1, x2 - p2)
        f = d1 - (n1 * p1 + n2 * p2 - d)
        df[..., 0] = gx
        df[..., 1] = gy
        df[..., 2] = -p1
        df[..., 3] = -p2
        df[..., 4] = 1.0
    elif kind is SdfKind.KD_X:
        f = col[0] - p1
        df[..., 0] = 1.0
    elif kind is SdfKind.KD_Y:
        f = col[0] - p2
        df[..., 0] = 1.0
    else:
        g1, g2, t = col
        a1 = expit(g1 - g2)
        a2 = expit(g2 - g1)
        f = t - (a1 * p1 + a2 * p2)
        # da1/dg1 = a1(1-a1), da2/dg1 = -a2(1-a2)
        w1 = a1 * (1.0 - a1)
        w2 = a2 * (1.0 - a2)
        df[..., 0] = -(w1 * p1 - w2 * p2)
        df[..., 1] = -(-w1 * p1 + w2 * p2)
        df[..., 2] = 1.0
    return np.broadcast_to(f, (B, N)).copy(), df
