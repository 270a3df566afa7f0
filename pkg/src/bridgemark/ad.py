"""Forward-mode derivative propagation on numpy arrays.

A :class:`Jet` carries a value array together with directional derivatives
along ``m`` seed directions, stored with the seed axis leading
(``tan.shape == (m,) + val.shape``).  All helpers in this module accept
either plain ndarrays or Jets and dispatch accordingly, so numerical code
written against them runs unchanged with or without derivative tracking.

Forward mode is used throughout: the simulated diffusion paths depend on a
moderate number of inputs (the initial momenta or positions, dimension d*n)
and every downstream quantity is propagated jointly along all seed
directions in one pass.  The value lane of every operation is computed by
the same numpy call as the plain-array path, so a Jet run reproduces the
undifferentiated values bitwise.
"""

from __future__ import annotations

import numpy as np


class Jet:
    """Array value plus tangents along m seed directions (leading axis)."""

    __slots__ = ("val", "tan")

    # Make numpy defer binary ops to the reflected operators below instead
    # of absorbing Jets into object arrays.
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    @property
    def nseeds(self):
        return self.tan.shape[0]

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val + other.val, self.tan + other.tan)
        return Jet(self.val + other, self.tan)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val - other.val, self.tan - other.tan)
        return Jet(self.val - other, self.tan)

    def __rsub__(self, other):
        return Jet(other - self.val, -self.tan)

    def __neg__(self):
        return Jet(-self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val * other.val,
                       self.tan * other.val + self.val * other.tan)
        return Jet(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            inv = 1.0 / other.val
            v = self.val * inv
            return Jet(v, (self.tan - v * other.tan) * inv)
        return Jet(self.val / other, self.tan / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        v = other * inv
        return Jet(v, -v * inv * self.tan)

    # -- shape access ---------------------------------------------------

    def __getitem__(self, idx):
        # Indices must lead with Ellipsis so the seed axis is untouched.
        if not isinstance(idx, tuple):
            idx = (idx,)
        if idx[0] is not Ellipsis:
            raise IndexError("Jet indexing must start with '...'")
        return Jet(self.val[idx], self.tan[idx])

    @property
    def shape(self):
        return self.val.shape

    def reshape_last(self, *shape):
        """Reshape trailing axes, keeping the seed axis in place."""
        lead = self.tan.shape[:1]
        return Jet(self.val.reshape(*shape),
                   self.tan.reshape(*(lead + tuple(shape))))

    def copy(self):
        return Jet(self.val.copy(), self.tan.copy())


def seed(val, basis=None):
    """Lift ``val`` to a Jet with identity tangents (one seed per entry)."""
    val = np.asarray(val, dtype=float)
    m = val.size if basis is None else basis.shape[0]
    tan = np.eye(m).reshape((m,) + val.shape) if basis is None else basis
    return Jet(val, tan)


def const(val, m):
    """Lift ``val`` to a Jet with zero tangents along m seeds."""
    val = np.asarray(val, dtype=float)
    return Jet(val, np.zeros((m,) + val.shape))


def value(x):
    return x.val if isinstance(x, Jet) else x


def tangent(x):
    return x.tan if isinstance(x, Jet) else None


# -- elementwise ---------------------------------------------------------

def exp(x):
    if isinstance(x, Jet):
        v = np.exp(x.val)
        return Jet(v, v * x.tan)
    return np.exp(x)


def asum(x, axis):
    """Sum over trailing axes (axis must be negative)."""
    if isinstance(x, Jet):
        return Jet(np.sum(x.val, axis=axis), np.sum(x.tan, axis=axis))
    return np.sum(x, axis=axis)


# -- linear algebra -------------------------------------------------------

def matvec(a, x):
    """Constant matrix times (batched or Jet) vector along the last axis."""
    if isinstance(x, Jet):
        if x.val.ndim == 1:
            return Jet(a @ x.val, x.tan @ a.T)
        return Jet(np.einsum('ij,...j->...i', a, x.val),
                   np.einsum('ij,...j->...i', a, x.tan))
    if x.ndim == 1:
        return a @ x
    return np.einsum('ij,...j->...i', a, x)


def matmul(a, b):
    """Batched matrix product; either operand may be a Jet."""
    aj, bj = isinstance(a, Jet), isinstance(b, Jet)
    if aj and bj:
        return Jet(np.matmul(a.val, b.val),
                   np.matmul(a.tan, b.val) + np.matmul(a.val, b.tan))
    if aj:
        return Jet(np.matmul(a.val, b), np.matmul(a.tan, b))
    if bj:
        return Jet(np.matmul(a, b.val), np.matmul(a, b.tan))
    return np.matmul(a, b)


def vdot(x, y):
    """Contraction over the last axis, batched over the rest."""
    xj, yj = isinstance(x, Jet), isinstance(y, Jet)
    if not xj and not yj:
        if x.ndim == 1 and y.ndim == 1:
            return np.dot(x, y)
        return np.einsum('...i,...i->...', x, y)
    xv, yv = value(x), value(y)
    if xv.ndim == 1 and yv.ndim == 1:
        v = np.dot(xv, yv)
        tan = 0.0
        if xj:
            tan = tan + x.tan @ yv
        if yj:
            tan = tan + y.tan @ xv
        return Jet(v, tan)
    v = np.einsum('...i,...i->...', xv, yv)
    tan = 0.0
    if xj:
        tan = tan + np.einsum('...i,...i->...', x.tan, yv)
    if yj:
        tan = tan + np.einsum('...i,...i->...', xv, y.tan)
    return Jet(v, tan)


def transpose_last2(x):
    if isinstance(x, Jet):
        return Jet(np.swapaxes(x.val, -1, -2), np.swapaxes(x.tan, -1, -2))
    return np.swapaxes(x, -1, -2)


def concat(parts, axis=-1):
    """Concatenate along a trailing (negative) axis, promoting to Jet."""
    if axis >= 0:
        raise ValueError("concat axis must be negative (trailing)")
    jets = [p for p in parts if isinstance(p, Jet)]
    if not jets:
        return np.concatenate(parts, axis=axis)
    m = jets[0].nseeds
    parts = [p if isinstance(p, Jet) else const(p, m) for p in parts]
    return Jet(np.concatenate([p.val for p in parts], axis=axis),
               np.concatenate([p.tan for p in parts], axis=axis))


def reshape_trailing(x, k, shape):
    """Replace the last k axes with the given shape."""
    if isinstance(x, Jet):
        return Jet(x.val.reshape(x.val.shape[:-k] + shape),
                   x.tan.reshape(x.tan.shape[:-k] + shape))
    return x.reshape(x.shape[:-k] + shape)


def _mv(a, x):
    if a.ndim == 2:
        if x.ndim == 1:
            return a @ x
        # batched/tangent vectors against a fixed matrix: BLAS-friendly
        return x @ a.T
    return np.einsum('...ij,...j->...i', a, x)


def bmatvec(a, x):
    """result[..., i] = sum_j a[..., i, j] x[..., j]; either side may be a Jet."""
    aj, xj = isinstance(a, Jet), isinstance(x, Jet)
    if not aj and not xj:
        return _mv(a, x)
    av, xv = value(a), value(x)
    v = _mv(av, xv)
    tan = 0.0
    if aj:
        tan = tan + _mv(a.tan, xv)
    if xj:
        tan = tan + _mv(av, x.tan)
    return Jet(v, tan)


def where_finite(x):
    """True when every value entry is finite (tangents not inspected)."""
    return bool(np.all(np.isfinite(value(x))))
