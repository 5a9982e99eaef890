"""Centered post-period thin-plate spline basis with block penalties.

The post-period effect is ``alpha_0 + B @ alpha_1:H``.  The constant
direction lives in ``alpha_0``; ``B`` holds the cubic radial (range
space) columns followed by one linear (null space) column.  With ``k``
knots the basis has ``k - 1`` columns: ``k - 2`` radial ones plus the
linear one, so ``k = 1`` is the level-shift-only mode and ``k = 2`` is a
pure linear trend on top of the shift.

Radial coefficients are expressed in an orthonormal basis of the
thin-plate side constraint ``sum(d) = sum(d * knot) = 0``, rotated to
diagonalise the radial Gram matrix, so the range penalty ``P1`` is the
Gram matrix seen through that reparametrisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BasisError(ValueError):
    pass


def knot_count(n_post: int) -> int:
    """Default number of knots: half the post-period points, rounded up."""
    if n_post < 2:
        raise BasisError("at least two post-period points are needed for a spline")
    return math.ceil(n_post / 2)


def radial(r: np.ndarray) -> np.ndarray:
    """1-D cubic thin-plate radial function."""
    return np.abs(r) ** 3


@dataclass(frozen=True)
class SplineBasis:
    post_times: np.ndarray  # integer times T_int..T-1
    times: np.ndarray  # post times mapped to [0, 1]
    knots: np.ndarray
    B: np.ndarray  # (n_post, H)
    P1: np.ndarray  # (H_r, H_r)
    P2: np.ndarray  # (1, 1) or (0, 0)
    Z: np.ndarray  # (n_knots, H_r) constraint null-space coordinates
    ridge: float

    @property
    def n_post(self) -> int:
        return int(self.post_times.size)

    @property
    def H(self) -> int:
        return int(self.B.shape[1])

    @property
    def H_r(self) -> int:
        return int(self.P1.shape[0])

    @property
    def has_linear(self) -> bool:
        return self.P2.shape[0] == 1

    @property
    def T_int(self) -> int:
        return int(self.post_times[0])

    @property
    def n_times(self) -> int:
        return int(self.post_times[-1]) + 1

    @property
    def penalty_blocks(self) -> list[tuple[int, slice, np.ndarray]]:
        """(block id m, column slice into B, penalty) for present blocks.

        ``m = 1`` is the range space, ``m = 2`` the linear null space.
        """
        out = []
        if self.H_r:
            out.append((1, slice(0, self.H_r), self.P1))
        if self.has_linear:
            out.append((2, slice(self.H_r, self.H_r + 1), self.P2))
        return out

    def effect_matrix(self) -> np.ndarray:
        """``(T, H + 1)`` rows of :func:`effect_row` for every time."""
        E = np.zeros((self.n_times, self.H + 1))
        E[self.T_int:, 0] = 1.0
        E[self.T_int:, 1:] = self.B
        return E

    def range_gram(self) -> np.ndarray:
        """Unridged radial penalty in range-block coordinates."""
        return self.P1 - self.ridge * np.eye(self.H_r)

    def radial_coefficients(self, v: np.ndarray) -> np.ndarray:
        """Map range-block coefficients to per-knot radial weights."""
        return self.Z @ np.asarray(v, dtype=float)


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    # deterministic eigenvector signs: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def build_basis(post_times, n_knots: int | None = None) -> SplineBasis:
    """Construct the basis over ``post_times`` (strictly increasing ints)."""
    post = np.asarray(post_times)
    if post.ndim != 1 or post.size < 1:
        raise BasisError("post_times must be a non-empty 1-D sequence")
    if not np.all(np.equal(np.mod(post, 1), 0)):
        raise BasisError("post_times must be integers")
    post = post.astype(int)
    if np.any(np.diff(post) <= 0):
        raise BasisError("post_times must be strictly increasing")
    n_post = post.size
    if n_knots is None:
        n_knots = knot_count(n_post)
    if n_knots < 0:
        raise BasisError("n_knots must be nonnegative")
    if n_knots > n_post:
        raise BasisError(f"{n_knots} knots need at least as many distinct post times, got {n_post}")

    span = post[-1] - post[0]
    x = (post - post[0]) / span if span > 0 else np.zeros(n_post)

    if n_knots <= 1:
        # level shift only
        return SplineBasis(
            post_times=post,
            times=x,
            knots=np.quantile(x, [0.5]) if n_knots == 1 else np.zeros(0),
            B=np.zeros((n_post, 0)),
            P1=np.zeros((0, 0)),
            P2=np.zeros((0, 0)),
            Z=np.zeros((n_knots, 0)),
            ridge=0.0,
        )

    knots = np.quantile(x, np.linspace(0.0, 1.0, n_knots))
    if np.any(np.diff(knots) <= 0):
        raise BasisError("duplicate knots: too few distinct post times")

    # coefficient side constraint T' d = 0 with T = [1, knot]
    Tk = np.column_stack([np.ones(n_knots), knots])
    Q, _ = np.linalg.qr(Tk, mode="complete")
    Z = Q[:, 2:]
    E = radial(knots[:, None] - knots[None, :])
    gram = Z.T @ E @ Z
    gram = 0.5 * (gram + gram.T)
    if gram.size:
        evals, evecs = np.linalg.eigh(gram)
        evecs = _sign_fix(evecs)
        Z = Z @ evecs
        gram = Z.T @ E @ Z
        gram = 0.5 * (gram + gram.T)
    H_r = Z.shape[1]

    poly = np.column_stack([np.ones(n_post), x - x.mean()])
    R = radial(x[:, None] - knots[None, :]) @ Z
    # project range columns orthogonal to {1, t} over the post points
    R = R - poly @ np.linalg.lstsq(poly, R, rcond=None)[0]
    linear = (x - x.mean())[:, None]
    B = np.hstack([R, linear])
    B = B - B.mean(axis=0)

    ridge = 1e-8 * np.trace(gram) / H_r if H_r else 0.0
    P1 = gram + ridge * np.eye(H_r)
    return SplineBasis(
        post_times=post,
        times=x,
        knots=knots,
        B=B,
        P1=P1,
        P2=np.ones((1, 1)),
        Z=Z,
        ridge=float(ridge),
    )


def effect_row(basis: SplineBasis, t: int) -> np.ndarray:
    """Design row ``(D_t, D_t * B[t])`` for the level shift and loadings."""
    if not 0 <= t < basis.n_times:
        raise BasisError(f"time {t} outside 0..{basis.n_times - 1}")
    row = np.zeros(basis.H + 1)
    if t >= basis.T_int:
        row[0] = 1.0
        row[1:] = basis.B[t - basis.T_int]
    return row


def basis_for_panel(n_times: int, T_int: int, knots: int | None = None) -> SplineBasis:
    """Basis spanning ``T_int..n_times-1`` with the default knot rule."""
    post = np.arange(T_int, n_times)
    if knots is None:
        knots = knot_count(post.size)
    return build_basis(post, knots)
