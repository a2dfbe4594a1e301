"""Gaussian quadrature for the 2-D random-effects integral.

One-dimensional nodes and weights for a standard normal variable come
from a Golub-Welsch eigen-decomposition of the Jacobi matrix of the
probabilists' Hermite polynomials.  The 2-D rule maps pairs of standard
normal nodes through the upper-triangular Cholesky factor R of the
random-effects covariance (D = R'R), so node (k, s) becomes the row
vector (Ztilde_k, Ztilde_s) R with weight w_k * w_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .model import ModelError


@dataclass(frozen=True)
class QuadratureRule:
    """Immutable 2-D quadrature rule tied to one covariance matrix D."""

    nodes1d: np.ndarray      # (K,) standard-normal nodes
    weights1d: np.ndarray    # (K,) weights summing to 1
    nodes2d: np.ndarray      # (K*K, 2) random-effect pairs (b_Y, b_T)
    weights2d: np.ndarray    # (K*K,) product weights
    cholesky_R: np.ndarray   # upper-triangular 2x2 with D = R'R

    @property
    def K(self) -> int:
        return len(self.nodes1d)

    @property
    def log_weights2d(self) -> np.ndarray:
        return np.log(self.weights2d)


def gh_nodes(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating polynomials of degree <= 2K-1 exactly
    against the standard normal density.
    """
    if K < 1:
        raise ModelError(f"quadrature order must be >= 1, got {K}")
    if K == 1:
        return np.zeros(1), np.ones(1)
    # Jacobi matrix of the probabilists' Hermite recursion: zero diagonal,
    # off-diagonal sqrt(1..K-1).  Eigenvalues are the nodes; weights are the
    # squared first components of the normalized eigenvectors.
    off = np.sqrt(np.arange(1, K, dtype=float))
    nodes, vecs = eigh_tridiagonal(np.zeros(K), off)
    weights = vecs[0, :] ** 2
    # The exact rule is symmetric about zero; enforce it so downstream
    # computations see bitwise-symmetric nodes.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    if np.max(np.abs(nodes + nodes[::-1])) > 1e-14:
        raise ModelError("quadrature nodes failed the symmetry tolerance")
    return nodes, weights


def chol_upper(D: np.ndarray) -> np.ndarray:
    """Upper-triangular R with D = R'R (transpose of the lower factor)."""
    D = np.asarray(D, dtype=float)
    if D.shape != (2, 2) or abs(D[0, 1] - D[1, 0]) > 1e-12 * max(1.0, abs(D[0, 1])):
        raise ModelError("D must be a symmetric 2x2 matrix")
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"D is not positive definite: {D.tolist()}") from exc
    return L.T


def build_rule(D: np.ndarray, K: int) -> QuadratureRule:
    """2-D rule whose weighted node outer products reproduce D."""
    R = chol_upper(D)
    z, w = gh_nodes(K)
    zk = np.repeat(z, K)   # varies slowly: first Cholesky coordinate
    zs = np.tile(z, K)     # varies fast: second coordinate
    nodes2d = np.column_stack(
        [
            R[0, 0] * zk + R[1, 0] * zs,  # R[1,0] is 0 by construction
            R[0, 1] * zk + R[1, 1] * zs,
        ]
    )
    weights2d = np.repeat(w, K) * np.tile(w, K)
    return QuadratureRule(
        nodes1d=z,
        weights1d=w,
        nodes2d=nodes2d,
        weights2d=weights2d,
        cholesky_R=R,
    )
