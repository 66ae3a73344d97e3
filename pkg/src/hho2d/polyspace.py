"""Scaled polynomial bases, polygon/segment quadrature, and L2 projections.

Cell bases are monomials in the translated and scaled coordinates
``(x - x_T) / h_T``; face bases are 1D monomials in the arclength coordinate
centered at the face midpoint and scaled by the face length.  Either basis can
be L2-orthonormalized on its support (Cholesky of the mass matrix), which keeps
local solves well conditioned at high degree.

Quadrature on polygons is a composite rule over the fan sub-triangulation; on
each triangle a collapsed Gauss-Legendre x Gauss-Jacobi rule exact to the
requested degree is used, so arbitrary (bounded) degrees are supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import roots_jacobi

from hho2d.mesh import Element, Face

MAX_QUAD_DEGREE = 60

# engineering representation of symmetric 2x2 tensors:
#   (t11, t22, sqrt(2) t12), so that s : t is the Euclidean dot product
SQRT2 = np.sqrt(2.0)


class QuadratureError(Exception):
    pass


@dataclass
class QuadratureRule:
    points: np.ndarray      # (n, 2) physical coordinates
    weights: np.ndarray     # (n,)
    degree: int             # declared exactness

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def reference_segment_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [-1, 1], exact to `degree`."""
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise QuadratureError(f"quadrature degree {degree} outside implemented table")
    n = degree // 2 + 1
    x, w = leggauss(n)
    return x, w


@lru_cache(maxsize=None)
def reference_triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed rule on the unit triangle {(0,0), (1,0), (0,1)}, exact to `degree`.

    Tensorizes Gauss-Jacobi (weight 1-u) in the collapsed direction with
    Gauss-Legendre, via x = u, y = v (1 - u).
    """
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise QuadratureError(f"quadrature degree {degree} outside implemented table")
    n = degree // 2 + 1
    xj, wj = roots_jacobi(n, 1.0, 0.0)     # weight (1 - x) on [-1, 1]
    u = 0.5 * (xj + 1.0)
    wu = 0.25 * wj
    xl, wl = leggauss(n)
    v = 0.5 * (xl + 1.0)
    wv = 0.5 * wl
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    return pts, W.ravel()


def quadrature_on_element(element: Element, degree: int) -> QuadratureRule:
    """Composite rule over the element's fan sub-triangulation."""
    ref_pts, ref_w = reference_triangle_rule(degree)
    tris = element.sub_triangles
    a = tris[:, 0]
    e1 = tris[:, 1] - a
    e2 = tris[:, 2] - a
    jac = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]   # 2 * area, positive
    pts = a[:, None, :] + ref_pts[None, :, 0, None] * e1[:, None, :] + ref_pts[None, :, 1, None] * e2[:, None, :]
    wts = ref_w[None, :] * jac[:, None]
    return QuadratureRule(points=pts.reshape(-1, 2), weights=wts.ravel(), degree=degree)


def quadrature_on_face(face: Face, degree: int) -> QuadratureRule:
    """Gauss rule on the face segment, exact to `degree`; weights sum to h_F."""
    x, w = reference_segment_rule(degree)
    p0, p1 = face.endpoints
    mid, half = 0.5 * (p0 + p1), 0.5 * (p1 - p0)
    pts = mid[None, :] + x[:, None] * half[None, :]
    return QuadratureRule(points=pts, weights=w * face.length / 2.0, degree=degree)


@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> np.ndarray:
    """Graded-lexicographic 2D exponents; prefix of length (l+1)(l+2)/2 spans P^l."""
    out = [(d - j, j) for d in range(degree + 1) for j in range(d + 1)]
    return np.array(out, dtype=np.int64)


def space_dimension(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


class CellBasis:
    """Scalar polynomial basis of total degree `degree` on one element.

    With ``orthonormalize=True`` the scaled monomials are replaced by their
    L2-orthonormal combinations; because the monomials are graded, the first
    (l+1)(l+2)/2 functions still span P^l for every l <= degree.
    """

    def __init__(self, element: Element, degree: int, orthonormalize: bool = False,
                 quad_degree: int | None = None):
        if degree < 0:
            raise ValueError("degree must be >= 0")
        self.element = element
        self.degree = degree
        self.exponents = monomial_exponents(degree)
        self.dim = len(self.exponents)
        self.center = element.barycenter
        self.scale = element.diameter
        self.transform: np.ndarray | None = None
        if orthonormalize:
            rule = quadrature_on_element(element, quad_degree or 2 * degree)
            raw = self._eval_raw(rule.points)
            mass = (raw * rule.weights[:, None]).T @ raw
            lower = cholesky(mass, lower=True)
            # rows of inv(L) recombine the monomials; evaluation uses L^{-T}
            self.transform = solve_triangular(lower, np.eye(self.dim), lower=True).T

    def _eval_raw(self, points: np.ndarray) -> np.ndarray:
        xi = (points - self.center) / self.scale
        return xi[:, 0, None] ** self.exponents[:, 0] * xi[:, 1, None] ** self.exponents[:, 1]

    def eval(self, points: np.ndarray) -> np.ndarray:
        """(n_points, dim) array of basis values."""
        vals = self._eval_raw(np.atleast_2d(points))
        return vals @ self.transform if self.transform is not None else vals

    def grad(self, points: np.ndarray) -> np.ndarray:
        """(n_points, dim, 2) array of basis gradients."""
        points = np.atleast_2d(points)
        xi = (points - self.center) / self.scale
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        pow_a = xi[:, 0, None] ** np.maximum(a - 1, 0)
        pow_b = xi[:, 1, None] ** np.maximum(b - 1, 0)
        full_a = xi[:, 0, None] ** a
        full_b = xi[:, 1, None] ** b
        gx = a * pow_a * full_b / self.scale
        gy = b * full_a * pow_b / self.scale
        g = np.stack([gx, gy], axis=-1)
        if self.transform is not None:
            g = np.einsum("pid,ij->pjd", g, self.transform)
        return g


class FaceBasis:
    """1D polynomial basis on a face, in the scaled arclength coordinate."""

    def __init__(self, face: Face, degree: int, orthonormalize: bool = False):
        if degree < 0:
            raise ValueError("degree must be >= 0")
        self.face = face
        self.degree = degree
        self.dim = degree + 1
        self.transform: np.ndarray | None = None
        if orthonormalize:
            rule = quadrature_on_face(face, 2 * degree)
            raw = self._eval_raw(rule.points)
            mass = (raw * rule.weights[:, None]).T @ raw
            lower = cholesky(mass, lower=True)
            self.transform = solve_triangular(lower, np.eye(self.dim), lower=True).T

    def _eval_raw(self, points: np.ndarray) -> np.ndarray:
        s = (np.atleast_2d(points) - self.face.midpoint) @ self.face.tangent / self.face.length
        return s[:, None] ** np.arange(self.dim)

    def eval(self, points: np.ndarray) -> np.ndarray:
        vals = self._eval_raw(points)
        return vals @ self.transform if self.transform is not None else vals


class ProjectionError(Exception):
    pass


def _project(eval_basis, rule: QuadratureRule, f) -> np.ndarray:
    phi = eval_basis(rule.points)
    mass = (phi * rule.weights[:, None]).T @ phi
    fv = np.asarray(f(rule.points), dtype=np.float64)
    try:
        factor = cho_factor(mass)
    except np.linalg.LinAlgError as exc:
        raise ProjectionError(f"singular local mass matrix: {exc}") from exc
    if fv.ndim == 1:
        rhs = phi.T @ (rule.weights * fv)
        return cho_solve(factor, rhs)
    rhs = phi.T @ (rule.weights[:, None] * fv)
    return cho_solve(factor, rhs).T    # (n_components, dim)


def l2_project_cell(f, element: Element, degree: int, quad_degree: int | None = None,
                    basis: CellBasis | None = None) -> np.ndarray:
    """Coefficients of the L2 projection of `f` onto P^degree on the element.

    `f` maps an (n, 2) array of points to scalar (n,) or vector (n, 2) values;
    the result is (dim,) or (2, dim) accordingly.
    """
    basis = basis or CellBasis(element, degree)
    rule = quadrature_on_element(element, quad_degree or 2 * degree + 2)
    return _project(basis.eval, rule, f)


def l2_project_face(f, face: Face, degree: int, quad_degree: int | None = None,
                    basis: FaceBasis | None = None) -> np.ndarray:
    """Face analogue of `l2_project_cell`."""
    basis = basis or FaceBasis(face, degree)
    rule = quadrature_on_face(face, quad_degree or 2 * degree + 2)
    return _project(basis.eval, rule, f)


def eng_sym_grad(grad: np.ndarray) -> np.ndarray:
    """Symmetric gradients of the two vector extensions of scalar basis functions.

    Input: (n_pts, dim, 2) scalar gradients.  Output: (n_pts, 3, 2 * dim) in
    engineering components, columns ordered x-components then y-components.
    """
    n, dim, _ = grad.shape
    out = np.zeros((n, 3, 2 * dim))
    out[:, 0, :dim] = grad[:, :, 0]
    out[:, 2, :dim] = grad[:, :, 1] / SQRT2
    out[:, 1, dim:] = grad[:, :, 1]
    out[:, 2, dim:] = grad[:, :, 0] / SQRT2
    return out


def local_matrices(element: Element, basis_a, basis_b, kind: str = "mass",
                   face: Face | None = None, quad_degree: int | None = None) -> np.ndarray:
    """Pairwise quadrature integrals of two bases.

    kind:
      * ``mass``               -- cell integral of products
      * ``trace_mass``         -- face integral of products (pass `face`)
      * ``sym_grad_stiffness`` -- cell integral of sym-grad contractions of the
        vector extensions (matrix over 2*dim pairs; CellBasis inputs only)
    """
    deg = quad_degree or basis_a.degree + basis_b.degree + 2
    if kind == "mass":
        rule = quadrature_on_element(element, deg)
        pa, pb = basis_a.eval(rule.points), basis_b.eval(rule.points)
        return (pa * rule.weights[:, None]).T @ pb
    if kind == "trace_mass":
        if face is None:
            raise ValueError("trace_mass needs a face")
        rule = quadrature_on_face(face, deg)
        pa, pb = basis_a.eval(rule.points), basis_b.eval(rule.points)
        return (pa * rule.weights[:, None]).T @ pb
    if kind == "sym_grad_stiffness":
        rule = quadrature_on_element(element, deg)
        sa = eng_sym_grad(basis_a.grad(rule.points))
        sb = eng_sym_grad(basis_b.grad(rule.points))
        return np.einsum("pci,pcj,p->ij", sa, sb, rule.weights)
    raise ValueError(f"unknown matrix kind {kind!r}")
