"""Global assembly, static condensation, and the Newton loop.

The discrete problem pairs the material consistency term (stress of the
reconstructed strain against reconstructed test strains) with the face-based
stabilization scaled by gamma.  Dirichlet data is imposed strongly: face DOFs
on Dirichlet faces are set to the face projection of the data and masked out
of the solve.  Neumann tractions enter the load functional on face unknowns.

Each Newton step solves the face-coupled Schur complement obtained by
element-wise elimination of cell unknowns (static condensation); cell
corrections are recovered locally afterwards.  An uncondensed path over all
unknowns exists for verification, and both paths agree to solver precision.

Linear systems: sparse direct factorization below a size threshold (and always
for nonsymmetric tangents); above it, conjugate gradients preconditioned by
smoothed-aggregation AMG with rigid-body near-nullspace, with the hierarchy
reused across Newton iterations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hho2d.materials import MaterialLaw
from hho2d.mesh import Mesh
from hho2d.operators import DofSpace, DofVector

log = logging.getLogger(__name__)


class SolverError(Exception):
    pass


VectorField = Callable[[np.ndarray], np.ndarray]


@dataclass
class BoundaryConditions:
    """Per-tag boundary data: tag -> vector field (m or Pa).

    Every boundary face of the mesh must be covered by exactly one condition.
    """

    dirichlet: dict[str, VectorField] = field(default_factory=dict)
    neumann: dict[str, VectorField] = field(default_factory=dict)

    @staticmethod
    def homogeneous(mesh: Mesh) -> "BoundaryConditions":
        zero = lambda X: np.zeros_like(X)
        return BoundaryConditions(dirichlet={t: zero for t in mesh.boundary_tags})

    def validate(self, mesh: Mesh) -> None:
        tags = mesh.boundary_tags
        both = set(self.dirichlet) & set(self.neumann)
        if both:
            raise SolverError(f"tags with two conditions: {sorted(both)}")
        known = set(self.dirichlet) | set(self.neumann)
        missing = tags - known
        if missing:
            raise SolverError(f"boundary tags without a condition: {sorted(missing)}")
        unknown = known - tags
        if unknown:
            raise SolverError(f"conditions reference unknown tags: {sorted(unknown)}")

    def dirichlet_faces(self, mesh: Mesh) -> list[int]:
        return [f.id for f in mesh.faces if f.kind == "boundary" and f.tag in self.dirichlet]

    def neumann_faces(self, mesh: Mesh) -> list[tuple[int, str]]:
        return [(f.id, f.tag) for f in mesh.faces if f.kind == "boundary" and f.tag in self.neumann]


@dataclass
class NewtonOptions:
    tol: float = 1e-8                 # relative residual
    max_iter: int = 30
    warm_start: str = "linear"        # "linear" | "zero"
    linear_solver: str = "auto"       # "auto" | "direct" | "amg"
    direct_threshold: int = 300_000   # unknowns above which "auto" switches to AMG
    amg_rtol: float = 1e-11
    amg_maxiter: int = 1000


@dataclass
class NewtonReport:
    iterations: int
    residual_norms: list[float]
    converged: bool
    warm_start: str
    solver: str = "direct"
    wall_time: float = 0.0


# ----------------------------------------------------------------- assembly


def assemble_load_vector(space: DofSpace, bc: BoundaryConditions,
                         load: VectorField | None) -> np.ndarray:
    """Volumetric load against cell functions plus Neumann tractions."""
    b = np.zeros(space.n_dofs)
    if load is not None:
        for cls in space.classes:
            pts = cls.barycenters[:, None, :] + cls.cell_offsets[None, :, :]
            fv = np.asarray(load(pts.reshape(-1, 2))).reshape(len(cls.members), -1, 2)
            V = cls.cell_value_eval()
            contrib = np.einsum("eqd,qdl,q->el", fv, V, cls.cell_w)
            cell_dofs = cls.gdofs[:, : space.cell_block]
            np.add.at(b, cell_dofs, contrib)
    mesh = space.mesh
    by_tag: dict[str, list[int]] = {}
    for fid, tag in bc.neumann_faces(mesh):
        by_tag.setdefault(tag, []).append(fid)
    for tag, fids in by_tag.items():
        traction = bc.neumann[tag]
        for fid in fids:
            fc = space.face_classes[space.face_class[fid]]
            row = space.face_row[fid]
            pts = fc.midpoints[row] + fc.offsets
            tv = np.asarray(traction(pts))
            contrib = np.einsum("qd,qj,q->dj", tv, fc.psi, fc.weights)
            b[space.face_slice(fid)] += contrib.reshape(-1)
    return b


def _element_systems(space: DofSpace, u: DofVector, law: MaterialLaw, gamma: float,
                     with_matrix: bool, chunk_floats: float = 4e7):
    """Yield (cls, member_index_chunk, K_chunk or None, r_chunk) per class chunk."""
    for cls in space.classes:
        B = cls.gradient_eval()                            # (n_q, 3, n_loc)
        n_q, _, n_loc = B.shape
        Bw = B * cls.cell_w[:, None, None]
        chunk = max(1, int(chunk_floats / (n_q * 3 * n_loc)))
        for start in range(0, len(cls.members), chunk):
            idx = slice(start, min(start + chunk, len(cls.members)))
            U = u.data[cls.gdofs[idx]]                     # (E, n_loc)
            eps = np.einsum("qcl,el->eqc", B, U)
            sig = law.stress(eps)
            r = np.einsum("eqc,qcl->el", sig, Bw) + gamma * (U @ cls.stab)
            K = None
            if with_matrix:
                D = law.tangent(eps)                       # (E, n_q, 3, 3)
                DB = np.einsum("eqcd,qdl->eqcl", D, B)
                K = np.matmul(
                    Bw.reshape(n_q * 3, n_loc).T[None, :, :],
                    DB.reshape(-1, n_q * 3, n_loc),
                )
                K += gamma * cls.stab
            yield cls, idx, K, r


def assemble_residual(space: DofSpace, u: DofVector, law: MaterialLaw,
                      bc: BoundaryConditions, load: VectorField | None = None,
                      gamma: float | None = None,
                      load_vector: np.ndarray | None = None) -> np.ndarray:
    """Residual of the discrete problem; Dirichlet-masked rows are zeroed."""
    gamma = law.gamma if gamma is None else gamma
    if load_vector is None:
        load_vector = assemble_load_vector(space, bc, load)
    res = -load_vector.copy()
    for cls, idx, _, r in _element_systems(space, u, law, gamma, with_matrix=False):
        np.add.at(res, cls.gdofs[idx], r)
    res[space.dirichlet_mask(bc.dirichlet_faces(space.mesh))] = 0.0
    return res


class _CondensedPattern:
    """Sparsity of the face-coupled Schur system, built once per solve.

    Dirichlet face DOFs map to one extra "dump" row/column carrying an
    identity entry, so no per-element masking is needed during assembly.
    """

    def __init__(self, space: DofSpace, dirichlet_faces: list[int]):
        self.space = space
        mask = space.dirichlet_mask(dirichlet_faces)[space.n_cell_dofs:]
        n_face_dofs = space.n_dofs - space.n_cell_dofs
        self.free = ~mask
        self.n_free = int(self.free.sum())
        fmap = np.full(n_face_dofs, self.n_free, dtype=np.int64)
        fmap[self.free] = np.arange(self.n_free)
        self.fmap = fmap
        self.n = self.n_free + 1

        rows_parts, cols_parts = [], []
        nc = space.cell_block
        for cls in space.classes:
            gface = fmap[cls.gdofs[:, nc:] - space.n_cell_dofs]   # (E, nf)
            nf = gface.shape[1]
            rows_parts.append(np.repeat(gface, nf, axis=1).ravel())
            cols_parts.append(np.tile(gface, (1, nf)).ravel())
        rows_parts.append(np.array([self.n_free]))
        cols_parts.append(np.array([self.n_free]))
        rows = np.concatenate(rows_parts)
        cols = np.concatenate(cols_parts)
        order = np.lexsort((cols, rows))
        rs, cs = rows[order], cols[order]
        new = np.empty(len(rs), dtype=bool)
        new[0] = True
        new[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        slot = np.cumsum(new) - 1
        self.nnz = int(slot[-1]) + 1
        pos = np.empty(len(rows), dtype=np.int64)
        pos[order] = slot
        self.pos = pos
        self.indices = cs[new].astype(np.int32)
        counts = np.bincount(rs[new], minlength=self.n)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def to_csr(self, vals: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.pos, weights=vals, minlength=self.nnz)
        # dump row: drop accumulated Dirichlet-row couplings, keep identity
        lo, hi = self.indptr[self.n_free], self.indptr[self.n_free + 1]
        data[lo:hi] = 0.0
        diag = lo + int(np.searchsorted(self.indices[lo:hi], self.n_free))
        data[diag] = 1.0
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass
class CondensedSystem:
    """Face-coupled linear system plus the local cell-recovery data."""

    matrix: sp.csr_matrix           # (n_free + 1) square, dump row carries identity
    rhs: np.ndarray
    pattern: _CondensedPattern
    recovery: list                  # per class: (index slice array, X, y)
    symmetric: bool

    def recover_cells(self, delta_face_full: np.ndarray, space: DofSpace) -> np.ndarray:
        """Cell corrections -y - X @ delta_f for every element."""
        out = np.empty(space.n_cell_dofs)
        nc = space.cell_block
        for cls, members, X, y in self.recovery:
            gface = self.pattern.fmap[cls.gdofs[members, nc:] - space.n_cell_dofs]
            df = delta_face_full[gface]
            dc = -y - np.einsum("eij,ej->ei", X, df)
            cell_dofs = cls.gdofs[members, :nc]
            out[cell_dofs.ravel()] = dc.ravel()
        return out


def static_condense(space: DofSpace, u: DofVector, law: MaterialLaw,
                    bc: BoundaryConditions, load_vector: np.ndarray,
                    gamma: float | None = None,
                    pattern: _CondensedPattern | None = None) -> CondensedSystem:
    """Linearize at `u` and eliminate cell unknowns element by element."""
    gamma = law.gamma if gamma is None else gamma
    if pattern is None:
        pattern = _CondensedPattern(space, bc.dirichlet_faces(space.mesh))
    nc = space.cell_block
    vals_parts = []
    g = np.zeros(pattern.n)
    recovery = []
    for cls, idx, K, r in _element_systems(space, u, law, gamma, with_matrix=True):
        r = r - load_vector[cls.gdofs[idx]]
        Kcc = K[:, :nc, :nc]
        Kcf = K[:, :nc, nc:]
        Kfc = K[:, nc:, :nc]
        Kff = K[:, nc:, nc:]
        try:
            X = np.linalg.solve(Kcc, Kcf)
            y = np.linalg.solve(Kcc, r[:, :nc, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular cell block during condensation: {exc}") from exc
        S = Kff - np.matmul(Kfc, X)
        gl = r[:, nc:] - np.einsum("eij,ej->ei", Kfc, y)
        vals_parts.append(S.ravel())
        gface = pattern.fmap[cls.gdofs[idx, nc:] - space.n_cell_dofs]
        np.add.at(g, gface, gl)
        recovery.append((cls, idx, X, y))
    vals_parts.append(np.array([1.0]))  # dump diagonal
    g[pattern.n_free] = 0.0
    matrix = pattern.to_csr(np.concatenate(vals_parts))
    return CondensedSystem(matrix=matrix, rhs=g, pattern=pattern, recovery=recovery,
                           symmetric=law.symmetric_tangent)


def assemble_full_system(space: DofSpace, u: DofVector, law: MaterialLaw,
                         bc: BoundaryConditions, load_vector: np.ndarray,
                         gamma: float | None = None):
    """Uncondensed Jacobian and residual over all DOFs (verification path).

    Returns (matrix, rhs, free_map) where Dirichlet face DOFs map to a dump
    index n_free.
    """
    gamma = law.gamma if gamma is None else gamma
    mask = space.dirichlet_mask(bc.dirichlet_faces(space.mesh))
    free = ~mask
    n_free = int(free.sum())
    fmap = np.full(space.n_dofs, n_free, dtype=np.int64)
    fmap[free] = np.arange(n_free)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n_free + 1)
    for cls, idx, K, r in _element_systems(space, u, law, gamma, with_matrix=True):
        r = r - load_vector[cls.gdofs[idx]]
        gd = fmap[cls.gdofs[idx]]
        n_loc = gd.shape[1]
        rows.append(np.repeat(gd, n_loc, axis=1).ravel())
        cols.append(np.tile(gd, (1, n_loc)).ravel())
        vals.append(K.ravel())
        np.add.at(rhs, gd, r)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = rows != n_free          # dump row carries only its identity entry
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    rows = np.concatenate([rows, [n_free]])
    cols = np.concatenate([cols, [n_free]])
    vals = np.concatenate([vals, [1.0]])
    rhs[n_free] = 0.0
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n_free + 1, n_free + 1))
    return A, rhs, fmap


# ------------------------------------------------------------ linear solvers


class _LinearSolver:
    """Direct or AMG-preconditioned CG solve with hierarchy reuse."""

    def __init__(self, space: DofSpace, opts: NewtonOptions, symmetric: bool):
        self.space = space
        self.opts = opts
        self.symmetric = symmetric
        self._ml = None
        self.kind = "direct"

    def choose(self, n: int) -> str:
        if self.opts.linear_solver == "direct" or not self.symmetric:
            return "direct"
        if self.opts.linear_solver == "amg":
            return "amg"
        return "direct" if n <= self.opts.direct_threshold else "amg"

    def near_nullspace(self, pattern: _CondensedPattern) -> np.ndarray:
        space = self.space
        modes = [
            lambda X: np.column_stack([np.ones(len(X)), np.zeros(len(X))]),
            lambda X: np.column_stack([np.zeros(len(X)), np.ones(len(X))]),
            lambda X: np.column_stack([-X[:, 1], X[:, 0]]),
        ]
        B = np.zeros((pattern.n, 3))
        for j, mode in enumerate(modes):
            coeffs = space.project_faces(mode).reshape(-1)
            B[:-1, j] = coeffs[pattern.free]
        B[-1, :] = 0.0
        B[-1, 0] = 1.0
        return B

    def solve(self, A: sp.csr_matrix, b: np.ndarray,
              pattern: _CondensedPattern | None = None) -> np.ndarray:
        self.kind = self.choose(A.shape[0])
        if self.kind == "direct":
            try:
                return spla.splu(A.tocsc()).solve(b)
            except RuntimeError as exc:
                raise SolverError(f"sparse factorization failed: {exc}") from exc
        import pyamg

        if self._ml is None:
            B = self.near_nullspace(pattern) if pattern is not None else None
            self._ml = pyamg.smoothed_aggregation_solver(
                A.tocsr(), B=B, strength="symmetric", max_coarse=500)
        M = self._ml.aspreconditioner(cycle="V")
        scale = np.linalg.norm(b)
        if scale == 0.0:
            return np.zeros_like(b)
        x, info = spla.cg(A, b, rtol=self.opts.amg_rtol, atol=0.0, M=M,
                          maxiter=self.opts.amg_maxiter)
        if info != 0:
            raise SolverError(f"AMG-preconditioned CG did not converge (info={info})")
        return x


# ---------------------------------------------------------------- solves


def _linearized_material(law: MaterialLaw) -> MaterialLaw:
    """Linear elasticity-like law from the tangent of `law` at zero strain."""
    K0 = law.tangent(np.zeros(3))

    def stress(eps, x=None):
        return np.asarray(eps) @ K0.T

    def tangent(eps, x=None):
        e = np.asarray(eps)
        return np.broadcast_to(K0, e.shape[:-1] + (3, 3)).copy()

    return MaterialLaw(
        name=f"linearized_{law.name}",
        parameters=dict(law.parameters),
        stress=stress,
        tangent=tangent,
        energy=None,
        gamma=law.gamma,
    )


def _apply_dirichlet_values(space: DofSpace, u: DofVector, bc: BoundaryConditions) -> None:
    mesh = space.mesh
    for tag, g in bc.dirichlet.items():
        fids = [f.id for f in mesh.faces if f.kind == "boundary" and f.tag == tag]
        if not fids:
            continue
        coeffs = space.project_faces(g)
        for fid in fids:
            u.data[space.face_slice(fid)] = coeffs[fid].reshape(-1)


def newton_solve(space: DofSpace, law: MaterialLaw, bc: BoundaryConditions,
                 load: VectorField | None = None, opts: NewtonOptions | None = None,
                 gamma: float | None = None) -> tuple[DofVector, NewtonReport]:
    """Plain Newton on the discrete problem with statically condensed steps.

    The iteration stops when the free-DOF residual norm drops below
    ``opts.tol`` relative to the load scale.  No damping or line search is
    used; non-convergence is reported, not patched.
    """
    opts = opts or NewtonOptions()
    bc.validate(space.mesh)
    gamma = law.gamma if gamma is None else gamma
    t0 = time.perf_counter()

    b = assemble_load_vector(space, bc, load)
    pattern = _CondensedPattern(space, bc.dirichlet_faces(space.mesh))
    lin = _LinearSolver(space, opts, law.symmetric_tangent)

    u = space.zeros()
    _apply_dirichlet_values(space, u, bc)
    mask_free = ~space.dirichlet_mask(bc.dirichlet_faces(space.mesh))

    # the convergence scale comes from the load functional and the residual of
    # the pure-Dirichlet initial state, never from a warm-started residual
    res = assemble_residual(space, u, law, bc, gamma=gamma, load_vector=b)
    scale = max(float(np.linalg.norm(b[mask_free])), float(np.linalg.norm(res)))
    if scale == 0.0:
        return u, NewtonReport(0, [0.0], True, opts.warm_start, lin.kind,
                               time.perf_counter() - t0)

    if opts.warm_start == "linear":
        linear = _linearized_material(law)
        sysw = static_condense(space, u, linear, bc, b, gamma=gamma, pattern=pattern)
        lin_warm = _LinearSolver(space, opts, True)
        df = lin_warm.solve(sysw.matrix, -sysw.rhs, pattern)
        u.data[space.n_cell_dofs:][pattern.free] += df[:-1][pattern.fmap[pattern.free]]
        u.data[: space.n_cell_dofs] += sysw.recover_cells(df, space)
        res = assemble_residual(space, u, law, bc, gamma=gamma, load_vector=b)
    elif opts.warm_start != "zero":
        raise ValueError(f"unknown warm start {opts.warm_start!r}")

    norms = [float(np.linalg.norm(res))]

    converged = norms[-1] <= opts.tol * scale
    iterations = 0
    while not converged and iterations < opts.max_iter:
        system = static_condense(space, u, law, bc, b, gamma=gamma, pattern=pattern)
        df = lin.solve(system.matrix, -system.rhs, pattern)
        u.data[space.n_cell_dofs:][pattern.free] += df[:-1][pattern.fmap[pattern.free]]
        u.data[: space.n_cell_dofs] += system.recover_cells(df, space)
        iterations += 1
        res = assemble_residual(space, u, law, bc, gamma=gamma, load_vector=b)
        norms.append(float(np.linalg.norm(res)))
        converged = norms[-1] <= opts.tol * scale
        log.info("newton iter %d: |res| = %.3e (rel %.3e)", iterations, norms[-1],
                 norms[-1] / scale)
        if not np.isfinite(norms[-1]):
            break

    return u, NewtonReport(iterations, norms, bool(converged), opts.warm_start,
                           lin.kind, time.perf_counter() - t0)


def solve_linear_elasticity(space: DofSpace, law: MaterialLaw, bc: BoundaryConditions,
                            load: VectorField | None = None,
                            opts: NewtonOptions | None = None,
                            gamma: float | None = None) -> DofVector:
    """One condensed solve of the linearization of `law` at zero strain."""
    opts = opts or NewtonOptions()
    linear = _linearized_material(law)
    sub = NewtonOptions(**{**opts.__dict__, "warm_start": "zero", "max_iter": 1})
    u, report = newton_solve(space, linear, bc, load, sub, gamma=gamma)
    if not report.converged and report.iterations > 0:
        # a single Newton step is exact for a linear law up to solver tolerance
        log.warning("linear solve residual did not reach tolerance: %s", report.residual_norms)
    return u


def solve_full(space: DofSpace, law: MaterialLaw, bc: BoundaryConditions,
               load: VectorField | None = None, opts: NewtonOptions | None = None,
               gamma: float | None = None) -> tuple[DofVector, NewtonReport]:
    """Newton iteration solving the uncondensed system (verification path)."""
    opts = opts or NewtonOptions()
    bc.validate(space.mesh)
    gamma = law.gamma if gamma is None else gamma
    t0 = time.perf_counter()
    b = assemble_load_vector(space, bc, load)
    u = space.zeros()
    _apply_dirichlet_values(space, u, bc)
    mask_free = ~space.dirichlet_mask(bc.dirichlet_faces(space.mesh))
    res = assemble_residual(space, u, law, bc, gamma=gamma, load_vector=b)
    scale = max(float(np.linalg.norm(b[mask_free])), float(np.linalg.norm(res)))
    norms = [float(np.linalg.norm(res))]
    if scale == 0.0:
        return u, NewtonReport(0, norms, True, "zero", "direct", time.perf_counter() - t0)
    converged = norms[-1] <= opts.tol * scale
    iterations = 0
    while not converged and iterations < opts.max_iter:
        A, rhs, fmap = assemble_full_system(space, u, law, bc, b, gamma=gamma)
        delta = spla.splu(A.tocsc()).solve(-rhs)
        u.data[mask_free] += delta[:-1][fmap[mask_free]]
        iterations += 1
        res = assemble_residual(space, u, law, bc, gamma=gamma, load_vector=b)
        norms.append(float(np.linalg.norm(res)))
        converged = norms[-1] <= opts.tol * scale
    return u, NewtonReport(iterations, norms, bool(converged), "zero", "direct",
                           time.perf_counter() - t0)
