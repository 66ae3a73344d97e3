"""Degrees of freedom and element-local reconstruction operators.

Unknowns are vector polynomials of degree k on cells and faces.  Per element,
the symmetric gradient reconstruction G maps local DOFs to a degree-k symmetric
tensor field via a discrete integration-by-parts identity; the displacement
reconstruction r lifts local DOFs to a degree-(k+1) vector field whose
symmetric gradient best matches G, pinned by mean-displacement and
mean-rotation closure conditions; the face residuals Delta_F measure the
cell/face trace mismatch of r and vanish on reduced degree-(k+1) polynomials,
which makes them the right quantity to penalize.

Local operators are matrices assembled once per *congruence class*: elements
that are translates of each other (within 1e-12 relative tolerance) share all
basis values, quadrature data, and operator matrices because the bases are
functions of (x - x_T) / h_T.  On structured meshes this collapses the setup
cost to a handful of classes; on unstructured meshes every element simply is
its own class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from hho2d.mesh import Mesh, Element
from hho2d.polyspace import (
    CellBasis,
    FaceBasis,
    eng_sym_grad,
    quadrature_on_element,
    quadrature_on_face,
    space_dimension,
)


def _solve_spd(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    return cho_solve(cho_factor(M), B)


@dataclass
class ElementClass:
    """Shared geometry, bases, and local operators for congruent elements."""

    rep: Element
    members: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    # filled by DofSpace._build_class:
    n_faces: int = 0
    n_loc: int = 0
    face_h: np.ndarray | None = None
    face_normals: np.ndarray | None = None
    cell_offsets: np.ndarray | None = None      # (n_q, 2) quad points rel. barycenter
    cell_w: np.ndarray | None = None
    phi1: np.ndarray | None = None              # (n_q, n1) P^{k+1} scalar basis
    grad1: np.ndarray | None = None             # (n_q, n1, 2)
    s1: np.ndarray | None = None                # (n_q, 3, 2 n1) vector sym-grads
    face_offsets: np.ndarray | None = None      # (m, n_qf, 2) rel. barycenter
    face_w: np.ndarray | None = None            # (m, n_qf)
    psi: np.ndarray | None = None               # (m, n_qf, kk) face basis values
    phi1_face: np.ndarray | None = None         # (m, n_qf, n1)
    mass_face: np.ndarray | None = None         # (m, kk, kk)
    mass0: np.ndarray | None = None             # (n0, n0) cell P^k scalar mass
    grad_stiff0: np.ndarray | None = None       # (n0, n0) scalar full-grad stiffness
    trace: np.ndarray | None = None             # (m, kk, n0) face coeffs of cell traces
    gmat: np.ndarray | None = None              # (3 n0, n_loc) gradient reconstruction
    gvol: np.ndarray | None = None              # (3 n0, 2 n0) volumetric pairing
    rmat: np.ndarray | None = None              # (2 n1, n_loc) displacement reconstruction
    delta: np.ndarray | None = None             # (m, 2 kk, n_loc) face residuals
    stab: np.ndarray | None = None              # (n_loc, n_loc) stabilization, gamma-free
    ddiff: np.ndarray | None = None             # (m, 2 kk, n_loc) boundary differences
    bdelta: np.ndarray | None = None            # (n_loc, n_loc) zero-cell padding of ddiff
    strain_mat: np.ndarray | None = None        # (n_loc, n_loc) strain seminorm matrix
    gdofs: np.ndarray | None = None             # (n_members, n_loc) global DOF map
    barycenters: np.ndarray | None = None       # (n_members, 2)

    def gradient_eval(self) -> np.ndarray:
        """(n_q, 3, n_loc): engineering components of G at the cell quad points."""
        n0 = self.mass0.shape[0]
        g = self.gmat.reshape(3, n0, self.n_loc)
        return np.einsum("qi,cil->qcl", self.phi1[:, :n0], g)

    def cell_value_eval(self) -> np.ndarray:
        """(n_q, 2, 2 n0): displacement cell block evaluated at cell quad points."""
        n0 = self.mass0.shape[0]
        n_q = self.phi1.shape[0]
        V = np.zeros((n_q, 2, 2 * n0))
        V[:, 0, :n0] = self.phi1[:, :n0]
        V[:, 1, n0:] = self.phi1[:, :n0]
        return V


@dataclass
class FaceClass:
    """Shared quadrature and basis data for congruent faces."""

    members: np.ndarray
    offsets: np.ndarray      # (n_qf, 2) rel. midpoint
    weights: np.ndarray
    psi: np.ndarray          # (n_qf, kk)
    mass: np.ndarray         # (kk, kk)
    midpoints: np.ndarray    # (n_members, 2)


class DofSpace:
    """Displacement DOFs of degree k on cells and faces of a mesh.

    Global layout: all cell blocks (2 * dim P^k each, x-components then
    y-components) followed by all face blocks (2 * (k+1) each).
    """

    def __init__(self, mesh: Mesh, degree: int, quad_degree: int | None = None,
                 orthonormalize: bool | None = None):
        if degree < 1:
            raise ValueError("HHO displacement space needs degree k >= 1")
        self.mesh = mesh
        self.k = degree
        self.n0 = space_dimension(degree)
        self.n1 = space_dimension(degree + 1)
        self.kk = degree + 1
        self.cell_block = 2 * self.n0
        self.face_block = 2 * self.kk
        self.quad_degree = quad_degree or 2 * (degree + 1) + 2
        self.orthonormalize = (degree >= 3) if orthonormalize is None else orthonormalize
        self.n_cell_dofs = mesh.n_elements * self.cell_block
        self.n_dofs = self.n_cell_dofs + mesh.n_faces * self.face_block

        self._build_classes()

    # ------------------------------------------------------------------ setup

    def _build_classes(self) -> None:
        mesh = self.mesh
        elem_keys: dict[tuple, int] = {}
        class_members: list[list[int]] = []
        self.element_class = np.empty(mesh.n_elements, dtype=np.int64)
        self.element_row = np.empty(mesh.n_elements, dtype=np.int64)
        reps: list[Element] = []
        for e in mesh.elements:
            q = e.diameter * 1e-12
            parts = [np.round((mesh.faces[f].endpoints - e.barycenter) / q).astype(np.int64)
                     for f in e.faces]
            # relative shape plus log-quantized absolute size: congruent means
            # equal shape *and* equal scale (to 1e-12 relative)
            key = (len(e.faces), int(round(np.log(e.diameter) / 1e-12)))
            key += tuple(np.concatenate(parts).ravel().tolist())
            cid = elem_keys.get(key)
            if cid is None:
                cid = len(class_members)
                elem_keys[key] = cid
                class_members.append([])
                reps.append(e)
            self.element_class[e.id] = cid
            self.element_row[e.id] = len(class_members[cid])
            class_members[cid].append(e.id)

        self.classes = [ElementClass(rep=reps[c], members=np.array(m, dtype=np.int64))
                        for c, m in enumerate(class_members)]
        for cls in self.classes:
            self._build_class(cls)
            cls.barycenters = np.array([mesh.elements[e].barycenter for e in cls.members])
            cls.gdofs = np.array([self._element_dofs(mesh.elements[e]) for e in cls.members],
                                 dtype=np.int64)

        face_keys: dict[tuple, int] = {}
        fc_members: list[list[int]] = []
        self.face_class = np.empty(mesh.n_faces, dtype=np.int64)
        self.face_row = np.empty(mesh.n_faces, dtype=np.int64)
        f_reps: list[int] = []
        for f in mesh.faces:
            d = f.endpoints[1] - f.endpoints[0]
            # direction at relative quantum plus log-quantized length, so faces
            # of equal direction but different size stay in distinct classes
            key = tuple(np.round(d / (f.length * 1e-12)).astype(np.int64).tolist()) + (
                int(round(np.log(f.length) / 1e-12)),)
            cid = face_keys.get(key)
            if cid is None:
                cid = len(fc_members)
                face_keys[key] = cid
                fc_members.append([])
                f_reps.append(f.id)
            self.face_class[f.id] = cid
            self.face_row[f.id] = len(fc_members[cid])
            fc_members[cid].append(f.id)

        self.face_classes = []
        for c, members in enumerate(fc_members):
            f = mesh.faces[f_reps[c]]
            rule = quadrature_on_face(f, self.quad_degree)
            basis = FaceBasis(f, self.k, orthonormalize=self.orthonormalize)
            psi = basis.eval(rule.points)
            mass = (psi * rule.weights[:, None]).T @ psi
            self.face_classes.append(FaceClass(
                members=np.array(members, dtype=np.int64),
                offsets=rule.points - f.midpoint,
                weights=rule.weights,
                psi=psi,
                mass=mass,
                midpoints=np.array([mesh.faces[i].midpoint for i in members]),
            ))

    def _element_dofs(self, e: Element) -> np.ndarray:
        out = np.empty(self.cell_block + len(e.faces) * self.face_block, dtype=np.int64)
        out[: self.cell_block] = np.arange(self.cell_block) + e.id * self.cell_block
        for i, f in enumerate(e.faces):
            start = self.n_cell_dofs + f * self.face_block
            sl = self.cell_block + i * self.face_block
            out[sl : sl + self.face_block] = np.arange(self.face_block) + start
        return out

    def _build_class(self, cls: ElementClass) -> None:
        mesh, k = self.mesh, self.k
        n0, n1, kk = self.n0, self.n1, self.kk
        e = cls.rep
        m = len(e.faces)
        cls.n_faces = m
        cls.n_loc = self.cell_block + m * self.face_block
        cls.face_h = np.array([mesh.faces[f].length for f in e.faces])
        cls.face_normals = e.normals.copy()

        rule = quadrature_on_element(e, self.quad_degree)
        basis1 = CellBasis(e, k + 1, orthonormalize=self.orthonormalize,
                           quad_degree=self.quad_degree)
        cls.cell_offsets = rule.points - e.barycenter
        cls.cell_w = rule.weights
        cls.phi1 = basis1.eval(rule.points)
        cls.grad1 = basis1.grad(rule.points)
        cls.s1 = eng_sym_grad(cls.grad1)

        w = cls.cell_w
        phi0 = cls.phi1[:, :n0]
        cls.mass0 = (phi0 * w[:, None]).T @ phi0
        cls.grad_stiff0 = np.einsum("qid,qjd,q->ij", cls.grad1[:, :n0], cls.grad1[:, :n0], w)

        # face data (the face basis is shared with the global face classes:
        # it depends only on the face length and canonical direction)
        f_rules = [quadrature_on_face(mesh.faces[f], self.quad_degree) for f in e.faces]
        n_qf = len(f_rules[0].weights)
        cls.face_offsets = np.array([r.points - e.barycenter for r in f_rules])
        cls.face_w = np.array([r.weights for r in f_rules])
        f_bases = [FaceBasis(mesh.faces[f], k, orthonormalize=self.orthonormalize)
                   for f in e.faces]
        cls.psi = np.array([b.eval(r.points) for b, r in zip(f_bases, f_rules)])
        cls.phi1_face = np.array([basis1.eval(r.points) for r in f_rules])
        cls.mass_face = np.array([
            (p * wf[:, None]).T @ p for p, wf in zip(cls.psi, cls.face_w)
        ])
        cls.trace = np.array([
            _solve_spd(cls.mass_face[i],
                       (cls.psi[i] * cls.face_w[i][:, None]).T @ cls.phi1_face[i][:, :n0])
            for i in range(m)
        ])

        self._build_gradient(cls)
        self._build_displacement(cls)
        self._build_stabilization(cls)

    def _build_gradient(self, cls: ElementClass) -> None:
        n0, n1 = self.n0, self.n1
        m, n_loc = cls.n_faces, cls.n_loc
        w, phi0 = cls.cell_w, cls.phi1[:, :n0]
        idx_cell = np.r_[0:n0, n1 : n1 + n0]
        s0 = cls.s1[:, :, idx_cell]                       # (n_q, 3, 2 n0)

        BG = np.zeros((3 * n0, n_loc))
        vol = np.einsum("qi,qcl,q->cil", phi0, s0, w).reshape(3 * n0, 2 * n0)
        BG[:, : self.cell_block] = vol
        for i in range(m):
            n = cls.face_normals[i]
            N = np.array([[n[0], 0.0, n[1] / np.sqrt(2.0)],
                          [0.0, n[1], n[0] / np.sqrt(2.0)]])
            wf = cls.face_w[i]
            phi0f = cls.phi1_face[i][:, :n0]
            psi = cls.psi[i]
            # tensor basis (c, j) against v_F (face block) and -v_T (cell block)
            face_term = np.einsum("dc,qj,qb,q->cjdb", N, phi0f, psi, wf)
            cell_term = np.einsum("dc,qj,qb,q->cjdb", N, phi0f, phi0f, wf)
            sl = self.cell_block + i * self.face_block
            BG[:, sl : sl + self.face_block] += face_term.reshape(3 * n0, self.face_block)
            BG[:, : self.cell_block] -= cell_term.reshape(3 * n0, 2 * n0)

        big_mass = np.kron(np.eye(3), cls.mass0)
        cls.gmat = _solve_spd(big_mass, BG)
        cls.gvol = vol

    def _build_displacement(self, cls: ElementClass) -> None:
        n0, n1, kk = self.n0, self.n1, self.kk
        m, n_loc = cls.n_faces, cls.n_loc
        w = cls.cell_w
        K1 = np.einsum("qci,qcj,q->ij", cls.s1, cls.s1, w)

        B = cls.gradient_eval()                            # (n_q, 3, n_loc)
        rhs = np.einsum("qci,qcj,q->ij", cls.s1, B, w)     # (2 n1, n_loc)

        # closure rows: mean displacement per component, mean rotation
        C = np.zeros((3, 2 * n1))
        ints = cls.phi1.T @ w                              # integrals of P^{k+1} basis
        C[0, :n1] = ints
        C[1, n1:] = ints
        C[2, :n1] = -0.5 * (cls.grad1[:, :, 1].T @ w)
        C[2, n1:] = 0.5 * (cls.grad1[:, :, 0].T @ w)

        crhs = np.zeros((3, n_loc))
        ints0 = cls.phi1[:, :n0].T @ w
        crhs[0, :n0] = ints0
        crhs[1, n0 : 2 * n0] = ints0
        for i in range(m):
            n = cls.face_normals[i]
            wf, psi = cls.face_w[i], cls.psi[i]
            fints = psi.T @ wf
            sl = self.cell_block + i * self.face_block
            crhs[2, sl : sl + kk] += -0.5 * n[1] * fints
            crhs[2, sl + kk : sl + 2 * kk] += 0.5 * n[0] * fints

        row_scale = 1.0 / np.linalg.norm(C, axis=1)
        C = C * row_scale[:, None]
        crhs = crhs * row_scale[:, None]
        beta = np.trace(K1) / (2 * n1)
        cls.rmat = _solve_spd(K1 + beta * (C.T @ C), rhs + beta * (C.T @ crhs))

    def _build_stabilization(self, cls: ElementClass) -> None:
        n0, n1, kk = self.n0, self.n1, self.kk
        m, n_loc = cls.n_faces, cls.n_loc
        w, phi0, phi1 = cls.cell_w, cls.phi1[:, : n0], cls.phi1

        # P^k projection of the reconstruction, minus the cell block itself
        cross = (phi0 * w[:, None]).T @ phi1              # (n0, n1)
        proj = _solve_spd(cls.mass0, cross)
        cell_part = np.zeros((2 * n0, n_loc))
        cell_part[:n0] = proj @ cls.rmat[:n1]
        cell_part[n0:] = proj @ cls.rmat[n1:]
        cell_part[:, : self.cell_block] -= np.eye(2 * n0)

        cls.delta = np.zeros((m, 2 * kk, n_loc))
        cls.ddiff = np.zeros((m, 2 * kk, n_loc))
        cls.stab = np.zeros((n_loc, n_loc))
        for i in range(m):
            wf, psi, phi1f = cls.face_w[i], cls.psi[i], cls.phi1_face[i]
            tr1 = _solve_spd(cls.mass_face[i], (psi * wf[:, None]).T @ phi1f)  # (kk, n1)
            tr0 = cls.trace[i]                                                  # (kk, n0)
            sl = self.cell_block + i * self.face_block

            d = np.zeros((2 * kk, n_loc))
            d[:kk] = tr1 @ cls.rmat[:n1] - tr0 @ cell_part[:n0]
            d[kk:] = tr1 @ cls.rmat[n1:] - tr0 @ cell_part[n0:]
            d[:kk, sl : sl + kk] -= np.eye(kk)
            d[kk:, sl + kk : sl + 2 * kk] -= np.eye(kk)
            cls.delta[i] = d

            dd = np.zeros((2 * kk, n_loc))
            dd[:kk, :n0] = -tr0
            dd[kk:, n0 : 2 * n0] = -tr0
            dd[:kk, sl : sl + kk] = np.eye(kk)
            dd[kk:, sl + kk : sl + 2 * kk] = np.eye(kk)
            cls.ddiff[i] = dd

            cls.stab += (d[:kk].T @ cls.mass_face[i] @ d[:kk]
                         + d[kk:].T @ cls.mass_face[i] @ d[kk:]) / cls.face_h[i]

        cls.bdelta = np.zeros((n_loc, n_loc))
        for i in range(m):
            sl = self.cell_block + i * self.face_block
            cls.bdelta[sl : sl + self.face_block] = cls.ddiff[i]

        s_cell = cls.s1[:, :, np.r_[0:n0, n1 : n1 + n0]]
        strain = np.zeros((n_loc, n_loc))
        strain[: self.cell_block, : self.cell_block] = np.einsum(
            "qci,qcj,q->ij", s_cell, s_cell, w)
        for i in range(m):
            dd = cls.ddiff[i]
            strain += (dd[:kk].T @ cls.mass_face[i] @ dd[:kk]
                       + dd[kk:].T @ cls.mass_face[i] @ dd[kk:]) / cls.face_h[i]
        cls.strain_mat = strain

    # --------------------------------------------------------------- indexing

    def cell_slice(self, e: int) -> slice:
        return slice(e * self.cell_block, (e + 1) * self.cell_block)

    def face_slice(self, f: int) -> slice:
        start = self.n_cell_dofs + f * self.face_block
        return slice(start, start + self.face_block)

    def element_dofs(self, e: int) -> np.ndarray:
        cls = self.classes[self.element_class[e]]
        return cls.gdofs[self.element_row[e]]

    def class_of(self, e: int) -> ElementClass:
        return self.classes[self.element_class[e]]

    def dirichlet_mask(self, face_ids) -> np.ndarray:
        mask = np.zeros(self.n_dofs, dtype=bool)
        for f in face_ids:
            mask[self.face_slice(f)] = True
        return mask

    # ------------------------------------------------------------- reduction

    def project_cells(self, fn) -> np.ndarray:
        """(E, 2, n0) cell coefficients of the L2 projection of a vector field."""
        out = np.empty((self.mesh.n_elements, 2, self.n0))
        for cls in self.classes:
            pts = cls.barycenters[:, None, :] + cls.cell_offsets[None, :, :]
            vals = np.asarray(fn(pts.reshape(-1, 2))).reshape(len(cls.members), -1, 2)
            rhs = np.einsum("eqd,qi,q->edi", vals, cls.phi1[:, : self.n0], cls.cell_w)
            coeff = _solve_spd(cls.mass0, rhs.reshape(-1, self.n0).T).T
            out[cls.members] = coeff.reshape(len(cls.members), 2, self.n0)
        return out

    def project_faces(self, fn) -> np.ndarray:
        """(F, 2, k+1) face coefficients of the L2 projection of a vector field."""
        out = np.empty((self.mesh.n_faces, 2, self.kk))
        for fc in self.face_classes:
            pts = fc.midpoints[:, None, :] + fc.offsets[None, :, :]
            vals = np.asarray(fn(pts.reshape(-1, 2))).reshape(len(fc.members), -1, 2)
            rhs = np.einsum("eqd,qj,q->edj", vals, fc.psi, fc.weights)
            coeff = _solve_spd(fc.mass, rhs.reshape(-1, self.kk).T).T
            out[fc.members] = coeff.reshape(len(fc.members), 2, self.kk)
        return out

    def reduce(self, fn) -> "DofVector":
        """Reduction map: componentwise L2 projections on all cells and faces."""
        data = np.empty(self.n_dofs)
        data[: self.n_cell_dofs] = self.project_cells(fn).reshape(-1)
        data[self.n_cell_dofs :] = self.project_faces(fn).reshape(-1)
        return DofVector(self, data)

    def zeros(self) -> "DofVector":
        return DofVector(self, np.zeros(self.n_dofs))

    def random(self, seed: int = 0, zero_boundary: bool = False) -> "DofVector":
        rng = np.random.default_rng(seed)
        v = DofVector(self, rng.standard_normal(self.n_dofs))
        if zero_boundary:
            v.data[self.dirichlet_mask(self.mesh.boundary_face_ids)] = 0.0
        return v


@dataclass
class DofVector:
    """Flat coefficient vector over a DofSpace."""

    space: DofSpace
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.space.n_dofs,):
            raise ValueError("coefficient array does not match the space")

    def cell_block(self, e: int) -> np.ndarray:
        return self.data[self.space.cell_slice(e)].reshape(2, self.space.n0)

    def face_block(self, f: int) -> np.ndarray:
        return self.data[self.space.face_slice(f)].reshape(2, self.space.kk)

    def local(self, e: int) -> np.ndarray:
        return self.data[self.space.element_dofs(e)]

    def copy(self) -> "DofVector":
        return DofVector(self.space, self.data.copy())


@dataclass
class LocalOperators:
    """Per-element views of the reconstruction matrices (shared via classes)."""

    element: Element
    gradient: np.ndarray        # (3 n0, n_loc)
    displacement: np.ndarray    # (2 n1, n_loc)
    face_residuals: np.ndarray  # (m, 2 (k+1), n_loc)
    stabilization: np.ndarray   # (n_loc, n_loc), multiply by gamma / 1 (h_F inside)


def local_operators(space: DofSpace, element_id: int) -> LocalOperators:
    cls = space.class_of(element_id)
    return LocalOperators(
        element=space.mesh.elements[element_id],
        gradient=cls.gmat,
        displacement=cls.rmat,
        face_residuals=cls.delta,
        stabilization=cls.stab,
    )


def build_gradient_reconstruction(space: DofSpace, element_id: int) -> np.ndarray:
    return space.class_of(element_id).gmat


def build_displacement_reconstruction(space: DofSpace, element_id: int) -> np.ndarray:
    return space.class_of(element_id).rmat


def build_stabilization_residuals(space: DofSpace, element_id: int) -> np.ndarray:
    return space.class_of(element_id).delta


def stabilization_bilinear(space: DofSpace, element_id: int, u_loc: np.ndarray,
                           v_loc: np.ndarray, gamma: float) -> float:
    """s_T(u, v) = gamma * sum_F h_F^{-1} int_F Delta_F u . Delta_F v."""
    cls = space.class_of(element_id)
    return float(gamma * u_loc @ cls.stab @ v_loc)


def strain_seminorm(v: DofVector) -> float:
    """Discrete strain seminorm: cell sym-gradients plus scaled trace jumps."""
    space = v.space
    total = 0.0
    for cls in space.classes:
        U = v.data[cls.gdofs]                              # (n_members, n_loc)
        total += float(np.einsum("ei,ij,ej->", U, cls.strain_mat, U))
    return float(np.sqrt(max(total, 0.0)))


def reduce(fn, space: DofSpace) -> DofVector:
    """Module-level alias of `DofSpace.reduce`."""
    return space.reduce(fn)
