"""Coupled-field finite elements: assembly of the two-field (theta, phi)
system on linear triangles with zero-thickness interface segments,
constrained reduction (Dirichlet, node ties, gauge pins), modified Newton
iteration with frozen-coefficient tangents, and implicit time stepping.

Degree-of-freedom layout: theta occupies [0, N), phi occupies [N, 2N).
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import material as mat
from .errors import ConvergenceError, DomainError, StepRejection
from .mesh import Mesh, tri_areas

log = logging.getLogger("masonry_ham.fem")

# 2-point Gauss rule on the unit segment (positions, weights sum to 1)
_GP = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))
_GW = (0.5, 0.5)


@dataclass
class NodalState:
    """Nodal temperature [C] and relative humidity [-] at a time instant."""

    theta: np.ndarray
    phi: np.ndarray
    time: float = 0.0

    def vector(self):
        return np.concatenate([self.theta, self.phi])

    @classmethod
    def from_vector(cls, u, time=0.0):
        n = u.size // 2
        return cls(theta=u[:n].copy(), phi=u[n:].copy(), time=time)

    @classmethod
    def uniform(cls, n_nodes, theta, phi, time=0.0):
        return cls(theta=np.full(n_nodes, float(theta)),
                   phi=np.full(n_nodes, float(phi)), time=time)


@dataclass
class CoupledTangent:
    """Assembled operator blocks of the coupled system.

    K blocks are bulk conduction stiffness; I blocks hold the interface
    (contact-law) stiffness separately so badly scaled penalties can be
    transformed before they are ever summed with bulk entries; C holds the
    lumped capacity diagonals; L blocks couple nodal unknowns to the two
    components of an imposed macroscopic gradient (fluctuation mode only);
    km holds the volume integrals of the four local conduction coefficients.
    """

    K_tt: sp.csr_matrix
    K_tp: sp.csr_matrix
    K_pt: sp.csr_matrix
    K_pp: sp.csr_matrix
    I_tt: sp.csr_matrix = None
    I_pt: sp.csr_matrix = None
    I_pp: sp.csr_matrix = None
    C_t: np.ndarray = None
    C_p: np.ndarray = None
    L_tt: np.ndarray = None
    L_tp: np.ndarray = None
    L_pt: np.ndarray = None
    L_pp: np.ndarray = None
    km: np.ndarray = None          # (2,2) integrals of ktt,ktp / kpt,kpp
    volume: float = 0.0

    def stiffness_split(self):
        """(bulk, interface) full-size operators; interface may be None."""
        bulk = sp.bmat([[self.K_tt, self.K_tp], [self.K_pt, self.K_pp]],
                       format="csr")
        if self.I_tt is None:
            return bulk, None
        ifc = sp.bmat([[self.I_tt, None], [self.I_pt, self.I_pp]],
                      format="csr")
        return bulk, ifc

    def stiffness(self):
        bulk, ifc = self.stiffness_split()
        return bulk if ifc is None else (bulk + ifc).tocsr()

    def capacity_diagonal(self):
        return np.concatenate([self.C_t, self.C_p])

    def coupling(self):
        """(2N, 4) gradient-load matrix; columns follow (d/dx,d/dy) of theta
        then of phi."""
        top = np.hstack([self.L_tt, self.L_tp])
        bot = np.hstack([self.L_pt, self.L_pp])
        return np.vstack([top, bot])

    def km4(self):
        """(4, 4) block form of the volume-integrated local coefficients."""
        eye = np.eye(2)
        return np.block([[self.km[0, 0] * eye, self.km[0, 1] * eye],
                         [self.km[1, 0] * eye, self.km[1, 1] * eye]])

    def flux_coupling(self):
        """(4, 2N) volume-integrated flux weights: row block f of the product
        with nodal values gives the integral of the field contributions to
        flux f. Equals coupling().T only when the two cross coefficients
        coincide, which they do not for coupled heat/moisture transport."""
        top = np.hstack([self.L_tt.T, self.L_tp.T])
        bot = np.hstack([self.L_pt.T, self.L_pp.T])
        return np.vstack([top, bot])


# ------------------------------------------------------------------ geometry

def _geometry(mesh: Mesh):
    if mesh._geom is not None:
        return mesh._geom
    p = mesh.nodes[mesh.triangles]          # (E,3,2)
    x, y = p[..., 0], p[..., 1]
    area = tri_areas(mesh.nodes, mesh.triangles)
    if np.any(area <= 0):
        raise ValueError("mesh contains non-positive triangle areas")
    inv2a = 1.0 / (2.0 * area)
    B = np.empty((len(area), 2, 3))
    B[:, 0, 0] = (y[:, 1] - y[:, 2]) * inv2a
    B[:, 0, 1] = (y[:, 2] - y[:, 0]) * inv2a
    B[:, 0, 2] = (y[:, 0] - y[:, 1]) * inv2a
    B[:, 1, 0] = (x[:, 2] - x[:, 1]) * inv2a
    B[:, 1, 1] = (x[:, 0] - x[:, 2]) * inv2a
    B[:, 1, 2] = (x[:, 1] - x[:, 0]) * inv2a
    cent = p.mean(axis=1)
    geom = {"B": B, "area": area, "cent": cent,
            "MBB": np.einsum("eki,ekj->eij", B, B) * area[:, None, None]}
    if len(mesh.interfaces):
        seg = mesh.nodes[mesh.interfaces[:, 1]] - mesh.nodes[mesh.interfaces[:, 0]]
        geom["iface_len"] = np.hypot(seg[:, 0], seg[:, 1])
    mesh._geom = geom
    return geom


# ------------------------------------------------------------------- dof map

class DofMap:
    """Constraint bookkeeping: u_full = T @ u_red + u_fix.

    ties couple both fields of two nodes (interface continuity, periodic
    pairs); pinned nodes fix both fields (gauge); fixed_theta / fixed_phi
    carry Dirichlet node lists whose values are supplied per solve through
    fixed_vector. Constraint chains are resolved by union-find; a component
    containing any fixed node is fixed as a whole (values must agree).
    """

    def __init__(self, n_nodes, fixed_theta=(), fixed_phi=(), ties=(), pinned=()):
        self.n_nodes = int(n_nodes)
        self.fixed_theta = np.array(sorted(set(int(i) for i in fixed_theta)), dtype=int)
        self.fixed_phi = np.array(sorted(set(int(i) for i in fixed_phi)), dtype=int)
        self.pinned = np.array(sorted(set(int(i) for i in pinned)), dtype=int)

        parent = np.arange(n_nodes)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in ties:
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        self._root = np.array([find(i) for i in range(n_nodes)])

        members = {}
        for i, r in enumerate(self._root):
            members.setdefault(int(r), []).append(i)
        self._members = members

        self._fixed_comp = {0: set(), 1: set()}  # field index -> roots
        for nd in self.fixed_theta:
            self._fixed_comp[0].add(int(self._root[nd]))
        for nd in self.fixed_phi:
            self._fixed_comp[1].add(int(self._root[nd]))
        for nd in self.pinned:
            self._fixed_comp[0].add(int(self._root[nd]))
            self._fixed_comp[1].add(int(self._root[nd]))

        rows, cols, reps = [], [], []
        n_red = 0
        for f in (0, 1):
            off = f * n_nodes
            for r in sorted(members):
                if r in self._fixed_comp[f]:
                    continue
                reps.append(off + r)
                for m in members[r]:
                    rows.append(off + m)
                    cols.append(n_red)
                n_red += 1
        self.n_red = n_red
        self._rep_dofs = np.array(reps, dtype=int)
        self.T = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                               shape=(2 * n_nodes, n_red))

    def restrict(self, u_full):
        """Representative values of the free components."""
        return u_full[self._rep_dofs]

    def fixed_vector(self, theta_values=None, phi_values=None,
                     pin_theta=0.0, pin_phi=0.0):
        """Full-length vector carrying prescribed values on fixed components.

        theta_values / phi_values align with the fixed_theta / fixed_phi node
        arrays stored at construction (scalars broadcast). Ties propagate
        values across whole components; conflicts raise ValueError.
        """
        n = self.n_nodes
        u = np.zeros(2 * n)
        want = {}
        for f, nodes, values in ((0, self.fixed_theta, theta_values),
                                 (1, self.fixed_phi, phi_values)):
            if values is None:
                if len(nodes):
                    raise ValueError("missing values for fixed dofs")
                continue
            vals = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape)
            for nd, v in zip(nodes, vals):
                key = (f, int(self._root[nd]))
                if key in want and abs(want[key] - float(v)) > 1e-9:
                    raise ValueError(f"conflicting prescriptions at node {nd}")
                want[key] = float(v)
        for nd in self.pinned:
            want.setdefault((0, int(self._root[nd])), float(pin_theta))
            want.setdefault((1, int(self._root[nd])), float(pin_phi))
        for (f, r), v in want.items():
            for m in self._members[r]:
                u[f * n + m] = v
        return u

    def impose(self, u_full, u_fix):
        """Project a trial vector onto the constraint manifold."""
        return self.T @ self.restrict(u_full) + u_fix

    def fixed_dofs(self):
        mask = np.ones(2 * self.n_nodes, dtype=bool)
        mask[self.T.tocoo().row] = False
        return np.where(mask)[0]


def interface_ties(mesh: Mesh):
    """Node equality pairs enforcing perfect contact on all interfaces."""
    ties = []
    for a1, a2, b1, b2 in mesh.interfaces:
        ties.append((int(a1), int(b1)))
        ties.append((int(a2), int(b2)))
    return ties


def periodic_ties(mesh: Mesh):
    return [(int(m), int(s)) for m, s, _ in mesh.periodic_pairs]


def jump_basis(dofmap: DofMap, pairs):
    """Change of basis writing each node pair's dofs as (mean, jump).

    Returns a sparse matrix S with u_red = S v: for every pair (a, b) and
    each field, the two reduced dofs are re-expressed through a mean
    unknown (stored at a's slot) and a jump unknown (at b's slot), so
    u_a = v_m + v_d/2 and u_b = v_m - v_d/2.  A penalty interface term
    g (u_a - u_b) then stiffens only the jump diagonal instead of coupling
    two nodal columns, which keeps diagonal equilibration of the reduced
    matrix effective for penalties many orders above the bulk transport
    scale and lets the tiny physical jump live in its own well-scaled
    unknown.  Dofs outside any pair pass through unchanged; pairs with a
    fixed or tied member are left in nodal form.
    """
    n = dofmap.n_nodes
    col_of = np.full(2 * n, -1, dtype=int)
    has_col = np.diff(dofmap.T.indptr) > 0
    col_of[has_col] = dofmap.T.indices
    taken = np.zeros(dofmap.n_red, dtype=bool)
    rows, cols, vals = [], [], []
    for a, b in pairs:
        for off in (0, n):
            ra, rb = col_of[a + off], col_of[b + off]
            if ra < 0 or rb < 0 or ra == rb or taken[ra] or taken[rb]:
                continue
            taken[ra] = taken[rb] = True
            rows += [ra, ra, rb, rb]
            cols += [ra, rb, ra, rb]
            vals += [1.0, 0.5, 1.0, -0.5]
    rest = np.nonzero(~taken)[0]
    rows = np.concatenate([np.asarray(rows, dtype=int), rest])
    cols = np.concatenate([np.asarray(cols, dtype=int), rest])
    vals = np.concatenate([np.asarray(vals), np.ones(len(rest))])
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(dofmap.n_red, dofmap.n_red))


# ------------------------------------------------------------------ assembly

def assemble(mesh: Mesh, state: NodalState, params: mat.ProblemParams,
             mode="steady", *, dt=None, prev: NodalState = None,
             fluct=None, sources=None, clamp_counter=None, freeze=None,
             jacobian="picard"):
    """Assemble tangent blocks and the nonlinear out-of-balance residual.

    mode 'steady'    : conduction only.
    mode 'transient' : adds lumped capacity C (u - u_prev)/dt with the
                       capacity evaluated at the current iterate.
    mode 'fluctuation': state must be the TOTAL field (affine background
                       plus fluctuation) and fluct=(theta_f, phi_f) the
                       fluctuation part. Fills L blocks and km; interface
                       laws act on the fluctuation through state-dependent
                       slopes so the residual is exactly K u* + L grad.

    jacobian 'picard' : tangent freezes the transport coefficients at the
                        current state (secant of the incremental scheme).
    jacobian 'exact'  : adds the analytic coefficient-derivative terms
                        (rank-one per element) to the four K blocks; the
                        capacity and interface-slope derivatives are left
                        in secant form (their contributions scale with the
                        increment and the jump, respectively).

    freeze: optional (theta, phi) pair; all constitutive evaluations use
    this single state and the interface moisture law switches to its
    linearization there, making the assembled system exactly linear
    (patch tests, frozen-operator diagnostics).

    sources: optional (f_theta(x, y, t), f_phi(x, y, t)) volumetric source pair,
    evaluated at element centroids. Returns (CoupledTangent, residual[2N]).
    """
    N = mesh.n_nodes
    geom = _geometry(mesh)
    tris = mesh.triangles
    E = len(tris)
    area, B, MBB = geom["area"], geom["B"], geom["MBB"]
    cst = params.constants

    clamp_events = []

    def clamp(ph):
        return mat.clamp_phi(ph, warn_sink=clamp_events.append)

    if freeze is not None:
        th_c = np.full(E, float(freeze[0]))
        ph_c = np.full(E, float(freeze[1]))
        ph_clamped = np.zeros(E, dtype=bool)
    else:
        ph_raw = state.phi[tris].mean(axis=1)
        th_c = state.theta[tris].mean(axis=1)
        ph_c = clamp(ph_raw)
        ph_clamped = ph_raw != ph_c

    ktt = np.empty(E)
    ktp = np.empty(E)
    kpt = np.empty(E)
    kpp = np.empty(E)
    cap_t = np.empty(E) if mode == "transient" else None
    cap_p = np.empty(E) if mode == "transient" else None
    for pid in range(len(params.phases)):
        m = mesh.tri_phase == pid
        if not m.any():
            continue
        p = params.phases[pid]
        ktt[m], ktp[m], kpt[m], kpp[m] = mat.transport_coefficients(
            th_c[m], ph_c[m], p, cst)
        if mode == "transient":
            cap_t[m] = mat.heat_capacity(th_c[m], ph_c[m], p, cst)
            cap_p[m] = mat.moisture_capacity(ph_c[m], p)

    # residual: internal flux term  int B^T (k B u) dA, element by element
    gt = np.einsum("eij,ej->ei", B, state.theta[tris])
    gp = np.einsum("eij,ej->ei", B, state.phi[tris])
    fq = ktt[:, None] * gt + ktp[:, None] * gp
    fg = kpt[:, None] * gt + kpp[:, None] * gp
    r = np.zeros(2 * N)
    np.add.at(r[:N], tris, np.einsum("edi,ed->ei", B, fq) * area[:, None])
    np.add.at(r[N:], tris, np.einsum("edi,ed->ei", B, fg) * area[:, None])

    if sources is not None:
        f_t, f_p = sources
        cx, cy = geom["cent"][:, 0], geom["cent"][:, 1]
        w3 = area / 3.0
        if f_t is not None:
            np.add.at(r[:N], tris, np.broadcast_to(
                (-w3 * f_t(cx, cy, state.time))[:, None], (E, 3)))
        if f_p is not None:
            np.add.at(r[N:], tris, np.broadcast_to(
                (-w3 * f_p(cx, cy, state.time))[:, None], (E, 3)))

    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    kblk = {
        "tt": ktt[:, None, None] * MBB,
        "tp": ktp[:, None, None] * MBB,
        "pt": kpt[:, None, None] * MBB,
        "pp": kpp[:, None, None] * MBB,
    }
    if jacobian == "exact" and freeze is None:
        dth = np.empty((4, E))
        dph = np.empty((4, E))
        for pid in range(len(params.phases)):
            m = mesh.tri_phase == pid
            if not m.any():
                continue
            der = mat.transport_coefficient_derivatives(
                th_c[m], ph_c[m], params.phases[pid], cst)
            for bi in range(4):
                dth[bi, m], dph[bi, m] = der[bi]
        dph[:, ph_clamped] = 0.0  # coefficients constant past the clamp
        third = np.full(3, 1.0 / 3.0)
        Ba = B * area[:, None, None]
        # rank-one terms: d(residual)/du_j picks up dk/du * (1/3) * grad u
        pairs = {"tt": (0, 1, dth), "tp": (0, 1, dph),
                 "pt": (2, 3, dth), "pp": (2, 3, dph)}
        for key, (i1, i2, d) in pairs.items():
            v = np.einsum("edi,ed->ei", Ba, d[i1][:, None] * gt
                          + d[i2][:, None] * gp)
            kblk[key] = kblk[key] + v[:, :, None] * third[None, None, :]
    elif jacobian not in ("picard", "exact"):
        raise ValueError(f"unknown jacobian kind {jacobian!r}")
    blocks = {k: v.ravel() for k, v in kblk.items()}

    ifc = {k: ([], [], []) for k in ("tt", "pp", "pt")}

    ip = params.interface
    if len(mesh.interfaces) and not ip.perfect:
        ia = mesh.interfaces
        L_seg = geom["iface_len"]
        a_nodes, b_nodes = ia[:, 0:2], ia[:, 2:4]
        if mode == "fluctuation":
            if fluct is None:
                raise ValueError("fluctuation assembly needs the fluct pair")
            fl_t, fl_p = fluct
        for s_pos, gw in zip(_GP, _GW):
            n1, n2 = 1.0 - s_pos, s_pos
            w = gw * L_seg
            thA = state.theta[ia[:, 0:2]]
            thB = state.theta[ia[:, 2:4]]
            phA = clamp(state.phi[ia[:, 0:2]])
            phB = clamp(state.phi[ia[:, 2:4]])
            th1 = n1 * thA[:, 0] + n2 * thA[:, 1]
            th2 = n1 * thB[:, 0] + n2 * thB[:, 1]
            ph1 = n1 * phA[:, 0] + n2 * phA[:, 1]
            ph2 = n1 * phB[:, 0] + n2 * phB[:, 1]
            # side differences are interpolated from exact nodal differences
            # so near-tied states do not lose the jump to cancellation
            jth = n1 * (thA[:, 0] - thB[:, 0]) + n2 * (thA[:, 1] - thB[:, 1])
            jph = n1 * (phA[:, 0] - phB[:, 0]) + n2 * (phA[:, 1] - phB[:, 1])
            if freeze is not None:
                ones = np.ones(len(L_seg))
                dth1, dph1 = mat.capillary_pressure_slopes(
                    float(freeze[0]), float(freeze[1]), cst)
                dth1, dph1 = dth1 * ones, dph1 * ones
                dth2, dph2 = dth1, dph1
            else:
                dth1, dph1 = mat.capillary_pressure_slopes(th1, ph1, cst)
                dth2, dph2 = mat.capillary_pressure_slopes(th2, ph2, cst)

            f_q = ip.alpha_int * jth                    # heat, side1 -> side2
            if freeze is not None:
                f_m = -ip.beta_int * (dth1 * jth + dph1 * jph)
            elif mode == "fluctuation":
                r_t2 = n1 * fl_t[ia[:, 2]] + n2 * fl_t[ia[:, 3]]
                r_p2 = n1 * fl_p[ia[:, 2]] + n2 * fl_p[ia[:, 3]]
                j_rt = (n1 * (fl_t[ia[:, 2]] - fl_t[ia[:, 0]])
                        + n2 * (fl_t[ia[:, 3]] - fl_t[ia[:, 1]]))
                j_rp = (n1 * (fl_p[ia[:, 2]] - fl_p[ia[:, 0]])
                        + n2 * (fl_p[ia[:, 3]] - fl_p[ia[:, 1]]))
                f_m = ip.beta_int * (dth1 * j_rt + (dth2 - dth1) * r_t2
                                     + dph1 * j_rp + (dph2 - dph1) * r_p2)
            else:
                # capillary pressure difference in cancellation-free form:
                # pc2 - pc1 = -c [T2 ln(ph2/ph1) + (th2 - th1) ln ph1]
                crm = cst.rho_w * cst.R / cst.M_w
                pcdiff = -crm * ((th2 + mat.T0_K) * np.log1p(-jph / ph1)
                                 - jth * np.log(ph1))
                f_m = ip.beta_int * pcdiff              # mass, side1 -> side2

            shp = (n1, n2)
            for i in range(2):
                np.add.at(r[:N], a_nodes[:, i], w * shp[i] * f_q)
                np.add.at(r[:N], b_nodes[:, i], -w * shp[i] * f_q)
                np.add.at(r[N:], a_nodes[:, i], w * shp[i] * f_m)
                np.add.at(r[N:], b_nodes[:, i], -w * shp[i] * f_m)

            # exact tangent of the segment laws; columns keyed by side
            c_tt = (ip.alpha_int * np.ones(len(L_seg)),
                    -ip.alpha_int * np.ones(len(L_seg)))
            c_pp = (-ip.beta_int * dph1, ip.beta_int * dph2)
            c_pt = (-ip.beta_int * dth1, ip.beta_int * dth2)
            coef = {"tt": c_tt, "pp": c_pp, "pt": c_pt}
            for i in range(2):
                for j in range(2):
                    wij = w * shp[i] * shp[j]
                    for rsign, rnod in ((1.0, a_nodes), (-1.0, b_nodes)):
                        for cside, cnod in ((0, a_nodes), (1, b_nodes)):
                            for key in ("tt", "pp", "pt"):
                                rr, cc, vv = ifc[key]
                                rr.append(rnod[:, i])
                                cc.append(cnod[:, j])
                                vv.append(rsign * wij * coef[key][cside])

    def build(key):
        m = sp.coo_matrix((blocks[key], (rows, cols)), shape=(N, N)).tocsr()
        m.sum_duplicates()
        return m

    def build_ifc(key):
        # interface stiffness kept apart from bulk entries: its +/- row
        # pairs are exact float negatives, a structure that the mean/jump
        # change of basis relies on and that summing with bulk would destroy
        rr, cc, vv = ifc[key]
        m = sp.coo_matrix((np.concatenate(vv),
                           (np.concatenate(rr), np.concatenate(cc))),
                          shape=(N, N)).tocsr()
        m.sum_duplicates()
        return m

    tang = CoupledTangent(K_tt=build("tt"), K_tp=build("tp"),
                          K_pt=build("pt"), K_pp=build("pp"),
                          volume=float(area.sum()))
    if ifc["tt"][0]:
        tang.I_tt = build_ifc("tt")
        tang.I_pt = build_ifc("pt")
        tang.I_pp = build_ifc("pp")

    if mode == "transient":
        if dt is None or prev is None:
            raise ValueError("transient assembly needs dt and prev")
        C_t = np.zeros(N)
        C_p = np.zeros(N)
        w3 = area / 3.0
        np.add.at(C_t, tris, np.broadcast_to((w3 * cap_t)[:, None], (E, 3)))
        np.add.at(C_p, tris, np.broadcast_to((w3 * cap_p)[:, None], (E, 3)))
        tang.C_t, tang.C_p = C_t, C_p
        r[:N] += C_t * (state.theta - prev.theta) / dt
        r[N:] += C_p * (state.phi - prev.phi) / dt

    if mode == "fluctuation":
        L_tt = np.zeros((N, 2))
        L_tp = np.zeros((N, 2))
        L_pt = np.zeros((N, 2))
        L_pp = np.zeros((N, 2))
        Bt = B.transpose(0, 2, 1) * area[:, None, None]     # (E,3,2)
        np.add.at(L_tt, tris, ktt[:, None, None] * Bt)
        np.add.at(L_tp, tris, ktp[:, None, None] * Bt)
        np.add.at(L_pt, tris, kpt[:, None, None] * Bt)
        np.add.at(L_pp, tris, kpp[:, None, None] * Bt)
        tang.L_tt, tang.L_tp, tang.L_pt, tang.L_pp = L_tt, L_tp, L_pt, L_pp
        tang.km = np.array([[float((ktt * area).sum()), float((ktp * area).sum())],
                            [float((kpt * area).sum()), float((kpp * area).sum())]])

    if clamp_events:
        total = int(sum(clamp_events))
        log.warning("clamped %d phi evaluations into [%g, 1]", total, mat.PHI_FLOOR)
        if clamp_counter is not None:
            clamp_counter.append(total)

    return tang, r


# ------------------------------------------------------------------- solving

class EquilibratedFactor:
    """LU factorization of D A D with symmetric diagonal equilibration,
    reusable for several right-hand sides."""

    def __init__(self, A):
        d = np.sqrt(np.abs(A.diagonal()))
        d[d == 0] = 1.0
        self._dinv = 1.0 / d
        Dinv = sp.diags(self._dinv)
        self._lu = spla.splu((Dinv @ A @ Dinv).tocsc())

    def solve(self, b):
        return self._dinv * self._lu.solve(self._dinv * b)


def solve_sparse(A, b):
    """Direct sparse solve with symmetric diagonal equilibration."""
    if A.shape[0] == 0:
        return np.zeros(0)
    return EquilibratedFactor(A.tocsr()).solve(b)


class ReducedSolver:
    """Factorization of the reduced tangent with optional mean/jump basis.

    Bulk and interface operators are restricted and basis-transformed
    separately before being summed: interface penalty entries cancel
    exactly in the mean rows of the transformed matrix, which would be
    impossible after they had been rounded into bulk-scale entries.
    """

    def __init__(self, tang, dofmap, basis=None, cap_over_dt=None):
        bulk, ifc_m = tang.stiffness_split()
        if cap_over_dt is not None:
            bulk = bulk + sp.diags(cap_over_dt)
        T = dofmap.T
        self._basis = basis
        if basis is None:
            A = bulk if ifc_m is None else bulk + ifc_m
            A = (T.T @ A @ T).tocsr()
        else:
            A = basis.T @ (T.T @ bulk @ T) @ basis
            if ifc_m is not None:
                A = A + basis.T @ (T.T @ ifc_m @ T) @ basis
            A = A.tocsr()
        self._fac = EquilibratedFactor(A)

    def solve(self, rhs_red):
        """Solution of the reduced system and its norm in solve variables."""
        if self._basis is None:
            x = self._fac.solve(rhs_red)
            return x, float(np.linalg.norm(x))
        v = self._fac.solve(self._basis.T @ rhs_red)
        return self._basis @ v, float(np.linalg.norm(v))

    def norm(self, rhs_red):
        """Natural norm ||A^-1 rhs|| measured in solve variables."""
        return self.solve(rhs_red)[1]


def linear_solve(mesh, state0: NodalState, params, dofmap: DofMap, u_fix,
                 *, freeze, sources=None, basis=None, time=0.0):
    """One-shot steady solve of the frozen-coefficient (linear) operator.

    With transport coefficients and interface slopes frozen at a single
    state the Galerkin system is exactly linear, so a single factorization
    suffices and no residual-based convergence test is needed.  This is the
    appropriate solver when interface penalties are so stiff that the
    out-of-balance residual cannot be evaluated below its cancellation
    floor; pair it with a jump_basis to keep the factorization accurate.
    Returns (state, info).
    """
    if freeze is None:
        raise ValueError("linear_solve requires a freeze state")
    u0 = dofmap.impose(state0.vector(), u_fix)
    st0 = NodalState.from_vector(u0, time)
    tang, r = assemble(mesh, st0, params, "steady", sources=sources,
                       freeze=freeze)
    du_red, _ = ReducedSolver(tang, dofmap, basis).solve(-(dofmap.T.T @ r))
    u = u0 + dofmap.T @ du_red
    return NodalState.from_vector(u, time), {"tangent": tang}


def newton_solve(mesh, state0: NodalState, params, dofmap: DofMap, u_fix,
                 *, mode="steady", dt=None, prev=None, affine=None,
                 sources=None, tol=1e-8, max_iter=25, time=0.0, freeze=None,
                 jacobian="picard", xtol=None, basis=None):
    """Modified Newton iteration with frozen-coefficient tangents.

    The residual is the true nonlinear out-of-balance, so converged states
    solve the nonlinear Galerkin system; the iteration matrix freezes
    transport coefficients at the current iterate. Convergence criterion:
    ||r_red|| <= tol (1 + ||r_red at start||).

    state0 holds the initial guess of the primary unknown: the total field
    in steady/transient mode, the fluctuation in fluctuation mode (where
    affine is the 2N background vector added before evaluating physics).
    Trial steps are backtracked (halved) until the residual norm decreases
    or the trial state re-enters the constitutive validity range.

    xtol, if given, additionally accepts the iterate once the accepted
    update satisfies max|du| <= xtol max(1, max|u|); needed for penalty
    interfaces where cancellation puts a floor under the residual norm.
    basis, if given, is a reduced-space change of basis (see jump_basis)
    applied around every linear solve; it does not change the unknowns,
    only the conditioning of the factorized matrix.
    Returns (state, info); info carries trace, iterations, clamp events and
    the tangent assembled at the converged state.
    """
    clamps = []

    def evaluate(u_vec):
        if affine is not None:
            st = NodalState.from_vector(u_vec + affine, time)
            fluct = (u_vec[:mesh.n_nodes], u_vec[mesh.n_nodes:])
        else:
            st = NodalState.from_vector(u_vec, time)
            fluct = None
        tang, r = assemble(mesh, st, params, mode, dt=dt, prev=prev,
                           fluct=fluct, sources=sources, clamp_counter=clamps,
                           freeze=freeze, jacobian=jacobian)
        r_red = dofmap.T.T @ r
        return tang, r_red, float(np.linalg.norm(r_red))

    u = dofmap.impose(state0.vector(), u_fix)
    tang, r_red, rn = evaluate(u)
    r0_norm = rn
    trace = [{"iteration": 0, "residual": rn, "dt": dt, "step": None}]
    log.debug("newton it=0 residual=%.6e dt=%s", rn, dt)
    max_backtracks = 10
    for it in range(1, max_iter + 1):
        if rn <= tol * (1.0 + r0_norm):
            return NodalState.from_vector(u, time), {
                "iterations": it - 1, "trace": trace,
                "clamp_events": int(sum(clamps)), "residual": rn,
                "tangent": tang}
        cap = tang.capacity_diagonal() / dt if mode == "transient" else None
        fac = ReducedSolver(tang, dofmap, basis, cap_over_dt=cap)
        du_red, ndu = fac.solve(-r_red)
        du = dofmap.T @ du_red
        # affine-invariant (natural) monotonicity: progress is measured as
        # ||J_k^{-1} r(trial)|| with the factorization of this iteration,
        # which keeps badly scaled penalty rows from masking real progress
        step = 1.0
        accepted = None
        for bt in range(max_backtracks + 1):
            u_try = u + step * du
            try:
                res = evaluate(u_try)
            except DomainError:
                step *= 0.5
                continue
            nat = fac.norm(-res[1])
            if nat <= (1.0 - 0.5 * step) * ndu or bt == max_backtracks:
                accepted = (u_try, res)
                break
            step *= 0.5
        if accepted is None:
            raise ConvergenceError(
                f"all trial steps left the validity range at iteration {it}",
                trace=trace)
        u, (tang, r_red, rn) = accepted
        trace.append({"iteration": it, "residual": rn, "dt": dt, "step": step})
        log.debug("newton it=%d residual=%.6e step=%g dt=%s", it, rn, step, dt)
        if xtol is not None and step * np.abs(du).max() <= xtol * max(
                1.0, float(np.abs(u).max())):
            return NodalState.from_vector(u, time), {
                "iterations": it, "trace": trace,
                "clamp_events": int(sum(clamps)), "residual": rn,
                "tangent": tang, "stagnated": True}
    if rn <= tol * (1.0 + r0_norm):
        return NodalState.from_vector(u, time), {
            "iterations": max_iter, "trace": trace,
            "clamp_events": int(sum(clamps)), "residual": rn, "tangent": tang}
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations "
        f"(residual {trace[-1]['residual']:.3e})", trace=trace)


def step_transient(mesh, state_n: NodalState, dt, params, dofmap, bc_values,
                   *, tol=1e-8, max_iter=25, max_halvings=5, sources=None,
                   jacobian="picard", basis=None):
    """Advance one implicit step of size dt, halving on Newton failure.

    bc_values(t) must return the full-length fixed vector for time t.
    After a failed sub-step the size is halved (at most max_halvings times)
    and sub-stepping continues until state_n.time + dt is reached.
    Returns (state, info) with accumulated iteration counts.
    """
    t_target = state_n.time + dt
    cur = state_n
    sub_dt = dt
    halvings = 0
    info = {"newton_iterations": 0, "clamp_events": 0, "sub_steps": 0,
            "halvings_used": 0}
    while cur.time < t_target - 1e-9 * max(dt, 1.0):
        step = min(sub_dt, t_target - cur.time)
        t_new = cur.time + step
        u_fix = bc_values(t_new)
        try:
            nxt, sinfo = newton_solve(mesh, cur, params, dofmap, u_fix,
                                      mode="transient", dt=step, prev=cur,
                                      tol=tol, max_iter=max_iter,
                                      sources=sources, time=t_new,
                                      jacobian=jacobian, basis=basis)
        except (ConvergenceError, StepRejection, DomainError) as exc:
            halvings += 1
            info["halvings_used"] = halvings
            if halvings > max_halvings:
                raise ConvergenceError(
                    f"step failed after {max_halvings} halvings at "
                    f"t={cur.time:g}", trace=getattr(exc, "trace", [])) from exc
            sub_dt = step / 2.0
            log.debug("halving dt to %g at t=%g", sub_dt, cur.time)
            continue
        cur = nxt
        info["newton_iterations"] += sinfo["iterations"]
        info["clamp_events"] += sinfo["clamp_events"]
        info["sub_steps"] += 1
    return cur, info


def reaction_fluxes(mesh, state, params, mode="steady", **kw):
    """Residual at a converged state; entries at fixed dofs are consistent
    nodal boundary fluxes (positive sign = flux entering the domain through
    that node's weak-form row)."""
    _, r = assemble(mesh, state, params, mode, **kw)
    return r
