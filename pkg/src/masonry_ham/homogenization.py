"""First-order upscaling of a periodic masonry cell to macroscopic transport.

A macroscopic temperature/humidity state with constant gradients is imposed
on a unit cell as an affine background; the cell answers with fluctuation
fields solving the steady coupled balance. Static condensation of the
fluctuation operator against the gradient-coupling blocks yields the 4x4
macroscopic conductivity (2x2 blocks over the two fields), and a volume
average of the local flux by direct element quadrature provides an
independent consistency check of the condensation algebra.
"""

import csv
import itertools
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import fem_core as fem
from . import material as mat
from .errors import ConfigError, ConvergenceError, DomainError, ParameterError
from .fem_core import DofMap, NodalState
from .mesh import Mesh, tri_areas

log = logging.getLogger("masonry_ham.homogenization")

SWEEP_SCHEMA_VERSION = 1

_BLOCK_NAMES = ("tt", "tp", "pt", "pp")
_COMP_NAMES = ("xx", "xy", "yx", "yy")

SWEEP_COLUMNS = (
    ["case_index", "bc_kind", "theta0", "phi0",
     "grad_theta_x", "grad_theta_y", "grad_phi_x", "grad_phi_y",
     "perfect_contact", "alpha_int", "beta_int"]
    + [f"KM_{b}_{c}" for b in _BLOCK_NAMES for c in _COMP_NAMES]
    + ["hill_mandel_residual", "status"])


# ------------------------------------------------------------------- loading

@dataclass(frozen=True)
class MacroLoadCase:
    """Imposed macroscopic state: reference values at x0 plus gradients."""

    theta0: float
    phi0: float
    grad_theta: tuple = (0.0, 0.0)
    grad_phi: tuple = (0.0, 0.0)
    x0: tuple = None
    bc_kind: str = "periodic"

    def __post_init__(self):
        if not 0.0 < self.phi0 <= 1.0:
            raise ParameterError(f"phi0 must lie in (0, 1], got {self.phi0}")
        if self.bc_kind not in ("dirichlet", "periodic"):
            raise ParameterError(
                f"bc_kind must be 'dirichlet' or 'periodic', got {self.bc_kind!r}")
        for name in ("grad_theta", "grad_phi"):
            if len(getattr(self, name)) != 2:
                raise ParameterError(f"{name} must have two components")

    def grad4(self):
        """Gradient 4-vector ordered (dTheta/dx, dTheta/dy, dPhi/dx, dPhi/dy)."""
        return np.array([*self.grad_theta, *self.grad_phi], dtype=float)

    def reference_point(self, mesh: Mesh):
        x0, x1, y0, y1 = mesh.bbox
        if self.x0 is None:
            return np.array([0.5 * (x0 + x1), 0.5 * (y0 + y1)])
        p = np.asarray(self.x0, dtype=float)
        if not (x0 - 1e-12 <= p[0] <= x1 + 1e-12
                and y0 - 1e-12 <= p[1] <= y1 + 1e-12):
            raise ConfigError(f"reference point {tuple(p)} lies outside the "
                              f"cell bounding box {mesh.bbox}")
        return p


@dataclass
class MacroConductivity:
    """Condensed macroscopic blocks plus the plain volume averages."""

    K_tt: np.ndarray
    K_tp: np.ndarray
    K_pt: np.ndarray
    K_pp: np.ndarray
    km_tt: np.ndarray
    km_tp: np.ndarray
    km_pt: np.ndarray
    km_pp: np.ndarray
    macro_flux: np.ndarray          # volume-averaged local flux, 4-vector
    hill_mandel_residual: float
    load: MacroLoadCase = None
    volume: float = 0.0

    def matrix4(self):
        return np.block([[self.K_tt, self.K_tp], [self.K_pt, self.K_pp]])

    def averages4(self):
        return np.block([[self.km_tt, self.km_tp], [self.km_pt, self.km_pp]])


def background_fields(mesh: Mesh, lc: MacroLoadCase):
    """Affine 2N background vector: value at x0 plus (x - x0).grad, per field."""
    d = mesh.nodes - lc.reference_point(mesh)
    th = lc.theta0 + d @ np.asarray(lc.grad_theta, dtype=float)
    ph = lc.phi0 + d @ np.asarray(lc.grad_phi, dtype=float)
    return np.concatenate([th, ph])


def apply_macro_load(mesh: Mesh, lc: MacroLoadCase, extra_ties=()):
    """Background fields plus the constraint set for the fluctuations.

    Returns (affine, dofmap, u_fix). Dirichlet kind pins the fluctuations
    to zero on the whole outer boundary; periodic kind ties opposite-face
    node pairs, identifies the four cell corners with each other (they are
    left out of the face pairing) and gauges the constant mode by pinning
    the corner group. extra_ties adds further equality constraints, e.g.
    contact-side continuity when the interfaces are ideal.
    """
    affine = background_fields(mesh, lc)
    n = mesh.n_nodes
    if lc.bc_kind == "dirichlet":
        bnd = mesh.boundary_nodes()
        dm = DofMap(n, fixed_theta=bnd, fixed_phi=bnd, ties=extra_ties)
    else:
        if not len(mesh.periodic_pairs):
            raise ConfigError("periodic load case on a mesh without "
                              "periodic node pairing")
        corners = mesh.corner_nodes()
        ties = (fem.periodic_ties(mesh) + [(int(corners[0]), int(c))
                                           for c in corners[1:]]
                + [(int(a), int(b)) for a, b in extra_ties])
        dm = DofMap(n, fixed_theta=[], fixed_phi=[], ties=ties,
                    pinned=[int(corners[0])])
    u_fix = dm.fixed_vector(np.zeros(len(dm.fixed_theta)),
                            np.zeros(len(dm.fixed_phi)))
    return affine, dm, u_fix


# ------------------------------------------------------------------- solving

def _config_if_singular(exc):
    if "singular" in str(exc).lower():
        return ConfigError(
            "singular fluctuation operator: a field is unconstrained "
            "(missing gauge pinning or boundary conditions)")
    return None


def _polish_gap(u_new, u_old, n, spans, refs):
    """Max per-field relative change between fluctuation iterates.

    Each field is scaled by the larger of its own magnitude and the span
    of its affine drive; a field whose magnitude is negligible against the
    reference state level counts as converged-to-zero.
    """
    gap = 0.0
    for s, span, ref in ((slice(0, n), spans[0], refs[0]),
                         (slice(n, 2 * n), spans[1], refs[1])):
        d = float(np.abs(u_new[s] - u_old[s]).max())
        scale = max(float(np.abs(u_new[s]).max()), span)
        if scale <= 1e-13 * ref:
            continue
        gap = max(gap, d / scale)
    return gap


def solve_fluctuations(mesh: Mesh, lc: MacroLoadCase, params,
                       *, tol=1e-8, max_iter=80, freeze=None,
                       jacobian="picard", polish_tol=1e-12, max_polish=30):
    """Self-consistent fluctuation solve with a linear fixed-point finish.

    A globalized nonlinear iteration brings the coefficient field close to
    self-consistency; the solution is then polished by repeated plain
    frozen-coefficient re-solves (assemble at the iterate, solve the four
    gradient columns linearly) until the per-field relative change drops
    below polish_tol. The finish serves two purposes: the returned
    operator/fluctuation pair satisfies the condensation algebra exactly,
    and each field is converged against its own scale, which a mixed-norm
    residual test cannot guarantee when the two balances differ by many
    orders of magnitude. The reported 'residual' is the true nonlinear
    out-of-balance relative to a cancellation-free norm of the gradient
    load.
    """
    ties = fem.interface_ties(mesh) if params.interface.perfect else ()
    affine, dm, u_fix = apply_macro_load(mesh, lc, extra_ties=ties)
    s0 = NodalState(np.zeros(mesh.n_nodes), np.zeros(mesh.n_nodes))
    try:
        st, n_info = fem.newton_solve(mesh, s0, params, dm, u_fix,
                                      mode="fluctuation", affine=affine,
                                      tol=tol, max_iter=max_iter,
                                      freeze=freeze, jacobian=jacobian)
    except RuntimeError as exc:
        mapped = _config_if_singular(exc)
        if mapped is None:
            raise
        raise mapped from exc

    def fluct_assemble(u_vec):
        total = NodalState.from_vector(u_vec + affine)
        return fem.assemble(mesh, total, params, "fluctuation",
                            fluct=(u_vec[:mesh.n_nodes],
                                   u_vec[mesh.n_nodes:]), freeze=freeze)

    g4 = lc.grad4()
    n = mesh.n_nodes
    spans = (float(np.ptp(affine[:n])), float(np.ptp(affine[n:])))
    refs = (1.0 + abs(lc.theta0), 2.0)
    u_hat = st.vector()
    tang = G_red = KinvG = None
    gap, prev_gap = np.inf, np.inf
    for piter in range(max_polish):
        tang, _ = fluct_assemble(u_hat)
        K_red = (dm.T.T @ tang.stiffness() @ dm.T).tocsr()
        G_red = dm.T.T @ tang.coupling()
        try:
            fac = fem.EquilibratedFactor(K_red)
            KinvG = np.column_stack([fac.solve(G_red[:, j])
                                     for j in range(4)])
        except RuntimeError as exc:
            mapped = _config_if_singular(exc)
            if mapped is None:
                raise
            raise mapped from exc
        u_new = dm.T @ (-(KinvG @ g4))
        gap = _polish_gap(u_new, u_hat, n, spans, refs)
        u_hat = u_new
        if gap <= polish_tol:
            break
        if gap >= 0.5 * prev_gap:
            # a pass that no longer halves the change has hit the floating
            # point floor of the coupled solve (a small field's absolute
            # error is set by the large field's scale); the pair
            # (operator, fluctuation) is still algebraically consistent
            log.debug("fluctuation polish floor %.2e after %d passes",
                      gap, piter + 1)
            break
        prev_gap = gap
    else:
        log.warning("fluctuation polish still contracting at %.2e after "
                    "%d passes", gap, max_polish)

    _, r_final = fluct_assemble(u_hat)
    # cancellation-free load scale: magnitudes survive both the reduction
    # map and any periodic/homogeneous cancellation of the signed load
    T_abs = abs(dm.T)
    ref = float(np.linalg.norm(T_abs.T @ np.abs(tang.coupling() @ g4)))
    resid = float(np.linalg.norm(dm.T.T @ r_final)) / max(ref, 1e-300)
    return {"fluctuation": NodalState.from_vector(u_hat),
            "affine": affine, "dofmap": dm, "tangent": tang,
            "G_red": G_red, "KinvG": KinvG, "residual": resid,
            "freeze": freeze, "polish_passes": piter + 1,
            "polish_gap": gap, "newton_info": n_info}


def average_flux(mesh: Mesh, state: NodalState, params, grad4=None,
                 *, fluct: NodalState = None, freeze=None):
    """Volume-averaged flux 4-vector by direct element quadrature.

    Transport coefficients are evaluated fresh from the constitutive
    closures at each element centroid of `state` (or at the single frozen
    pair when `freeze` is given), independently of any assembled operator.
    Element gradients come from `fluct` plus the constant `grad4` when a
    fluctuation split is given (cancellation-free for near-affine totals),
    otherwise from `state` plus `grad4`.
    """
    areas = tri_areas(mesh.nodes, mesh.triangles)
    tris = mesh.triangles
    V = float(areas.sum())
    g = np.zeros(4) if grad4 is None else np.asarray(grad4, dtype=float)
    src = state if fluct is None else fluct
    q = np.zeros(4)
    for pid in range(len(params.phases)):
        sel = mesh.tri_phase == pid
        if not np.any(sel):
            continue
        p = mesh.nodes[tris[sel]]
        x, y = p[..., 0], p[..., 1]
        inv2a = 1.0 / (2.0 * areas[sel])
        B = np.empty((int(sel.sum()), 2, 3))
        B[:, 0, 0] = (y[:, 1] - y[:, 2]) * inv2a
        B[:, 0, 1] = (y[:, 2] - y[:, 0]) * inv2a
        B[:, 0, 2] = (y[:, 0] - y[:, 1]) * inv2a
        B[:, 1, 0] = (x[:, 2] - x[:, 1]) * inv2a
        B[:, 1, 1] = (x[:, 0] - x[:, 2]) * inv2a
        B[:, 1, 2] = (x[:, 1] - x[:, 0]) * inv2a
        gth = np.einsum("eij,ej->ei", B, src.theta[tris[sel]]) + g[None, 0:2]
        gph = np.einsum("eij,ej->ei", B, src.phi[tris[sel]]) + g[None, 2:4]
        if freeze is not None:
            ones = np.ones(int(sel.sum()))
            thc, phc = float(freeze[0]) * ones, float(freeze[1]) * ones
        else:
            thc = state.theta[tris[sel]].mean(axis=1)
            phc = mat.clamp_phi(state.phi[tris[sel]].mean(axis=1))
        ktt, ktp, kpt, kpp = mat.transport_coefficients(
            thc, phc, params.phases[pid], params.constants)
        w = areas[sel]
        q[0:2] -= (np.einsum("e,ei->i", w * ktt, gth)
                   + np.einsum("e,ei->i", w * ktp, gph))
        q[2:4] -= (np.einsum("e,ei->i", w * kpt, gth)
                   + np.einsum("e,ei->i", w * kpp, gph))
    return q / V


def _rel_gap(a, b):
    s = max(float(np.abs(a).max()), float(np.abs(b).max()))
    return float(np.abs(a - b).max() / s) if s > 0 else 0.0


def condense(mesh: Mesh, lc: MacroLoadCase, params, solution):
    """Macroscopic conductivity from a converged fluctuation solution.

    The condensed matrix uses the flux-side coupling weights, which differ
    from the transpose of the residual-side ones because the two local
    cross coefficients are unequal; the reported consistency residual is
    the per-field relative gap between -K_macro.grad and the independent
    element-quadrature flux average.
    """
    tang = solution["tangent"]
    dm = solution["dofmap"]
    V = tang.volume
    km4 = tang.km4()
    Ghat_red = (dm.T.T @ tang.flux_coupling().T).T          # (4, n_red)
    KM4 = (km4 - Ghat_red @ solution["KinvG"]) / V
    fl = solution["fluctuation"]
    total = NodalState.from_vector(solution["affine"] + fl.vector())
    q_avg = average_flux(mesh, total, params, lc.grad4(), fluct=fl,
                         freeze=solution.get("freeze"))
    q_macro = -KM4 @ lc.grad4()
    hm = max(_rel_gap(q_avg[0:2], q_macro[0:2]),
             _rel_gap(q_avg[2:4], q_macro[2:4]))
    return MacroConductivity(
        K_tt=KM4[0:2, 0:2], K_tp=KM4[0:2, 2:4],
        K_pt=KM4[2:4, 0:2], K_pp=KM4[2:4, 2:4],
        km_tt=km4[0:2, 0:2] / V, km_tp=km4[0:2, 2:4] / V,
        km_pt=km4[2:4, 0:2] / V, km_pp=km4[2:4, 2:4] / V,
        macro_flux=q_avg, hill_mandel_residual=hm, load=lc, volume=V)


def homogenize(mesh: Mesh, lc: MacroLoadCase, params, **solver_kw):
    """Fluctuation solve plus condensation in one call."""
    return condense(mesh, lc, params,
                    solve_fluctuations(mesh, lc, params, **solver_kw))


# -------------------------------------------------------------- diagnostics

def average_fluctuation_gradient(mesh: Mesh, fluct: NodalState):
    """Volume averages of the fluctuation gradients and the contact-jump
    boundary integrals that balance them.

    The Gauss identity over the split domain reads
    V <grad v> = (outer-boundary integral of v n) + sum over contact
    segments of the integral of (v_a - v_b) n_a, with n_a the unit normal
    pointing from side a into side b. For zero or periodic boundary
    fluctuations the outer term vanishes, so <grad v> equals the jump term
    divided by V, which is zero for tied contact. Returns per-field
    averages and jump integrals (already divided by V).
    """
    areas = tri_areas(mesh.nodes, mesh.triangles)
    V = float(areas.sum())
    tris = mesh.triangles
    p = mesh.nodes[tris]
    x, y = p[..., 0], p[..., 1]
    inv2a = 1.0 / (2.0 * areas)
    B = np.empty((len(areas), 2, 3))
    B[:, 0, 0] = (y[:, 1] - y[:, 2]) * inv2a
    B[:, 0, 1] = (y[:, 2] - y[:, 0]) * inv2a
    B[:, 0, 2] = (y[:, 0] - y[:, 1]) * inv2a
    B[:, 1, 0] = (x[:, 2] - x[:, 1]) * inv2a
    B[:, 1, 1] = (x[:, 0] - x[:, 2]) * inv2a
    B[:, 1, 2] = (x[:, 1] - x[:, 0]) * inv2a
    fields = (("theta", fluct.theta), ("phi", fluct.phi))
    out = {}
    jump = {name: np.zeros(2) for name, _ in fields}
    for name, v in fields:
        gv = np.einsum("eij,ej->ei", B, v[tris])
        out[name] = np.einsum("e,ei->i", areas, gv) / V
    if len(mesh.interfaces):
        node_tris = {}
        for e, tri in enumerate(tris):
            for nd in tri:
                node_tris.setdefault(int(nd), []).append(e)
        for a1, a2, b1, b2 in mesh.interfaces:
            # the side-a triangle is the one containing both side-a nodes;
            # its outward direction on the segment points a -> b
            shared = set(node_tris[int(a1)]) & set(node_tris[int(a2)])
            e = next(iter(shared))
            p1, p2 = mesh.nodes[int(a1)], mesh.nodes[int(a2)]
            t = p2 - p1
            n = np.array([t[1], -t[0]])        # length = segment length
            cent = mesh.nodes[tris[e]].mean(axis=0)
            if np.dot(n, 0.5 * (p1 + p2) - cent) < 0:
                n = -n
            for name, v in fields:
                javg = 0.5 * ((v[int(a1)] - v[int(b1)])
                              + (v[int(a2)] - v[int(b2)]))
                jump[name] += javg * n
    return {"grad_theta": out["theta"], "grad_phi": out["phi"],
            "jump_theta": jump["theta"] / V, "jump_phi": jump["phi"] / V,
            "volume": V}


# -------------------------------------------------------------------- sweeps

def sweep(mesh: Mesh, load_cases, interface_sets, params,
          csv_path=None, meta=None, **solver_kw):
    """Cartesian sweep over load cases and interface parameter sets.

    Each row is computed independently in a fixed order; a failing case is
    recorded in its row's status column and the sweep continues. Returns
    the list of row dicts; csv_path additionally writes the table plus a
    JSON metadata sidecar.
    """
    rows = []
    for idx, (lc, iset) in enumerate(itertools.product(load_cases,
                                                       interface_sets)):
        prm = params.with_interface(**iset)
        row = {
            "case_index": idx, "bc_kind": lc.bc_kind,
            "theta0": lc.theta0, "phi0": lc.phi0,
            "grad_theta_x": lc.grad_theta[0], "grad_theta_y": lc.grad_theta[1],
            "grad_phi_x": lc.grad_phi[0], "grad_phi_y": lc.grad_phi[1],
            "perfect_contact": prm.interface.perfect,
            "alpha_int": prm.interface.alpha_int,
            "beta_int": prm.interface.beta_int,
        }
        try:
            mc = homogenize(mesh, lc, prm, **solver_kw)
            m4 = mc.matrix4()
            for bi, b in enumerate(_BLOCK_NAMES):
                r0, c0 = 2 * (bi // 2), 2 * (bi % 2)
                for ci, c in enumerate(_COMP_NAMES):
                    row[f"KM_{b}_{c}"] = m4[r0 + ci // 2, c0 + ci % 2]
            row["hill_mandel_residual"] = mc.hill_mandel_residual
            row["status"] = "ok"
        except (ConvergenceError, ConfigError, ParameterError,
                DomainError) as exc:
            for b in _BLOCK_NAMES:
                for c in _COMP_NAMES:
                    row[f"KM_{b}_{c}"] = float("nan")
            row["hill_mandel_residual"] = float("nan")
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
            log.warning("sweep case %d failed: %s", idx, exc)
        rows.append(row)
    if csv_path is not None:
        write_sweep_csv(csv_path, rows, mesh, meta=meta)
    return rows


def write_sweep_csv(csv_path, rows, mesh: Mesh, meta=None):
    """Write sweep rows as CSV plus a JSON sidecar describing the schema."""
    csv_path = str(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    sidecar = {
        "schema_version": SWEEP_SCHEMA_VERSION,
        "columns": SWEEP_COLUMNS,
        "n_rows": len(rows),
        "mesh": {"n_nodes": int(mesh.n_nodes),
                 "n_triangles": int(mesh.n_triangles),
                 "n_interface_segments": int(len(mesh.interfaces))},
        "meta": meta or {},
    }
    with open(csv_path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
