"""Structured triangular meshes for masonry cross sections and unit cells.

Geometry is described as a set of axis-aligned rectangles with phase labels
covering a bounding box. The mesher cuts the box along all rectangle edges,
subdivides to a target size, splits each cell into two triangles, then
duplicates nodes along brick-mortar material lines so zero-thickness
4-node interface segments can carry jump laws. Boundary edges are marked
left/right/bottom/top; unit cells additionally get periodic node pairs.

All generation is deterministic: no randomness, fixed diagonal direction,
fixed numbering order.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError

MARKERS = ("left", "right", "bottom", "top")
MESH_FORMAT_VERSION = 1
_TOL = 1e-10


@dataclass
class Mesh:
    """Triangulated two-phase domain with explicit interface segments.

    interfaces rows are (a1, a2, b1, b2): nodes a_i and b_i are coincident,
    side a and side b belong to the two adjacent triangles. periodic_pairs
    rows are (master, slave, axis) with axis 0 = x, 1 = y.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    tri_phase: np.ndarray
    phase_names: tuple
    interfaces: np.ndarray
    interface_id: np.ndarray
    boundary_edges: np.ndarray
    boundary_marker: np.ndarray
    periodic_pairs: np.ndarray
    _geom: dict = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def bbox(self):
        return (self.nodes[:, 0].min(), self.nodes[:, 0].max(),
                self.nodes[:, 1].min(), self.nodes[:, 1].max())

    def boundary_nodes(self, marker=None):
        """Unique node ids on the outer boundary (optionally one side)."""
        if marker is None:
            sel = self.boundary_edges
        else:
            m = MARKERS.index(marker)
            sel = self.boundary_edges[self.boundary_marker == m]
        return np.unique(sel)

    def corner_nodes(self):
        """All node copies sitting at the four bounding-box corners."""
        x0, x1, y0, y1 = self.bbox
        out = []
        for cx, cy in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
            hit = np.where((np.abs(self.nodes[:, 0] - cx) < _TOL)
                           & (np.abs(self.nodes[:, 1] - cy) < _TOL))[0]
            out.extend(hit.tolist())
        return np.array(sorted(set(out)), dtype=int)

    def phase_area(self, pid):
        a = tri_areas(self.nodes, self.triangles)
        return float(a[self.tri_phase == pid].sum())

    def total_area(self):
        return float(tri_areas(self.nodes, self.triangles).sum())


def tri_areas(nodes, triangles):
    p = nodes[triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


# ------------------------------------------------------------------ specs

@dataclass(frozen=True)
class PucSpec:
    """Running-bond unit cell cut through brick centers.

    The cell is one brick plus one head joint wide and two courses tall;
    the cut passes through brick mid-planes so no material line coincides
    with the periodic boundary.
    """

    brick_w: float = 0.29   # m
    brick_h: float = 0.065  # m
    head_t: float = 0.01    # m
    bed_t: float = 0.01     # m
    target: float = 0.012   # m

    def __post_init__(self):
        _check_dims(self.__dict__, ("brick_w", "brick_h", "head_t", "bed_t", "target"))
        if self.head_t >= self.brick_w:
            raise MeshError(f"head_t={self.head_t} must be smaller than brick_w={self.brick_w}")
        if self.bed_t >= self.brick_h:
            raise MeshError(f"bed_t={self.bed_t} must be smaller than brick_h={self.brick_h}")

    @property
    def width(self):
        return self.brick_w + self.head_t

    @property
    def height(self):
        return 2.0 * (self.brick_h + self.bed_t)


@dataclass(frozen=True)
class WallSpec:
    """Laboratory wall block: n_cols x n_courses bricks with mortar joints.

    Exterior face is the left boundary, interior face the right one.
    Odd courses are shifted by half a module when bond='running'.
    """

    brick_w: float = 0.29
    brick_h: float = 0.065
    head_t: float = 0.01
    bed_t: float = 0.01
    n_cols: int = 1
    n_courses: int = 2
    bond: str = "running"
    target: float = 0.012

    def __post_init__(self):
        _check_dims(self.__dict__, ("brick_w", "brick_h", "head_t", "bed_t", "target"))
        if self.n_cols < 1 or self.n_courses < 1:
            raise MeshError("n_cols and n_courses must be >= 1")
        if self.bond not in ("running", "stack"):
            raise MeshError(f"unknown bond pattern {self.bond!r}")

    @property
    def width(self):
        return self.n_cols * self.brick_w + (self.n_cols - 1) * self.head_t

    @property
    def height(self):
        return self.n_courses * self.brick_h + (self.n_courses - 1) * self.bed_t


def _check_dims(d, keys):
    for k in keys:
        if not d[k] > 0:
            raise MeshError(f"dimension {k} must be > 0, got {d[k]}")


# --------------------------------------------------------------- generation

def _cuts(marks, lo, hi, target):
    marks = sorted({lo, hi, *marks})
    cuts = [lo]
    for a, b in zip(marks, marks[1:]):
        n = max(1, int(np.ceil((b - a) / target - 1e-9)))
        cuts.extend((a + (b - a) * np.arange(1, n + 1) / n).tolist())
    return np.array(cuts)


def mesh_rectangles(rects, phase_names, target, periodic=False):
    """Mesh a list of (x0, x1, y0, y1, phase_index) rectangles.

    Rectangles must tile the bounding box exactly (checked by area).
    """
    rects = [tuple(r) for r in rects]
    xs = [r[0] for r in rects] + [r[1] for r in rects]
    ys = [r[2] for r in rects] + [r[3] for r in rects]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    area_sum = sum((r[1] - r[0]) * (r[3] - r[2]) for r in rects)
    if abs(area_sum - (x1 - x0) * (y1 - y0)) > 1e-9 * (x1 - x0) * (y1 - y0):
        raise MeshError("rectangles do not tile the bounding box")

    cx = _cuts([r[0] for r in rects] + [r[1] for r in rects], x0, x1, target)
    cy = _cuts([r[2] for r in rects] + [r[3] for r in rects], y0, y1, target)
    nx, ny = len(cx), len(cy)

    xv, yv = np.meshgrid(cx, cy, indexing="ij")
    nodes = np.column_stack([xv.ravel(), yv.ravel()])

    def nid(ix, iy):
        return ix * ny + iy

    # phase per grid cell from the rectangle list
    cell_phase = -np.ones((nx - 1, ny - 1), dtype=int)
    for (rx0, rx1, ry0, ry1, pid) in rects:
        i0 = int(np.searchsorted(cx, rx0 - _TOL))
        i1 = int(np.searchsorted(cx, rx1 - _TOL))
        j0 = int(np.searchsorted(cy, ry0 - _TOL))
        j1 = int(np.searchsorted(cy, ry1 - _TOL))
        cell_phase[i0:i1, j0:j1] = pid
    if np.any(cell_phase < 0):
        raise MeshError("uncovered cells in rectangle layout")

    tris, phases = [], []
    for i in range(nx - 1):
        for j in range(ny - 1):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
            phases.extend([cell_phase[i, j]] * 2)
    triangles = np.array(tris, dtype=int)
    tri_phase = np.array(phases, dtype=int)

    mesh = _split_interfaces(nodes, triangles, tri_phase, tuple(phase_names))
    _extract_boundary(mesh)
    if periodic:
        _pair_periodic(mesh)
    _freeze(mesh)
    return mesh


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def _split_interfaces(nodes, triangles, tri_phase, phase_names):
    """Duplicate nodes along material lines; build 4-node interface rows.

    Around each vertex the incident triangles are grouped into sectors
    separated by interface edges; every sector beyond the first receives a
    node copy. Handles straight runs, T-junctions and lines ending on the
    outer boundary in one pass.
    """
    ne = triangles.shape[0]
    edge_tris = {}
    for t in range(ne):
        a, b, c = triangles[t]
        for u, v in ((a, b), (b, c), (c, a)):
            edge_tris.setdefault(_edge_key(u, v), []).append(t)

    iface_edges = {k for k, ts in edge_tris.items()
                   if len(ts) == 2 and tri_phase[ts[0]] != tri_phase[ts[1]]}

    vert_tris = {}
    for t in range(ne):
        for v in triangles[t]:
            vert_tris.setdefault(int(v), []).append(t)

    new_tris = triangles.copy()
    new_coords = [nodes]
    next_id = nodes.shape[0]
    # per original vertex: list of (sector triangle set, assigned node id)
    sector_of = {}

    for v, ts in vert_tris.items():
        # union-find over incident triangles, joined across non-interface edges at v
        parent = {t: t for t in ts}

        def find(t):
            while parent[t] != t:
                parent[t] = parent[parent[t]]
                t = parent[t]
            return t

        for k, et in edge_tris.items():
            if v in k and len(et) == 2 and k not in iface_edges:
                ra, rb = find(et[0]), find(et[1])
                if ra != rb:
                    parent[ra] = rb
        groups = {}
        for t in ts:
            groups.setdefault(find(t), []).append(t)
        comps = sorted(groups.values(), key=min)
        ids = []
        for k, comp in enumerate(comps):
            if k == 0:
                ids.append((set(comp), v))
            else:
                ids.append((set(comp), next_id))
                new_coords.append(nodes[v][None, :])
                for t in comp:
                    tri = new_tris[t]
                    tri[tri == v] = next_id
                next_id += 1
        sector_of[v] = ids

    all_nodes = np.vstack(new_coords)

    def node_in_tri(v, t):
        for sec, nid_ in sector_of[v]:
            if t in sec:
                return nid_
        raise AssertionError("triangle not found in any sector")

    # interface segments with side a = lower phase id
    rows, edge_list = [], []
    for k in sorted(iface_edges):
        t1, t2 = edge_tris[k]
        if tri_phase[t1] > tri_phase[t2]:
            t1, t2 = t2, t1
        v1, v2 = k
        rows.append((node_in_tri(v1, t1), node_in_tri(v2, t1),
                     node_in_tri(v1, t2), node_in_tri(v2, t2)))
        edge_list.append(k)
    interfaces = (np.array(rows, dtype=int) if rows
                  else np.zeros((0, 4), dtype=int))

    # polyline ids: connected components of interface edges over original vertices
    iface_id = np.zeros(len(edge_list), dtype=int)
    if edge_list:
        parent = {}

        def find2(x):
            parent.setdefault(x, x)
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for (u, v) in edge_list:
            ru, rv = find2(u), find2(v)
            if ru != rv:
                parent[ru] = rv
        roots = {}
        for i, (u, _) in enumerate(edge_list):
            r = find2(u)
            iface_id[i] = roots.setdefault(r, len(roots))

    return Mesh(nodes=all_nodes, triangles=new_tris, tri_phase=tri_phase,
                phase_names=phase_names, interfaces=interfaces,
                interface_id=iface_id,
                boundary_edges=np.zeros((0, 2), dtype=int),
                boundary_marker=np.zeros(0, dtype=int),
                periodic_pairs=np.zeros((0, 3), dtype=int))


def _extract_boundary(mesh):
    edge_count = {}
    for tri in mesh.triangles:
        a, b, c = tri
        for u, v in ((a, b), (b, c), (c, a)):
            edge_count[_edge_key(u, v)] = edge_count.get(_edge_key(u, v), 0) + 1
    # after node splitting each interface side has a single adjacent triangle;
    # those edges are internal, not boundary
    iface_sides = set()
    for a1, a2, b1, b2 in mesh.interfaces:
        iface_sides.add(_edge_key(a1, a2))
        iface_sides.add(_edge_key(b1, b2))
    x0, x1, y0, y1 = mesh.bbox
    edges, marks = [], []
    for (u, v), cnt in sorted(edge_count.items()):
        if cnt != 1 or (u, v) in iface_sides:
            continue
        pu, pv = mesh.nodes[u], mesh.nodes[v]
        if abs(pu[0] - x0) < _TOL and abs(pv[0] - x0) < _TOL:
            m = 0
        elif abs(pu[0] - x1) < _TOL and abs(pv[0] - x1) < _TOL:
            m = 1
        elif abs(pu[1] - y0) < _TOL and abs(pv[1] - y0) < _TOL:
            m = 2
        elif abs(pu[1] - y1) < _TOL and abs(pv[1] - y1) < _TOL:
            m = 3
        else:
            raise MeshError(f"boundary edge ({u},{v}) not on the bounding box")
        edges.append((u, v))
        marks.append(m)
    mesh.boundary_edges = np.array(edges, dtype=int)
    mesh.boundary_marker = np.array(marks, dtype=int)


def _side_signature(mesh, node, transverse_axis):
    """Mean transverse offset of incident triangle centroids; orders copies."""
    mask = np.any(mesh.triangles == node, axis=1)
    cent = mesh.nodes[mesh.triangles[mask]].mean(axis=1)
    return float((cent[:, transverse_axis] - mesh.nodes[node, transverse_axis]).mean())


def _pair_periodic(mesh):
    x0, x1, y0, y1 = mesh.bbox
    W, H = x1 - x0, y1 - y0
    corners = set(mesh.corner_nodes().tolist())
    pairs = []
    for axis, lo_m, hi_m, period in ((0, "left", "right", W), (1, "bottom", "top", H)):
        lo_nodes = [n for n in mesh.boundary_nodes(lo_m) if n not in corners]
        hi_nodes = [n for n in mesh.boundary_nodes(hi_m) if n not in corners]
        if len(lo_nodes) != len(hi_nodes):
            raise MeshError(
                f"opposite boundaries {lo_m}/{hi_m} have {len(lo_nodes)} vs "
                f"{len(hi_nodes)} nodes; geometry not periodic")
        tr = 1 - axis

        def keyed(ns):
            return sorted(ns, key=lambda n: (round(mesh.nodes[n, tr], 9),
                                             _side_signature(mesh, n, tr)))

        for a, b in zip(keyed(lo_nodes), keyed(hi_nodes)):
            da = abs(mesh.nodes[b, axis] - mesh.nodes[a, axis] - period)
            dt = abs(mesh.nodes[b, tr] - mesh.nodes[a, tr])
            if da > _TOL or dt > _TOL:
                raise MeshError(f"periodic candidates {a},{b} differ by "
                                f"({da:g},{dt:g}), not one period")
            pairs.append((a, b, axis))
    mesh.periodic_pairs = (np.array(pairs, dtype=int) if pairs
                           else np.zeros((0, 3), dtype=int))


def _freeze(mesh):
    for arr in (mesh.nodes, mesh.triangles, mesh.tri_phase, mesh.interfaces,
                mesh.interface_id, mesh.boundary_edges, mesh.boundary_marker,
                mesh.periodic_pairs):
        arr.setflags(write=False)


# ------------------------------------------------------------- public makers

BRICK_PHASE, MORTAR_PHASE = 0, 1
_PHASES = ("brick", "mortar")


def generate_puc(spec: PucSpec = PucSpec()):
    """Running-bond periodic unit cell (brick-centered cut)."""
    W, H = spec.width, spec.height
    bw, bh, ht, bt = spec.brick_w, spec.brick_h, spec.head_t, spec.bed_t
    r = []
    # bottom half course: head joint halves at the lateral boundaries
    y0, y1 = 0.0, bh / 2
    r += [(0.0, ht / 2, y0, y1, MORTAR_PHASE),
          (ht / 2, W - ht / 2, y0, y1, BRICK_PHASE),
          (W - ht / 2, W, y0, y1, MORTAR_PHASE)]
    r += [(0.0, W, y1, y1 + bt, MORTAR_PHASE)]
    # full middle course: head joint centered
    y0, y1 = y1 + bt, y1 + bt + bh
    r += [(0.0, W / 2 - ht / 2, y0, y1, BRICK_PHASE),
          (W / 2 - ht / 2, W / 2 + ht / 2, y0, y1, MORTAR_PHASE),
          (W / 2 + ht / 2, W, y0, y1, BRICK_PHASE)]
    r += [(0.0, W, y1, y1 + bt, MORTAR_PHASE)]
    # top half course mirrors the bottom one
    y0, y1 = y1 + bt, H
    r += [(0.0, ht / 2, y0, y1, MORTAR_PHASE),
          (ht / 2, W - ht / 2, y0, y1, BRICK_PHASE),
          (W - ht / 2, W, y0, y1, MORTAR_PHASE)]
    return mesh_rectangles(r, _PHASES, spec.target, periodic=True)


def generate_wall_sample(spec: WallSpec = WallSpec()):
    """Laboratory block of bricks and mortar joints (non-periodic)."""
    W = spec.width
    rects = []
    y = 0.0
    module = spec.brick_w + spec.head_t
    for course in range(spec.n_courses):
        off = module / 2 if (spec.bond == "running" and course % 2 == 1) else 0.0
        x = -off
        while x < W - _TOL:
            bx0, bx1 = max(x, 0.0), min(x + spec.brick_w, W)
            if bx1 - bx0 > _TOL:
                rects.append((bx0, bx1, y, y + spec.brick_h, BRICK_PHASE))
            jx0, jx1 = max(x + spec.brick_w, 0.0), min(x + module, W)
            if jx1 - jx0 > _TOL:
                rects.append((jx0, jx1, y, y + spec.brick_h, MORTAR_PHASE))
            x += module
        y += spec.brick_h
        if course < spec.n_courses - 1:
            rects.append((0.0, W, y, y + spec.bed_t, MORTAR_PHASE))
            y += spec.bed_t
    return mesh_rectangles(rects, _PHASES, spec.target, periodic=False)


def generate_layered(layers, height, target, periodic=False, phase_names=_PHASES):
    """Vertical strips [(phase_index, width), ...], flux direction x."""
    if height <= 0 or target <= 0:
        raise MeshError("height and target must be > 0")
    rects, x = [], 0.0
    for pid, wid in layers:
        if wid <= 0:
            raise MeshError(f"layer width must be > 0, got {wid}")
        rects.append((x, x + wid, 0.0, height, int(pid)))
        x += wid
    return mesh_rectangles(rects, phase_names, target, periodic=periodic)


def generate_laminate_puc(t_brick, t_mortar, height, target):
    """Periodic laminate cell layered along x, cut through the brick layer.

    Layer sequence brick/2 | mortar | brick/2 keeps material lines off the
    periodic boundary.
    """
    layers = [(BRICK_PHASE, t_brick / 2), (MORTAR_PHASE, t_mortar),
              (BRICK_PHASE, t_brick / 2)]
    return generate_layered(layers, height, target, periodic=True)


def rotate90(mesh: Mesh) -> Mesh:
    """Rotate a mesh by +90 degrees about the origin: (x, y) -> (-y, x).

    Coordinates are shifted back into the positive quadrant. Boundary
    markers and periodic axes are remapped accordingly.
    """
    nodes = np.column_stack([-mesh.nodes[:, 1], mesh.nodes[:, 0]])
    nodes[:, 0] -= nodes[:, 0].min()
    # rotation keeps orientation, triangles stay valid
    marker_map = {0: 2, 1: 3, 2: 1, 3: 0}  # left->bottom, right->top, bottom->right, top->left
    new_marker = np.array([marker_map[m] for m in mesh.boundary_marker], dtype=int)
    pairs = mesh.periodic_pairs.copy()
    if len(pairs):
        swap = pairs[:, 2] == 0
        pairs[:, 2] = np.where(swap, 1, 0)
        # x-pairs become y-pairs with preserved master/slave order except the
        # old bottom->top ordering reverses under (x,y)->(-y,x)
        rev = pairs[:, 2] == 0
        pairs[rev] = pairs[rev][:, [1, 0, 2]]
    out = Mesh(nodes=nodes, triangles=mesh.triangles.copy(),
               tri_phase=mesh.tri_phase.copy(), phase_names=mesh.phase_names,
               interfaces=mesh.interfaces.copy(),
               interface_id=mesh.interface_id.copy(),
               boundary_edges=mesh.boundary_edges.copy(),
               boundary_marker=new_marker, periodic_pairs=pairs)
    _freeze(out)
    return out


# ---------------------------------------------------------------- validation

def validate(mesh: Mesh):
    """Run all mesh consistency checks; return a list of violation strings."""
    bad = []
    a = tri_areas(mesh.nodes, mesh.triangles)
    for t in np.where(a <= 0)[0]:
        bad.append(f"triangle {t} has non-positive area {a[t]:.3e}")
    if mesh.triangles.size and mesh.triangles.max() >= mesh.n_nodes:
        bad.append("triangle node index out of range")
    for s, (a1, a2, b1, b2) in enumerate(mesh.interfaces):
        for u, v, tag in ((a1, b1, "1"), (a2, b2, "2")):
            d = np.hypot(*(mesh.nodes[u] - mesh.nodes[v]))
            if d > _TOL:
                bad.append(f"interface {s} end {tag}: nodes {u},{v} separated by {d:.3e}")
        if np.hypot(*(mesh.nodes[a2] - mesh.nodes[a1])) < _TOL:
            bad.append(f"interface {s} has zero length")
    tri_set = {}
    for t, tri in enumerate(mesh.triangles):
        for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            tri_set.setdefault(_edge_key(u, v), []).append(t)
    for s, (a1, a2, b1, b2) in enumerate(mesh.interfaces):
        if _edge_key(a1, a2) not in tri_set:
            bad.append(f"interface {s} side a edge not present in any triangle")
        if _edge_key(b1, b2) not in tri_set:
            bad.append(f"interface {s} side b edge not present in any triangle")
    x0, x1, y0, y1 = mesh.bbox
    period = (x1 - x0, y1 - y0)
    for r, (m, s, ax) in enumerate(mesh.periodic_pairs):
        d = mesh.nodes[s] - mesh.nodes[m]
        exp = np.zeros(2)
        exp[ax] = period[ax]
        if np.abs(d - exp).max() > _TOL:
            bad.append(f"periodic pair {r} nodes {m},{s} offset {d} != one period in axis {ax}")
    if mesh.tri_phase.size and (mesh.tri_phase.min() < 0
                                or mesh.tri_phase.max() >= len(mesh.phase_names)):
        bad.append("triangle phase id out of range")
    return bad


# ------------------------------------------------------------- serialization

def save_text(mesh: Mesh, path):
    """Sectioned plain-text format; floats written with round-trip repr."""
    lines = [f"VERSION {MESH_FORMAT_VERSION}",
             "PHASES " + " ".join(mesh.phase_names),
             f"NODES {mesh.n_nodes}"]
    lines += [f"{repr(float(x))} {repr(float(y))}" for x, y in mesh.nodes]
    lines.append(f"TRIANGLES {mesh.n_triangles}")
    lines += [f"{i} {j} {k} {p}" for (i, j, k), p in zip(mesh.triangles, mesh.tri_phase)]
    lines.append(f"INTERFACES {len(mesh.interfaces)}")
    lines += [f"{a1} {a2} {b1} {b2} {iid}" for (a1, a2, b1, b2), iid
              in zip(mesh.interfaces, mesh.interface_id)]
    lines.append(f"BOUNDARY {len(mesh.boundary_edges)}")
    lines += [f"{u} {v} {m}" for (u, v), m in zip(mesh.boundary_edges, mesh.boundary_marker)]
    lines.append(f"PERIODIC {len(mesh.periodic_pairs)}")
    lines += [f"{m} {s} {ax}" for m, s, ax in mesh.periodic_pairs]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_text(path) -> Mesh:
    with open(path) as f:
        toks = f.read().split("\n")
    it = iter(t for t in toks if t.strip())

    def expect(tag):
        line = next(it).split()
        if line[0] != tag:
            raise MeshError(f"expected section {tag}, got {line[0]}")
        return line[1:]

    ver = int(expect("VERSION")[0])
    if ver != MESH_FORMAT_VERSION:
        raise MeshError(f"unsupported mesh format version {ver}")
    phases = tuple(expect("PHASES"))
    n = int(expect("NODES")[0])
    nodes = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
    n = int(expect("TRIANGLES")[0])
    tri_rows = np.array([[int(v) for v in next(it).split()] for _ in range(n)],
                        dtype=int).reshape(n, 4)
    n = int(expect("INTERFACES")[0])
    ifc = np.array([[int(v) for v in next(it).split()] for _ in range(n)],
                   dtype=int).reshape(n, 5)
    n = int(expect("BOUNDARY")[0])
    bnd = np.array([[int(v) for v in next(it).split()] for _ in range(n)],
                   dtype=int).reshape(n, 3)
    n = int(expect("PERIODIC")[0])
    per = np.array([[int(v) for v in next(it).split()] for _ in range(n)],
                   dtype=int).reshape(n, 3)
    mesh = Mesh(nodes=nodes, triangles=tri_rows[:, :3], tri_phase=tri_rows[:, 3],
                phase_names=phases, interfaces=ifc[:, :4], interface_id=ifc[:, 4],
                boundary_edges=bnd[:, :2], boundary_marker=bnd[:, 2],
                periodic_pairs=per)
    _freeze(mesh)
    return mesh


def to_json_dict(mesh: Mesh) -> dict:
    return {
        "schema_version": MESH_FORMAT_VERSION,
        "phase_names": list(mesh.phase_names),
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
        "tri_phase": mesh.tri_phase.tolist(),
        "interfaces": mesh.interfaces.tolist(),
        "interface_id": mesh.interface_id.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "boundary_marker": mesh.boundary_marker.tolist(),
        "periodic_pairs": mesh.periodic_pairs.tolist(),
    }


def save_json(mesh: Mesh, path):
    with open(path, "w") as f:
        json.dump(to_json_dict(mesh), f)


def load_json(path) -> Mesh:
    with open(path) as f:
        d = json.load(f)
    if d.get("schema_version") != MESH_FORMAT_VERSION:
        raise MeshError(f"unsupported mesh schema_version {d.get('schema_version')}")
    mesh = Mesh(nodes=np.array(d["nodes"], dtype=float),
                triangles=np.array(d["triangles"], dtype=int).reshape(-1, 3),
                tri_phase=np.array(d["tri_phase"], dtype=int),
                phase_names=tuple(d["phase_names"]),
                interfaces=np.array(d["interfaces"], dtype=int).reshape(-1, 4),
                interface_id=np.array(d["interface_id"], dtype=int),
                boundary_edges=np.array(d["boundary_edges"], dtype=int).reshape(-1, 2),
                boundary_marker=np.array(d["boundary_marker"], dtype=int),
                periodic_pairs=np.array(d["periodic_pairs"], dtype=int).reshape(-1, 3))
    _freeze(mesh)
    return mesh
