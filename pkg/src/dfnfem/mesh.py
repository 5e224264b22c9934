"""Structured macroscopic meshes and the radial particle mesh.

Macroscopic meshes are tensor-product grids of linear intervals (1D),
bilinear quadrilaterals (2D) or trilinear hexahedra (3D). The through-cell
direction is x for 1D/2D and z for 3D; layers are stacked along it in the
order anode-CC | anode | separator | cathode | cathode-CC, with collector
layers only in 3D.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MeshError

SUBDOMAINS = ("anode_cc", "anode", "separator", "cathode", "cathode_cc")
TAG = {name: i for i, name in enumerate(SUBDOMAINS)}
ELECTRODES = ("anode", "cathode")
ELECTROLYTE_TAGS = (TAG["anode"], TAG["separator"], TAG["cathode"])
SOLID_TAGS = (TAG["anode_cc"], TAG["anode"], TAG["cathode"], TAG["cathode_cc"])


@dataclass(frozen=True, eq=False)
class MacroMesh:
    """Macroscopic mesh with subdomain tags and tab facets.

    ``elements`` lists node ids in tensor-product (lexicographic) order of the
    local reference corners; see :func:`reference_corners`.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    tags: np.ndarray
    tab_facets: Mapping[str, np.ndarray]
    layer_thickness: Mapping[str, float]
    plane_size: tuple[float, ...]  # in-plane extents, () for 1D
    thickness_axis: int

    # unknown layout: boolean per node
    has_c: np.ndarray = field(init=False)
    has_s: np.ndarray = field(init=False)
    electrode_of_node: np.ndarray = field(init=False)  # -1, TAG["anode"] or TAG["cathode"]

    def __post_init__(self):
        n = self.nodes.shape[0]
        has_c = np.zeros(n, bool)
        has_s = np.zeros(n, bool)
        owner = np.full(n, -1, dtype=int)
        for tag in ELECTROLYTE_TAGS:
            has_c[self.elements[self.tags == tag].ravel()] = True
        for tag in SOLID_TAGS:
            has_s[self.elements[self.tags == tag].ravel()] = True
        for name in ELECTRODES:
            ids = np.unique(self.elements[self.tags == TAG[name]].ravel())
            if np.any(owner[ids] >= 0):
                raise MeshError("anode and cathode share nodes; a separator layer is required")
            owner[ids] = TAG[name]
        object.__setattr__(self, "has_c", has_c)
        object.__setattr__(self, "has_s", has_s)
        object.__setattr__(self, "electrode_of_node", owner)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def has_j(self) -> np.ndarray:
        return self.electrode_of_node >= 0

    def electrode_nodes(self, electrode: str) -> np.ndarray:
        return np.nonzero(self.electrode_of_node == TAG[electrode])[0]

    @property
    def plane_area(self) -> float:
        """Cell cross-section normal to the through-cell direction (1 in 1D)."""
        return float(np.prod(self.plane_size)) if self.plane_size else 1.0

    def element_measures(self) -> np.ndarray:
        lo = self.nodes[self.elements].min(axis=1)
        hi = self.nodes[self.elements].max(axis=1)
        return np.prod(hi - lo, axis=1)

    def facet_measures(self, tab: str) -> np.ndarray:
        facets = self.tab_facets[tab]
        if self.dim == 1:
            return np.ones(len(facets))
        pts = self.nodes[facets]
        extent = pts.max(axis=1) - pts.min(axis=1)
        extent[extent == 0] = 1.0
        return np.prod(extent, axis=1)

    def tab_node_weights(self, tab: str) -> np.ndarray:
        """Nodal vector of integral psi_k dA over the tab facets (exact for linear facets)."""
        facets = self.tab_facets[tab]
        w = np.zeros(self.n_nodes)
        share = self.facet_measures(tab) / facets.shape[1]
        np.add.at(w, facets, share[:, None] * np.ones(facets.shape[1]))
        return w

    def tab_area(self, tab: str) -> float:
        return float(self.facet_measures(tab).sum())

    def to_text(self) -> str:
        """Plain-text node/element listing for inspection."""
        lines = [f"# dim {self.dim} nodes {self.n_nodes} elements {self.n_elements}", "# nodes: id x [y [z]]"]
        for i, xyz in enumerate(self.nodes):
            lines.append(f"{i} " + " ".join(f"{v:.9e}" for v in xyz))
        lines.append("# elements: id subdomain node ids")
        for i, (conn, tag) in enumerate(zip(self.elements, self.tags)):
            lines.append(f"{i} {SUBDOMAINS[tag]} " + " ".join(map(str, conn)))
        for tab, facets in self.tab_facets.items():
            lines.append(f"# {tab}-tab facets")
            lines.extend(" ".join(map(str, f)) for f in facets)
        return "\n".join(lines) + "\n"


def reference_corners(dim: int) -> np.ndarray:
    """Corner signs of the reference cell [-1, 1]^dim in local node order."""
    return np.array([[2 * o - 1 for o in reversed(offs)] for offs in itertools.product((0, 1), repeat=dim)], float)


def _corner_offsets(dim):
    # offsets (axis 0 fastest) matching reference_corners
    return [tuple(reversed(offs)) for offs in itertools.product((0, 1), repeat=dim)]


def _layer_coordinates(layers, thickness, counts):
    coords = [0.0]
    tags = []
    for name in layers:
        n = counts[name]
        coords.extend(coords[-1] + thickness[name] * np.arange(1, n + 1) / n)
        tags.extend([TAG[name]] * n)
    coords = np.array(coords)
    return coords, np.array(tags, dtype=int)


def build_macro_mesh(
    dim: int,
    thickness: Mapping[str, float],
    counts: Mapping[str, int],
    plane_size: Sequence[float] = (),
    plane_counts: Sequence[int] = (),
    tab_extent: Mapping[str, tuple[float, float]] | None = None,
) -> MacroMesh:
    """Build a structured macroscopic mesh.

    ``thickness``/``counts`` are keyed by subdomain name. 3D meshes need the
    two collector layers; 1D/2D meshes must not have them. ``plane_size`` is
    (height,) in 2D and (width X, length Y) in 3D. In 3D the tabs lie on the
    collector faces at y = Y and ``tab_extent`` optionally restricts their
    x-range per tab (default: full edge).
    """
    if dim not in (1, 2, 3):
        raise MeshError(f"dimension must be 1, 2 or 3, got {dim}")
    layers = list(SUBDOMAINS) if dim == 3 else ["anode", "separator", "cathode"]
    extra = set(counts) - set(layers)
    if dim < 3 and extra & {"anode_cc", "cathode_cc"}:
        raise MeshError("current-collector layers exist only in 3D meshes")
    for name in layers:
        if name not in counts or name not in thickness:
            raise MeshError(f"layer {name!r} needs a thickness and an element count")
        if int(counts[name]) < 1:
            raise MeshError(f"layer {name!r} has zero elements")
        if not thickness[name] > 0:
            raise MeshError(f"layer {name!r} has non-positive thickness")
    plane_size = tuple(float(v) for v in plane_size)
    plane_counts = tuple(int(v) for v in plane_counts)
    if len(plane_size) != dim - 1 or len(plane_counts) != dim - 1:
        raise MeshError(f"{dim}D mesh needs {dim - 1} in-plane sizes and counts")
    if any(v <= 0 for v in plane_size) or any(v < 1 for v in plane_counts):
        raise MeshError("in-plane sizes and counts must be positive")

    zc, layer_tags = _layer_coordinates(layers, thickness, counts)
    plane_coords = [np.linspace(0.0, L, n + 1) for L, n in zip(plane_size, plane_counts)]
    # axis order of the grid: 1D (x), 2D (x=thickness, y), 3D (x, y, z=thickness)
    if dim == 3:
        axes = [plane_coords[0], plane_coords[1], zc]
        t_axis = 2
    else:
        axes = [zc] + plane_coords
        t_axis = 0
    shape = [len(a) for a in axes]
    grids = np.meshgrid(*axes, indexing="ij")
    # node id = i0 + n0 * (i1 + n1 * i2): axis 0 fastest
    nodes = np.stack([g.transpose(*reversed(range(dim))).ravel() for g in grids], axis=1)

    def nid(idx):
        out = 0
        stride = 1
        for d in range(dim):
            out = out + idx[d] * stride
            stride *= shape[d]
        return out

    cell_shape = [s - 1 for s in shape]
    cell_idx = np.meshgrid(*[np.arange(n) for n in cell_shape], indexing="ij")
    cell_idx = [c.transpose(*reversed(range(dim))).ravel() for c in cell_idx]
    elements = np.stack(
        [nid([cell_idx[d] + off[d] for d in range(dim)]) for off in _corner_offsets(dim)], axis=1
    )
    tags = layer_tags[cell_idx[t_axis]]

    # tabs
    tab_facets = {}
    if dim == 1:
        tab_facets["anode"] = np.array([[0]])
        tab_facets["cathode"] = np.array([[shape[0] - 1]])
    elif dim == 2:
        ys = np.arange(shape[1] - 1)
        tab_facets["anode"] = np.stack([nid([0 * ys, ys]), nid([0 * ys, ys + 1])], axis=1)
        last = shape[0] - 1
        tab_facets["cathode"] = np.stack([nid([last + 0 * ys, ys]), nid([last + 0 * ys, ys + 1])], axis=1)
    else:
        tab_extent = dict(tab_extent or {})
        jy = shape[1] - 1
        for tab, cc in (("anode", "anode_cc"), ("cathode", "cathode_cc")):
            lo, hi = tab_extent.get(tab, (0.0, plane_size[0]))
            facets = []
            kz = np.nonzero(layer_tags == TAG[cc])[0]
            for k in kz:
                for i in range(shape[0] - 1):
                    xm = 0.5 * (axes[0][i] + axes[0][i + 1])
                    if lo <= xm <= hi:
                        facets.append([nid([i, jy, k]), nid([i + 1, jy, k]),
                                       nid([i, jy, k + 1]), nid([i + 1, jy, k + 1])])
            if not facets:
                raise MeshError(f"{tab} tab extent {lo}..{hi} selects no facets")
            tab_facets[tab] = np.array(facets, dtype=int)

    return MacroMesh(
        dim=dim,
        nodes=nodes,
        elements=elements.astype(int),
        tags=tags,
        tab_facets=tab_facets,
        layer_thickness={name: float(thickness[name]) for name in layers},
        plane_size=plane_size,
        thickness_axis=t_axis,
    )


@dataclass(frozen=True, eq=False)
class MicroMesh:
    """Uniform radial particle mesh; the surface node is the last one."""

    r: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.r.size

    @property
    def surface_index(self) -> int:
        return self.r.size - 1

    @property
    def radius(self) -> float:
        return float(self.r[-1])


def build_micro_mesh(r_s: float, n_elements: int) -> MicroMesh:
    if not r_s > 0:
        raise MeshError("particle radius must be positive")
    if int(n_elements) < 1:
        raise MeshError("particle mesh needs at least one element")
    return MicroMesh(np.linspace(0.0, r_s, int(n_elements) + 1))
