"""Annulus macro mesh, structured red refinement and the blending map.

The coarse grid is a hollow regular polygon cut into congruent isosceles
trapezoids, layered radially, each trapezoid split into two triangles.  Every
macro triangle is refined uniformly (each triangle into four by its edge
midpoints), so that the levels are nested.  Curvature is carried entirely by
the :class:`BlendingMap`, which sends the polygonal domain onto the exact
annulus ``r_cmb <= |x| <= r_surface``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

INNER = 0
SURFACE = 1
CMB = 2

TAG_NAMES = {INNER: "Inner", SURFACE: "Surface", CMB: "CMB"}

# Child triangles of a red refinement, expressed through the parent's local
# vertices (0, 1, 2) and edge midpoints (3: v0v1, 4: v1v2, 5: v2v0).
_CHILDREN = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [4, 5, 3]])

# Barycentric coordinates of the six parent nodes.
_NODE_BARY = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
])

CHILD_VERTEX_BARY = _NODE_BARY[_CHILDREN]  # (4 children, 3 vertices, 3)


class DomainError(ValueError):
    """Raised when a point does not belong to the (blended) annulus."""


@dataclass(frozen=True, eq=False)
class MacroMesh:
    """Unstructured coarse triangulation of the hollow regular polygon.

    Vertices lie on ``n_radial + 1`` concentric polygons whose corner radii
    are equally spaced between ``r_cmb`` and ``r_surface``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_tags: np.ndarray
    sector: np.ndarray
    layer: np.ndarray
    n_tangential: int
    n_radial: int
    r_cmb: float
    r_surface: float

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def signed_areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def ring_radii(self) -> np.ndarray:
        return np.linspace(self.r_cmb, self.r_surface, self.n_radial + 1)

    @cached_property
    def trapezoid_triangles(self) -> np.ndarray:
        """``(n_radial, n_tangential, 2)`` table of macro triangle ids."""
        table = np.empty((self.n_radial, self.n_tangential, 2), dtype=np.int64)
        table[self.layer, self.sector, np.arange(self.n_triangles) % 2] = np.arange(self.n_triangles)
        return table

    def descriptor(self) -> str:
        return (f"annulus:{self.n_tangential}x{self.n_radial}:"
                f"{self.r_cmb!r}:{self.r_surface!r}")


def _signed_areas(vertices, triangles):
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def build_annulus_macro_mesh(n_tangential: int = 8, n_radial: int = 2,
                             r_cmb: float = 1.2037, r_surface: float = 2.2037) -> MacroMesh:
    """Build the layered trapezoid mesh of a hollow regular polygon.

    Parameters
    ----------
    n_tangential : int
        Number of polygon sides, at least 3.
    n_radial : int
        Number of radial layers of equal height, at least 1.
    r_cmb, r_surface : float
        Radii of the inner and outer circles the polygon corners lie on.
    """
    if int(n_tangential) != n_tangential or n_tangential < 3:
        raise ValueError(f"n_tangential must be an integer >= 3, got {n_tangential}")
    if int(n_radial) != n_radial or n_radial < 1:
        raise ValueError(f"n_radial must be an integer >= 1, got {n_radial}")
    if not (r_cmb > 0 and r_surface > 0):
        raise ValueError("radii must be positive")
    if r_cmb >= r_surface:
        raise ValueError(f"need r_cmb < r_surface, got {r_cmb} >= {r_surface}")
    nt, nr = int(n_tangential), int(n_radial)

    radii = np.linspace(r_cmb, r_surface, nr + 1)
    angles = 2.0 * np.pi * np.arange(nt) / nt
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    vertices = (radii[:, None, None] * ring[None, :, :]).reshape(-1, 2)
    tags = np.full((nr + 1, nt), INNER, dtype=np.int8)
    tags[0] = CMB
    tags[-1] = SURFACE

    def vid(j, k):
        return j * nt + (k % nt)

    triangles, sector, layer = [], [], []
    for j in range(nr):
        for k in range(nt):
            a, b, c, d = vid(j, k), vid(j, k + 1), vid(j + 1, k + 1), vid(j + 1, k)
            triangles += [(a, c, b), (a, d, c)]
            sector += [k, k]
            layer += [j, j]
    return MacroMesh(
        vertices=vertices,
        triangles=np.array(triangles, dtype=np.int64),
        vertex_tags=tags.ravel(),
        sector=np.array(sector, dtype=np.int64),
        layer=np.array(layer, dtype=np.int64),
        n_tangential=nt,
        n_radial=nr,
        r_cmb=float(r_cmb),
        r_surface=float(r_surface),
    )


@dataclass(frozen=True, eq=False)
class MeshLevel:
    """One refinement level in unblended coordinates.

    P2 nodes are ordered vertices first, then edge midpoints in edge order,
    which is exactly the vertex ordering of the next finer level.
    """

    level: int
    vertices: np.ndarray
    triangles: np.ndarray
    macro_id: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    vertex_tags: np.ndarray
    edge_tags: np.ndarray
    grid_index: np.ndarray  # (n_elements, 3): i, j, up(1)/down(0) inside the macro

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_p2(self) -> int:
        return self.n_vertices + self.n_edges

    @cached_property
    def p2_coordinates(self) -> np.ndarray:
        mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        return np.concatenate([self.vertices, mid])

    @cached_property
    def p2_tags(self) -> np.ndarray:
        return np.concatenate([self.vertex_tags, self.edge_tags])

    @cached_property
    def p2_dofmap(self) -> np.ndarray:
        return np.concatenate([self.triangles, self.n_vertices + self.tri_edges], axis=1)

    def node_sets(self, kind: str = "P2") -> dict[str, np.ndarray]:
        tags = self.p2_tags if kind == "P2" else self.vertex_tags
        return {name: np.flatnonzero(tags == tag) for tag, name in TAG_NAMES.items()}

    @cached_property
    def element_diameters(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        lengths = np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2)
        return lengths.max(axis=1)

    def element_diameter(self, element: int) -> float:
        return float(self.element_diameters[element])

    @cached_property
    def surface_elements(self) -> np.ndarray:
        """Boolean mask of elements with at least one node on the surface."""
        return (self.p2_tags[self.p2_dofmap] == SURFACE).any(axis=1)

    def signed_areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)


def _edges_of(triangles):
    local = np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1)
    keys = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _edge_tags(edges, tri_edges, vertex_tags):
    count = np.bincount(tri_edges.ravel(), minlength=len(edges))
    ta, tb = vertex_tags[edges[:, 0]], vertex_tags[edges[:, 1]]
    tags = np.full(len(edges), INNER, dtype=np.int8)
    on_boundary = (count == 1) & (ta == tb) & (ta != INNER)
    tags[on_boundary] = ta[on_boundary]
    return tags


def _grid_index(macro: MacroMesh, vertices, triangles, macro_id, level):
    n = 2 ** level
    mv = macro.vertices[macro.triangles[macro_id]]
    centroid = vertices[triangles].mean(axis=1)
    jac = np.stack([mv[:, 1] - mv[:, 0], mv[:, 2] - mv[:, 0]], axis=2)
    local = np.linalg.solve(jac, (centroid - mv[:, 0])[:, :, None])[:, :, 0] * n
    ij = np.floor(local + 1e-9).astype(np.int64)
    frac = local - ij
    up = (frac.sum(axis=1) < 1.0).astype(np.int64)
    return np.column_stack([ij, up])


@dataclass(frozen=True, eq=False)
class RefinedMesh:
    """Hierarchy of uniformly refined meshes over a :class:`MacroMesh`."""

    macro: MacroMesh
    levels: tuple[MeshLevel, ...]
    blending: "BlendingMap" = field(default=None)

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, level: int) -> MeshLevel:
        return self.levels[level]

    @cached_property
    def element_lookup(self) -> tuple[np.ndarray, ...]:
        tables = []
        for lev in self.levels:
            n = 2 ** lev.level
            table = np.full((self.macro.n_triangles, n, n, 2), -1, dtype=np.int64)
            gi = lev.grid_index
            table[lev.macro_id, gi[:, 0], gi[:, 1], gi[:, 2]] = np.arange(lev.n_elements)
            tables.append(table)
        return tuple(tables)

    def descriptor(self) -> str:
        return f"{self.macro.descriptor()}:L{self.max_level}:blend={self.blending.enabled}"


def refine(mesh: MacroMesh, level: int, blending: "BlendingMap | None" = None) -> RefinedMesh:
    """Red-refine every macro triangle ``level`` times.

    Returns all levels ``0..level``; level ``L`` has ``4**L`` micro triangles
    per macro triangle.
    """
    if level < 0:
        raise ValueError("level must be nonnegative")
    if blending is None:
        blending = BlendingMap.for_mesh(mesh)
    vertices = mesh.vertices.copy()
    triangles = mesh.triangles.copy()
    vtags = mesh.vertex_tags.copy()
    macro_id = np.arange(mesh.n_triangles)
    levels = []
    for lev in range(level + 1):
        edges, tri_edges = _edges_of(triangles)
        etags = _edge_tags(edges, tri_edges, vtags)
        levels.append(MeshLevel(
            level=lev, vertices=vertices, triangles=triangles, macro_id=macro_id,
            edges=edges, tri_edges=tri_edges, vertex_tags=vtags, edge_tags=etags,
            grid_index=_grid_index(mesh, vertices, triangles, macro_id, lev),
        ))
        if lev == level:
            break
        nodes = np.concatenate([triangles, len(vertices) + tri_edges], axis=1)
        triangles = nodes[:, _CHILDREN].reshape(-1, 3)
        macro_id = np.repeat(macro_id, 4)
        mid = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
        vertices = np.concatenate([vertices, mid])
        vtags = np.concatenate([vtags, etags])
    return RefinedMesh(macro=mesh, levels=tuple(levels), blending=blending)


class BlendingMap:
    """Angle-preserving map from the polygonal annulus onto the true annulus.

    A point at polar angle ``theta`` and radial fraction ``s`` between the
    inner and outer chord of its radial layer is sent to the point at the
    same angle and radius ``r_in + s * (r_out - r_in)`` of the corresponding
    circular layer.  Because the layer radii are equally spaced, this reduces
    to scaling by ``cos(theta - theta_mid) / cos(pi / n)`` where ``theta_mid``
    is the mid-angle of the polygon sector containing the point.

    With ``enabled=False`` the map is the identity (used for tests).
    """

    def __init__(self, n_tangential: int, r_cmb: float, r_surface: float, *, enabled: bool = True):
        if n_tangential < 3:
            raise ValueError("n_tangential must be >= 3")
        if not 0 < r_cmb < r_surface:
            raise ValueError("need 0 < r_cmb < r_surface")
        self.n_tangential = int(n_tangential)
        self.r_cmb = float(r_cmb)
        self.r_surface = float(r_surface)
        self.enabled = enabled
        self._cos_half = np.cos(np.pi / self.n_tangential)
        mids = 2.0 * np.pi * (np.arange(self.n_tangential) + 0.5) / self.n_tangential
        self._mid = np.stack([np.cos(mids), np.sin(mids)], axis=1)

    @classmethod
    def for_mesh(cls, mesh: MacroMesh, *, enabled: bool = True) -> "BlendingMap":
        return cls(mesh.n_tangential, mesh.r_cmb, mesh.r_surface, enabled=enabled)

    def sector_of(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        theta = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2.0 * np.pi)
        return np.minimum((theta * self.n_tangential / (2.0 * np.pi)).astype(np.int64),
                          self.n_tangential - 1)

    def _scale(self, x, sector):
        m = self._mid[sector]
        r = np.linalg.norm(x, axis=-1)
        return np.einsum("...d,...d->...", x, m) / (r * self._cos_half)

    def _check_inside(self, radius, tol=1e-10):
        span = self.r_surface - self.r_cmb
        bad = (radius < self.r_cmb - tol * span) | (radius > self.r_surface + tol * span)
        if np.any(bad):
            raise DomainError("point outside the polygonal annulus")

    def blend(self, x_tilde: np.ndarray, sector: np.ndarray | None = None, *, check: bool = True) -> np.ndarray:
        """Map points of the unblended domain to the physical annulus."""
        x = np.asarray(x_tilde, dtype=float)
        if sector is None:
            sector = self.sector_of(x)
        f = self._scale(x, sector)
        y = f[..., None] * x
        if check:
            self._check_inside(np.linalg.norm(y, axis=-1))
        if not self.enabled:
            return x.copy()
        return y

    __call__ = blend

    def jacobian(self, x_tilde: np.ndarray, sector: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Analytic Jacobian ``J_B`` and its determinant at ``x_tilde``."""
        x = np.asarray(x_tilde, dtype=float)
        if not self.enabled:
            shape = x.shape[:-1]
            return np.broadcast_to(np.eye(2), shape + (2, 2)).copy(), np.ones(shape)
        if sector is None:
            sector = self.sector_of(x)
        m = self._mid[sector]
        r = np.linalg.norm(x, axis=-1)
        xm = np.einsum("...d,...d->...", x, m)
        f = xm / (r * self._cos_half)
        grad_f = (m / r[..., None] - (xm / r**3)[..., None] * x) / self._cos_half
        jac = f[..., None, None] * np.eye(2) + x[..., :, None] * grad_f[..., None, :]
        # x . grad_f vanishes identically, so det(f I + x grad_f^T) = f^2
        return jac, f * f

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Analytic inverse: keep the angle, undo the radial scaling."""
        y = np.asarray(y, dtype=float)
        if not self.enabled:
            return y.copy()
        sector = self.sector_of(y)
        # the scale factor only depends on the angle, which the map preserves
        return y / self._scale(y, sector)[..., None]

    def domain_radius(self, y: np.ndarray) -> np.ndarray:
        """Radius of the ring of the physical domain through ``y``.

        This is ``|y|`` for the blended annulus and the polygon corner
        radius for the unblended one; in both cases it is homogeneous of
        degree one along rays and lies in ``[r_cmb, r_surface]`` inside.
        """
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1)
        if self.enabled:
            return r
        return r * self._scale(y, self.sector_of(y))

    def physical_radius_bounds(self) -> tuple[float, float]:
        return self.r_cmb, self.r_surface
