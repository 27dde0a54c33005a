"""
Procedural shape families for the desk-scale corpus.

Every shape is a star-shaped surface around the origin: the vertices of a
subdivided cube lattice are pushed along their rays onto a base surface
(the family), then displaced radially by a stack of detail layers. Each
layer follows the Strategy Pattern, like the families, so adding one means
writing a class and registering it; ``gen_shape`` never changes.

Radial displacement keeps the lattice connectivity, so every generated mesh
is watertight and consistently wound by construction. A recipe whose
displacements could reach the origin (total amplitude >= 1) would fold the
surface and is rejected.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from src.errors import SpecError
from src.mesh import TriMesh, cube_surface_lattice, normalize_mesh, require_watertight

logger = logging.getLogger("mars.shapes")

DEFAULT_SUBDIVISIONS = 20
MAX_TOTAL_AMPLITUDE = 1.0


# ── base families ──────────────────────────────────────────────────────
class BaseShape(ABC):
    """Maps cube-lattice vertices onto one family's base surface.

    Attributes:
        params: Family-specific parameters (JSON-serializable).
    """

    family: str = ""

    def __init__(self, params: dict[str, Any]) -> None:
        self.params = params
        self.validate()

    @abstractmethod
    def validate(self) -> None:
        """Raise ``SpecError`` when the parameters describe no valid surface."""

    @abstractmethod
    def surface(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Base-surface points on the rays through the lattice vertices."""

    @classmethod
    @abstractmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        ...

    def _positive(self, *names: str) -> None:
        for name in names:
            values = np.atleast_1d(np.asarray(self.params[name], dtype=np.float64))
            if not (values > 0).all():
                raise SpecError(f"{self.family}.{name} must be positive, got {self.params[name]}")

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} {self.params}>"


class BoxShape(BaseShape):
    family = "box"

    def validate(self) -> None:
        self._positive("half_extents")
        if len(self.params["half_extents"]) != 3:
            raise SpecError("box.half_extents needs three values")

    def surface(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        return lattice * np.asarray(self.params["half_extents"], dtype=np.float64)

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        return {"half_extents": rng.uniform(0.5, 1.0, 3).round(4).tolist()}


class SphereShape(BaseShape):
    family = "sphere"

    def validate(self) -> None:
        self._positive("radius")

    def surface(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        return directions * float(self.params["radius"])

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        return {"radius": round(float(rng.uniform(0.7, 1.0)), 4)}


class SuperellipsoidShape(BaseShape):
    """|x/a|^e + |y/b|^e + |z/c|^e = 1; e = 2 is an ellipsoid, large e a rounded box."""

    family = "superellipsoid"

    def validate(self) -> None:
        self._positive("radii")
        if len(self.params["radii"]) != 3:
            raise SpecError("superellipsoid.radii needs three values")
        if float(self.params["exponent"]) < 1.0:
            raise SpecError(f"superellipsoid.exponent must be >= 1, got {self.params['exponent']}")

    def surface(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        radii = np.asarray(self.params["radii"], dtype=np.float64)
        e = float(self.params["exponent"])
        level = (np.abs(directions / radii) ** e).sum(axis=1)
        return directions * (level ** (-1.0 / e))[:, None]

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        return {
            "radii": rng.uniform(0.6, 1.0, 3).round(4).tolist(),
            "exponent": round(float(rng.uniform(2.5, 6.0)), 4),
        }


class ExtrudedPolygonShape(BaseShape):
    """Prism over a star polygon in the xy plane, extruded symmetrically along z.

    Polygon vertex k sits at angle 2πk/m with radius ``radii[k]``.
    """

    family = "extruded-polygon"

    def validate(self) -> None:
        self._positive("radii", "half_height")
        if len(self.params["radii"]) < 3:
            raise SpecError("extruded-polygon needs at least 3 polygon vertices")

    def _polygon_radius(self, angles: np.ndarray) -> np.ndarray:
        radii = np.asarray(self.params["radii"], dtype=np.float64)
        m = len(radii)
        sector = 2.0 * np.pi / m
        k = np.floor(np.mod(angles, 2.0 * np.pi) / sector).astype(np.int64) % m
        a0, a1 = k * sector, (k + 1) * sector
        p0 = radii[k, None] * np.stack([np.cos(a0), np.sin(a0)], axis=1)
        p1 = radii[(k + 1) % m, None] * np.stack([np.cos(a1), np.sin(a1)], axis=1)
        u = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        edge = p1 - p0
        # ray t·u meets segment p0 + s·edge at t = (p0 × edge) / (u × edge)
        return (p0[:, 0] * edge[:, 1] - p0[:, 1] * edge[:, 0]) / (u[:, 0] * edge[:, 1] - u[:, 1] * edge[:, 0])

    def surface(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        planar = np.hypot(directions[:, 0], directions[:, 1])
        angles = np.arctan2(directions[:, 1], directions[:, 0])
        with np.errstate(divide="ignore"):
            t_side = np.where(planar > 1e-12, self._polygon_radius(angles) / np.maximum(planar, 1e-12), np.inf)
            t_cap = np.where(np.abs(directions[:, 2]) > 1e-12, float(self.params["half_height"]) / np.abs(directions[:, 2]), np.inf)
        return directions * np.minimum(t_side, t_cap)[:, None]

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        sides = int(rng.integers(5, 9))
        return {
            "radii": rng.uniform(0.6, 1.0, sides).round(4).tolist(),
            "half_height": round(float(rng.uniform(0.4, 0.9)), 4),
        }


FAMILIES: dict[str, type[BaseShape]] = {
    cls.family: cls for cls in (BoxShape, SuperellipsoidShape, SphereShape, ExtrudedPolygonShape)
}


# ── detail layers ──────────────────────────────────────────────────────
class DetailLayer(ABC):
    """Relative radial displacement δ in [-amplitude, amplitude]."""

    kind: str = ""

    def __init__(self, params: dict[str, Any]) -> None:
        self.params = params
        amplitude = float(params.get("amplitude", 0.0))
        if amplitude < 0:
            raise SpecError(f"{self.kind}.amplitude must be non-negative, got {amplitude}")
        if float(params.get("frequency", 1)) <= 0:
            raise SpecError(f"{self.kind}.frequency must be positive")
        self.amplitude = amplitude

    @abstractmethod
    def displacement(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        ...

    @classmethod
    @abstractmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        ...


class SinusoidalDetail(DetailLayer):
    """Product of sines over the ray direction."""

    kind = "sinusoidal"

    def displacement(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        freq = float(self.params["frequency"])
        phase = np.asarray(self.params.get("phase", [0.0, 0.0, 0.0]), dtype=np.float64)
        waves = np.sin(freq * np.pi * directions + phase)
        return self.amplitude * waves.prod(axis=1)

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        return {
            "amplitude": round(float(rng.uniform(0.04, 0.1)), 4),
            "frequency": int(rng.integers(2, 5)),
            "phase": rng.uniform(0.0, 2.0 * np.pi, 3).round(4).tolist(),
        }


class GridBumpDetail(DetailLayer):
    """Regular grid of raised bumps over each lattice face.

    With an integer frequency every face boundary lies on a bump crest, so
    neighbouring faces agree along shared edges.
    """

    kind = "grid-bumps"

    def displacement(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        freq = float(self.params["frequency"])
        bump = ((1.0 + np.cos(2.0 * np.pi * freq * lattice)) / 2.0) ** 4
        return self.amplitude * bump.prod(axis=1)

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        return {"amplitude": round(float(rng.uniform(0.05, 0.12)), 4), "frequency": int(rng.integers(2, 5))}


class RidgeDetail(DetailLayer):
    """Parallel ridges across ``axis`` with sharp creases between them."""

    kind = "ridges"

    def displacement(self, lattice: np.ndarray, directions: np.ndarray) -> np.ndarray:
        axis = np.asarray(self.params["axis"], dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        freq = float(self.params["frequency"])
        return self.amplitude * np.abs(np.sin(np.pi * freq * (directions @ axis)))

    @classmethod
    def random_params(cls, rng: np.random.Generator) -> dict[str, Any]:
        axis = rng.normal(0.0, 1.0, 3)
        return {
            "amplitude": round(float(rng.uniform(0.03, 0.08)), 4),
            "frequency": int(rng.integers(3, 7)),
            "axis": (axis / np.linalg.norm(axis)).round(4).tolist(),
        }


DETAIL_LAYERS: dict[str, type[DetailLayer]] = {
    cls.kind: cls for cls in (SinusoidalDetail, GridBumpDetail, RidgeDetail)
}


# ── specs ──────────────────────────────────────────────────────────────
@dataclass
class ShapeSpec:
    """Recipe for one coarse/detailed pair.

    Attributes:
        family: Key of ``FAMILIES``.
        params: Base parameters of the family.
        detail: Detail layers, each ``{"kind": ..., "amplitude": ..., ...}``.
        seed: Seed the recipe was drawn with.
    """

    family: str
    params: dict[str, Any]
    detail: list[dict[str, Any]] = field(default_factory=list)
    seed: int = 0

    def base(self) -> BaseShape:
        if self.family not in FAMILIES:
            raise SpecError(f"Unknown shape family '{self.family}'; expected one of {sorted(FAMILIES)}")
        return FAMILIES[self.family](self.params)

    def layers(self) -> list[DetailLayer]:
        layers = []
        for entry in self.detail:
            kind = entry.get("kind")
            if kind not in DETAIL_LAYERS:
                raise SpecError(f"Unknown detail kind '{kind}'; expected one of {sorted(DETAIL_LAYERS)}")
            layers.append(DETAIL_LAYERS[kind](entry))
        total = sum(layer.amplitude for layer in layers)
        if total >= MAX_TOTAL_AMPLITUDE:
            raise SpecError(f"Detail amplitudes sum to {total:.3f}; the surface would fold through its center")
        return layers

    def coarse(self) -> "ShapeSpec":
        """Same recipe with every detail amplitude set to zero."""
        flat = [{**entry, "amplitude": 0.0} for entry in self.detail]
        return ShapeSpec(self.family, self.params, flat, self.seed)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "params": self.params, "detail": self.detail, "seed": self.seed}

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ShapeSpec":
        try:
            return cls(values["family"], dict(values["params"]), [dict(d) for d in values.get("detail", [])], int(values.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"Malformed shape spec: {exc}") from exc


def random_spec(family: str, seed: int) -> ShapeSpec:
    """Draw base parameters and one or two detail layers for ``family``."""
    if family not in FAMILIES:
        raise SpecError(f"Unknown shape family '{family}'")
    rng = np.random.default_rng(seed)
    params = FAMILIES[family].random_params(rng)
    kinds = sorted(DETAIL_LAYERS)
    chosen = rng.choice(len(kinds), size=int(rng.integers(1, 3)), replace=False)
    detail = [{"kind": kinds[i], **DETAIL_LAYERS[kinds[i]].random_params(rng)} for i in sorted(chosen)]
    return ShapeSpec(family, params, detail, seed)


def build_surface(spec: ShapeSpec, subdivisions: int = DEFAULT_SUBDIVISIONS) -> TriMesh:
    """Unnormalized mesh of ``spec`` including its detail layers."""
    base = spec.base()
    layers = spec.layers()
    lattice_mesh = cube_surface_lattice(subdivisions)
    lattice = lattice_mesh.vertices
    directions = lattice / np.linalg.norm(lattice, axis=1, keepdims=True)
    points = base.surface(lattice, directions)
    delta = np.zeros(len(points))
    for layer in layers:
        delta += layer.displacement(lattice, directions)
    return TriMesh(points * (1.0 + delta)[:, None], lattice_mesh.triangles)


def gen_shape(spec: ShapeSpec, subdivisions: int = DEFAULT_SUBDIVISIONS) -> tuple[TriMesh, TriMesh]:
    """Detailed and coarse meshes of one recipe, each normalized into [-0.95, 0.95]³.

    Raises:
        SpecError: On unknown families/layers, bad parameters or folding amplitudes.
    """
    detailed = normalize_mesh(build_surface(spec, subdivisions))
    coarse = normalize_mesh(build_surface(spec.coarse(), subdivisions))
    require_watertight(detailed, "detailed mesh")
    require_watertight(coarse, "coarse mesh")
    logger.debug("Generated %s (seed %d): %d triangles", spec.family, spec.seed, detailed.n_triangles)
    return detailed, coarse
