"""Scene assembly: meshes, spring generation, vertex groups, keyframed charges, config I/O.

Scene configs are TOML documents (schema `version = 1`). Hand-written configs
may describe procedural meshes and use microcoulomb charge keys; the
serializer always emits the resolved scene (inline vertices, springs, SI
units) so a round trip reproduces the scene field by field.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import tomli

from . import meshgen
from .fieldexpr import compile_field
from .integrators import Trajectory, rollout
from .model import (
    ChargeSet,
    ConfigError,
    ExternalForcing,
    MassModel,
    SimParams,
    SimState,
    SpringTopology,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MeshSource:
    """Vertices plus a deduplicated undirected edge set."""

    vertices: np.ndarray  # (n, 3)
    edges: np.ndarray     # (e, 2) sorted pairs

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if verts.shape[0] < 1:
            raise ConfigError("mesh needs at least one vertex")
        if edges.size:
            if edges.min() < 0 or edges.max() >= verts.shape[0]:
                raise ConfigError("mesh edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ConfigError("mesh contains a degenerate edge")
        verts.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "edges", edges)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]


def parse_mesh(text: str | bytes) -> MeshSource:
    """Parse the supported text mesh subset: v / f / l lines, # comments.

    Unknown directives are skipped with one warning per directive kind;
    malformed numeric fields raise with their line number.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    vertices: list[tuple[float, float, float]] = []
    edges: list[tuple[int, int]] = []
    warned: set[str] = set()

    def resolve(token: str, lineno: int) -> int:
        head = token.split("/")[0]
        try:
            idx = int(head)
        except ValueError as exc:
            raise ConfigError(f"mesh line {lineno}: bad index '{token}'") from exc
        if idx == 0:
            raise ConfigError(f"mesh line {lineno}: indices are 1-based")
        resolved = idx - 1 if idx > 0 else len(vertices) + idx
        if not (0 <= resolved < len(vertices)):
            raise ConfigError(f"mesh line {lineno}: index {idx} out of range")
        return resolved

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        directive, args = parts[0], parts[1:]
        if directive == "v":
            if len(args) < 3:
                raise ConfigError(f"mesh line {lineno}: vertex needs 3 coordinates")
            try:
                vertices.append((float(args[0]), float(args[1]), float(args[2])))
            except ValueError as exc:
                raise ConfigError(f"mesh line {lineno}: bad coordinate in '{raw.strip()}'") from exc
        elif directive == "f":
            if len(args) < 3:
                raise ConfigError(f"mesh line {lineno}: face needs at least 3 indices")
            ring = [resolve(a, lineno) for a in args]
            for a, b in zip(ring, ring[1:] + ring[:1]):
                if a != b:
                    edges.append((min(a, b), max(a, b)))
        elif directive == "l":
            if len(args) < 2:
                raise ConfigError(f"mesh line {lineno}: line element needs at least 2 indices")
            chain = [resolve(a, lineno) for a in args]
            for a, b in zip(chain, chain[1:]):
                if a != b:
                    edges.append((min(a, b), max(a, b)))
        else:
            if directive not in warned:
                warned.add(directive)
                log.warning("mesh: skipping unsupported directive '%s'", directive)
    if not vertices:
        raise ConfigError("mesh has no vertices")
    unique_edges = sorted(set(edges))
    return MeshSource(np.array(vertices), np.array(unique_edges, dtype=np.int64).reshape(-1, 2))


def springs_from_mesh(mesh: MeshSource, default_k: float) -> SpringTopology:
    """One spring per edge, rest length taken from the initial geometry."""
    if default_k <= 0:
        raise ConfigError("spring constant must be > 0")
    if mesh.edges.shape[0] == 0:
        return SpringTopology.from_springs([], mesh.vertex_count)
    lengths = np.linalg.norm(mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]], axis=1)
    return SpringTopology(
        vertex_count=mesh.vertex_count,
        i=mesh.edges[:, 0],
        j=mesh.edges[:, 1],
        stiffness=np.full(mesh.edges.shape[0], float(default_k)),
        rest_length=lengths,
    )


@dataclass(frozen=True)
class ChargeTrack:
    """Piecewise-linear charge keyframes (seconds, Coulombs) for one vertex group."""

    group: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float).reshape(-1)
        if t.size == 0 or t.size != v.size:
            raise ConfigError(f"charge track '{self.group}' needs matching times and values")
        if t.size > 1 and np.any(np.diff(t) <= 0.0):
            raise ConfigError(f"charge track '{self.group}': keyframe times must strictly increase")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def value_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))


@dataclass
class Scene:
    """Everything needed to run one simulation, plus run defaults."""

    name: str
    state: SimState
    topology: SpringTopology
    masses: MassModel
    charges: ChargeSet
    forcing: ExternalForcing
    params: SimParams
    vertex_groups: dict[str, np.ndarray] = dc_field(default_factory=dict)
    charge_tracks: list[ChargeTrack] = dc_field(default_factory=list)
    pinned: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    steps: int = 100
    integrator: str = "imex"
    forces: str = "brute"
    record_every: int = 1

    def __post_init__(self):
        n = self.state.vertex_count
        for name, idx in self.vertex_groups.items():
            arr = np.asarray(idx, dtype=np.int64).reshape(-1)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ConfigError(f"vertex group '{name}' has out-of-range indices")
            self.vertex_groups[name] = arr
        for track in self.charge_tracks:
            if track.group not in self.vertex_groups:
                raise ConfigError(f"charge track references unknown group '{track.group}'")
        pinned = np.asarray(self.pinned, dtype=np.int64).reshape(-1)
        if pinned.size and (pinned.min() < 0 or pinned.max() >= n):
            raise ConfigError("pinned vertex index out of range")
        self.pinned = np.unique(pinned)
        overlap_owner: dict[int, str] = {}
        for track in self.charge_tracks:
            for v in self.vertex_groups[track.group]:
                if v in overlap_owner and overlap_owner[v] != track.group:
                    log.warning(
                        "charge tracks overlap on vertex %d: '%s' overrides '%s'",
                        v, track.group, overlap_owner[v],
                    )
                overlap_owner[int(v)] = track.group

    @property
    def vertex_count(self) -> int:
        return self.state.vertex_count

    def has_tracks(self) -> bool:
        return len(self.charge_tracks) > 0


def charge_at_time(scene: Scene, t: float) -> ChargeSet:
    """Base charges with every track's interpolated value applied to its group.

    Later-declared tracks win on overlapping groups; vertices without a track
    keep their base charge.
    """
    if not scene.charge_tracks:
        return scene.charges
    q = scene.charges.charges.copy()
    for track in scene.charge_tracks:
        q[scene.vertex_groups[track.group]] = track.value_at(t)
    return scene.charges.with_charges(q)


def run_scene(
    scene: Scene,
    *,
    steps: Optional[int] = None,
    integrator: Optional[str] = None,
    forces: Optional[str] = None,
    record_every: Optional[int] = None,
    params: Optional[SimParams] = None,
    raise_on_divergence: bool = True,
) -> Trajectory:
    """Roll the scene out with its stored defaults, honoring keyframed charges."""
    schedule = (lambda t: charge_at_time(scene, t)) if scene.has_tracks() else None
    return rollout(
        scene.state,
        scene.topology,
        scene.masses,
        scene.charges,
        scene.forcing,
        params if params is not None else scene.params,
        steps=steps if steps is not None else scene.steps,
        integrator=integrator if integrator is not None else scene.integrator,
        forces=forces if forces is not None else scene.forces,
        record_every=record_every if record_every is not None else scene.record_every,
        charge_schedule=schedule,
        pinned=scene.pinned,
        raise_on_divergence=raise_on_divergence,
    )


# --- config parsing -------------------------------------------------------

_MESH_KINDS = ("torus", "sphere", "blob", "cloth", "cloud", "obj", "inline")


def _require(table: dict, key: str, context: str):
    if key not in table:
        raise ConfigError(f"{context}: missing '{key}'")
    return table[key]


def _charge_value(table: dict, context: str, default: Optional[float] = None) -> float:
    if "charge_uC" in table and "charge_C" in table:
        raise ConfigError(f"{context}: give charge_uC or charge_C, not both")
    if "charge_uC" in table:
        return float(table["charge_uC"]) * 1e-6
    if "charge_C" in table:
        return float(table["charge_C"])
    if default is None:
        raise ConfigError(f"{context}: missing charge_uC (or charge_C)")
    return default


def _parse_group(value, n: int, context: str) -> np.ndarray:
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"{context}: range must be 'start:stop' or 'start:stop:step'")
        try:
            nums = [int(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"{context}: bad range '{value}'") from exc
        return np.arange(*nums, dtype=np.int64)
    if isinstance(value, list):
        return np.asarray(value, dtype=np.int64)
    raise ConfigError(f"{context}: expected an index list or range string")


def _build_mesh(table: dict) -> tuple[MeshSource, dict[str, np.ndarray]]:
    kind = _require(table, "kind", "[mesh]")
    if kind not in _MESH_KINDS:
        raise ConfigError(f"[mesh]: unknown kind '{kind}'")
    groups: dict[str, np.ndarray] = {}
    if kind == "torus":
        verts, edges = meshgen.torus_mesh(
            int(table.get("major_segments", 29)),
            int(table.get("minor_segments", 5)),
            float(table.get("major_radius", 1.0)),
            float(table.get("minor_radius", 0.4)),
        )
    elif kind == "sphere":
        verts, edges = meshgen.fibonacci_sphere_mesh(
            int(table.get("count", 500)), float(table.get("radius", 1.0))
        )
    elif kind == "blob":
        verts, edges = meshgen.blob_mesh(
            int(table.get("count", 300)),
            tuple(float(r) for r in table.get("radii", [1.0, 1.0, 1.0])),
            float(table.get("bump_amplitude", 0.0)),
            int(table.get("bump_frequency", 3)),
            int(table.get("seed", 0)),
        )
    elif kind == "cloth":
        verts, edges, groups = meshgen.cloth_grid_mesh(
            int(table.get("nx", 10)), int(table.get("nz", 10)), float(table.get("spacing", 0.1))
        )
    elif kind == "cloud":
        verts = meshgen.random_cloud(
            int(_require(table, "count", "[mesh] cloud")),
            float(table.get("extent", 1.0)),
            int(table.get("seed", 0)),
        )
        edges = np.zeros((0, 2), dtype=np.int64)
    elif kind == "obj":
        path = _require(table, "path", "[mesh] obj")
        try:
            text = open(path, "r", encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"[mesh]: cannot read '{path}': {exc}") from exc
        mesh = parse_mesh(text)
        verts, edges = np.array(mesh.vertices), np.array(mesh.edges)
    else:  # inline
        verts = np.asarray(_require(table, "vertices", "[mesh] inline"), dtype=float)
        edges = np.asarray(table.get("edges", []), dtype=np.int64).reshape(-1, 2)
    verts = np.array(verts, dtype=float)
    scale = float(table.get("scale", 1.0))
    if scale != 1.0:
        verts = verts * scale
    center = table.get("center")
    if center is not None:
        verts = verts + np.asarray(center, dtype=float)[None, :]
    return MeshSource(verts, edges), groups


def parse_scene_config(text: str | bytes, name_hint: str = "scene") -> Scene:
    """Parse and fully validate a TOML scene description."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML: {exc}") from exc
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    name = doc.get("name", name_hint)

    mesh, groups = _build_mesh(_require(doc, "mesh", "config"))
    n = mesh.vertex_count

    physics = _require(doc, "physics", "config")
    sim = _require(doc, "simulation", "config")

    # springs: inline meshes may carry per-spring data, everything else is uniform k
    mesh_table = doc["mesh"]
    if mesh_table.get("kind") == "inline" and "springs" in mesh_table:
        rows = np.asarray(mesh_table["springs"], dtype=float).reshape(-1, 4)
        topology = SpringTopology(
            vertex_count=n,
            i=rows[:, 0].astype(np.int64),
            j=rows[:, 1].astype(np.int64),
            stiffness=rows[:, 2],
            rest_length=rows[:, 3],
        )
    else:
        topology = springs_from_mesh(mesh, float(_require(physics, "spring_constant", "[physics]")))

    if "masses_kg" in physics:
        masses = MassModel(np.asarray(physics["masses_kg"], dtype=float))
        if masses.vertex_count != n:
            raise ConfigError("[physics]: masses_kg length does not match the mesh")
    else:
        masses = MassModel.uniform(n, float(physics.get("mass", 1.0)))

    coulomb_kwargs = {}
    if "coulomb_constant" in physics:
        coulomb_kwargs["coulomb_constant"] = float(physics["coulomb_constant"])
    if "charges_C" in physics:
        q = np.asarray(physics["charges_C"], dtype=float)
        if q.size != n:
            raise ConfigError("[physics]: charges_C length does not match the mesh")
        charges = ChargeSet(q, **coulomb_kwargs)
    else:
        charges = ChargeSet.uniform(n, _charge_value(physics, "[physics]", default=0.0), **coulomb_kwargs)

    vertex_groups = dict(groups)
    for gname, value in doc.get("groups", {}).items():
        vertex_groups[gname] = _parse_group(value, n, f"[groups].{gname}")

    if "group_charges" in physics:
        q = charges.charges.copy()
        for gname, uc in physics["group_charges"].items():
            if gname not in vertex_groups:
                raise ConfigError(f"[physics.group_charges]: unknown group '{gname}'")
            q[vertex_groups[gname]] = float(uc) * 1e-6
        charges = charges.with_charges(q)

    params = SimParams(
        h=float(_require(sim, "h", "[simulation]")),
        local_global_iterations=int(sim.get("local_global_iterations", 1)),
        local_global_tol=float(sim.get("local_global_tol", 0.0)),
        ddef_enabled=str(sim.get("forces", "brute")) == "ddef",
        ddef_m=int(sim.get("ddef_m", 1000)),
        ddef_margin=float(sim.get("ddef_margin", 0.05)),
        reuse_grid_frames=int(sim.get("reuse_grid_frames", 1)),
        softening_epsilon=float(physics.get("softening_epsilon", 1e-6)),
        gravity=np.asarray(physics.get("gravity", [0.0, 0.0, 0.0]), dtype=float),
    )
    integrator = str(sim.get("integrator", "imex"))
    if integrator not in ("imex", "verlet", "explicit"):
        raise ConfigError(f"[simulation]: unknown integrator '{integrator}'")
    forces = str(sim.get("forces", "brute"))
    if forces not in ("brute", "ddef"):
        raise ConfigError(f"[simulation]: unknown force backend '{forces}'")
    steps = int(sim.get("steps", 100))
    if steps < 0:
        raise ConfigError("[simulation]: steps must be >= 0")
    record_every = int(sim.get("record_every", 1))

    pinned = np.zeros(0, dtype=np.int64)
    pin_table = doc.get("pinned", {})
    if pin_table:
        collected = []
        for gname in pin_table.get("groups", []):
            if gname not in vertex_groups:
                raise ConfigError(f"[pinned]: unknown group '{gname}'")
            collected.append(vertex_groups[gname])
        if "indices" in pin_table:
            collected.append(np.asarray(pin_table["indices"], dtype=np.int64))
        if collected:
            pinned = np.unique(np.concatenate(collected))

    tracks = []
    for entry in doc.get("charge_tracks", []):
        gname = _require(entry, "group", "[[charge_tracks]]")
        keys = np.asarray(_require(entry, "keys", "[[charge_tracks]]"), dtype=float).reshape(-1, 2)
        unit = entry.get("unit", "uC")
        factor = 1e-6 if unit == "uC" else 1.0
        tracks.append(ChargeTrack(group=gname, times=keys[:, 0], values=keys[:, 1] * factor))

    ext = doc.get("external", {})
    constant = None
    if "uniform_force" in ext:
        constant = np.tile(np.asarray(ext["uniform_force"], dtype=float), n)
    if "constant_force" in ext:
        constant = np.asarray(ext["constant_force"], dtype=float)
        if constant.size != 3 * n:
            raise ConfigError("[external]: constant_force must have 3n entries")
    field_fn = None
    field_text = str(ext.get("field", ""))
    field_scale = float(ext.get("field_scale", 1.0))
    if field_text and field_scale != 1.0:
        # fold the scale into the expression so the stored text is self-contained
        body = field_text.strip()[1:-1]
        parts = [p.strip() for p in _split_top_level(body)]
        field_text = "[" + ", ".join(f"({field_scale!r})*({p})" for p in parts) + "]"
    if field_text:
        field_fn = compile_field(field_text)
    ext_pos = []
    ext_q = []
    for entry in ext.get("point_charges", []):
        ext_pos.append(np.asarray(_require(entry, "position", "[[external.point_charges]]"), dtype=float))
        ext_q.append(_charge_value(entry, "[[external.point_charges]]"))
    forcing = ExternalForcing(
        constant_force=constant,
        field=field_fn,
        field_expression=field_text,
        external_positions=np.asarray(ext_pos, dtype=float).reshape(-1, 3),
        external_charges=np.asarray(ext_q, dtype=float),
    )

    state = SimState.at_rest(mesh.vertices)
    return Scene(
        name=str(name),
        state=state,
        topology=topology,
        masses=masses,
        charges=charges,
        forcing=forcing,
        params=params,
        vertex_groups=vertex_groups,
        charge_tracks=tracks,
        pinned=pinned,
        steps=steps,
        integrator=integrator,
        forces=forces,
        record_every=record_every,
    )


def _split_top_level(body: str) -> list[str]:
    parts, depth, current = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def load_scene(path) -> Scene:
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read scene config '{path}': {exc}") from exc
    return parse_scene_config(text, name_hint=str(path))


# --- config serialization --------------------------------------------------

def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(v) for v in np.asarray(value).tolist()) + "]"
    raise ConfigError(f"cannot serialize value of type {type(value)!r}")


def serialize_scene(scene: Scene) -> str:
    """Emit the resolved scene as TOML; parsing it back reproduces every field."""
    lines = [f"version = {SCHEMA_VERSION}", f"name = {_toml_value(scene.name)}", ""]
    lines.append("[mesh]")
    lines.append('kind = "inline"')
    lines.append(f"vertices = {_toml_value(scene.state.points())}")
    topo = scene.topology
    springs = [
        [int(topo.i[s]), int(topo.j[s]), float(topo.stiffness[s]), float(topo.rest_length[s])]
        for s in range(topo.spring_count)
    ]
    lines.append(f"springs = {_toml_value(springs)}")
    lines.append("")
    lines.append("[physics]")
    lines.append(f"masses_kg = {_toml_value(scene.masses.masses)}")
    lines.append(f"charges_C = {_toml_value(scene.charges.charges)}")
    lines.append(f"coulomb_constant = {_toml_value(scene.charges.coulomb_constant)}")
    lines.append(f"gravity = {_toml_value(scene.params.gravity)}")
    lines.append(f"softening_epsilon = {_toml_value(scene.params.softening_epsilon)}")
    lines.append("")
    lines.append("[simulation]")
    lines.append(f"h = {_toml_value(scene.params.h)}")
    lines.append(f"steps = {scene.steps}")
    lines.append(f"integrator = {_toml_value(scene.integrator)}")
    lines.append(f"forces = {_toml_value(scene.forces)}")
    lines.append(f"local_global_iterations = {scene.params.local_global_iterations}")
    lines.append(f"local_global_tol = {_toml_value(scene.params.local_global_tol)}")
    lines.append(f"ddef_m = {scene.params.ddef_m}")
    lines.append(f"ddef_margin = {_toml_value(scene.params.ddef_margin)}")
    lines.append(f"reuse_grid_frames = {scene.params.reuse_grid_frames}")
    lines.append(f"record_every = {scene.record_every}")
    lines.append("")
    if scene.vertex_groups:
        lines.append("[groups]")
        for gname, idx in scene.vertex_groups.items():
            lines.append(f"{gname} = {_toml_value(idx)}")
        lines.append("")
    if scene.pinned.size:
        lines.append("[pinned]")
        lines.append(f"indices = {_toml_value(scene.pinned)}")
        lines.append("")
    for track in scene.charge_tracks:
        lines.append("[[charge_tracks]]")
        lines.append(f"group = {_toml_value(track.group)}")
        keys = [[float(t), float(v)] for t, v in zip(track.times, track.values)]
        lines.append(f'unit = "C"')
        lines.append(f"keys = {_toml_value(keys)}")
        lines.append("")
    ext = scene.forcing
    if not ext.is_zero:
        lines.append("[external]")
        if ext.constant_force is not None:
            lines.append(f"constant_force = {_toml_value(ext.constant_force)}")
        if ext.field_expression:
            lines.append(f"field = {_toml_value(ext.field_expression)}")
        lines.append("")
        for pos, q in zip(ext.external_positions, ext.external_charges):
            lines.append("[[external.point_charges]]")
            lines.append(f"position = {_toml_value(pos)}")
            lines.append(f"charge_C = {_toml_value(q)}")
            lines.append("")
    return "\n".join(lines)
