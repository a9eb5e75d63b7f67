"""Articulated-structure data model, forward kinematics, URDF, and synthesis.

An articulated object is a face segmentation into parts, a parent map
forming an arborescence rooted at a single fixed base part, and a motion
constraint per part.  All geometric quantities (axis directions/points,
prismatic offsets) live in the input mesh's coordinate frame; ranges are
relative to the mesh's current articulation state.
"""

from __future__ import annotations

import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Mesh, save_obj, load_mesh

log = logging.getLogger(__name__)

MOTION_TYPES = ("fixed", "prismatic", "revolute", "both")

FIXED, PRISMATIC, REVOLUTE, BOTH = MOTION_TYPES


class StructureError(ValueError):
    """Raised for articulated structures violating their invariants."""


def _unit(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-6:
        raise StructureError(f"{what} must be unit length, got norm {n}")
    return v


@dataclass
class MotionSpec:
    """Motion constraint of one part relative to its parent.

    Ranges are pairs (lo, hi) of nonnegative magnitudes meaning the joint
    value may move in [-lo, +hi] from the current state.  Prismatic fields
    are present iff the type allows sliding, revolute fields iff rotation.
    """

    motion_type: str
    prismatic_direction: Optional[np.ndarray] = None
    prismatic_range: Optional[tuple[float, float]] = None
    revolute_axis: Optional[tuple[np.ndarray, np.ndarray]] = None  # (direction, point)
    revolute_range: Optional[tuple[float, float]] = None

    @property
    def has_prismatic(self) -> bool:
        return self.motion_type in (PRISMATIC, BOTH)

    @property
    def has_revolute(self) -> bool:
        return self.motion_type in (REVOLUTE, BOTH)

    def validate(self) -> None:
        if self.motion_type not in MOTION_TYPES:
            raise StructureError(f"unknown motion type {self.motion_type!r}")
        if self.has_prismatic:
            if self.prismatic_direction is None or self.prismatic_range is None:
                raise StructureError(f"{self.motion_type} part missing prismatic fields")
            _unit(self.prismatic_direction, "prismatic direction")
            lo, hi = self.prismatic_range
            if lo < 0 or hi < 0:
                raise StructureError(f"prismatic range must be nonnegative, got {(lo, hi)}")
        elif self.prismatic_direction is not None or self.prismatic_range is not None:
            raise StructureError(f"{self.motion_type} part carries prismatic fields")
        if self.has_revolute:
            if self.revolute_axis is None or self.revolute_range is None:
                raise StructureError(f"{self.motion_type} part missing revolute fields")
            _unit(self.revolute_axis[0], "revolute axis direction")
            lo, hi = self.revolute_range
            if lo < 0 or hi < 0:
                raise StructureError(f"revolute range must be nonnegative, got {(lo, hi)}")
        elif self.revolute_axis is not None or self.revolute_range is not None:
            raise StructureError(f"{self.motion_type} part carries revolute fields")


def fixed_motion() -> MotionSpec:
    return MotionSpec(FIXED)


def prismatic_motion(direction, lo: float, hi: float) -> MotionSpec:
    return MotionSpec(
        PRISMATIC,
        prismatic_direction=np.asarray(direction, float),
        prismatic_range=(float(lo), float(hi)),
    )


def revolute_motion(direction, point, lo: float, hi: float) -> MotionSpec:
    return MotionSpec(
        REVOLUTE,
        revolute_axis=(np.asarray(direction, float), np.asarray(point, float)),
        revolute_range=(float(lo), float(hi)),
    )


@dataclass
class ArticulatedStructure:
    """Part segmentation + kinematic tree + per-part motion constraints."""

    part_count: int
    face_labels: np.ndarray
    parents: list[Optional[int]]
    motions: list[MotionSpec]

    def __post_init__(self):
        self.face_labels = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)

    @property
    def base_part(self) -> int:
        return next(i for i, p in enumerate(self.parents) if p is None)

    def children(self, part: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == part]

    def validate(self, mesh: Optional[Mesh] = None) -> None:
        p = self.part_count
        if p < 1:
            raise StructureError("structure needs at least one part")
        if len(self.parents) != p or len(self.motions) != p:
            raise StructureError("parents/motions length must equal part_count")
        roots = [i for i, par in enumerate(self.parents) if par is None]
        if len(roots) != 1:
            raise StructureError(f"exactly one base part required, found {roots}")
        if self.motions[roots[0]].motion_type != FIXED:
            raise StructureError("base part must have fixed motion")
        # parent map must reach the base from every part without cycles
        for start in range(p):
            seen = set()
            node: Optional[int] = start
            while node is not None:
                if node in seen or not (0 <= node < p):
                    raise StructureError(f"parent map has a cycle or bad id at part {start}")
                seen.add(node)
                node = self.parents[node]
        if len(self.face_labels) == 0:
            raise StructureError("structure has no face labels")
        if self.face_labels.min() < 0 or self.face_labels.max() >= p:
            raise StructureError("face label out of range")
        if mesh is not None and len(self.face_labels) != mesh.n_faces:
            raise StructureError(
                f"face_labels length {len(self.face_labels)} != mesh faces {mesh.n_faces}"
            )
        for m in self.motions:
            m.validate()


@dataclass
class JointPose:
    """Joint values per part: sliding offsets and rotation angles (radians)."""

    prismatic: dict[int, float] = field(default_factory=dict)
    revolute: dict[int, float] = field(default_factory=dict)

    def validate(self, structure: ArticulatedStructure, tol: float = 1e-9) -> None:
        for part, value in self.prismatic.items():
            m = structure.motions[part]
            if not m.has_prismatic:
                raise StructureError(f"part {part} accepts no prismatic value")
            lo, hi = m.prismatic_range
            if not (-lo - tol <= value <= hi + tol):
                raise StructureError(f"prismatic value {value} outside [-{lo}, {hi}] for part {part}")
        for part, value in self.revolute.items():
            m = structure.motions[part]
            if not m.has_revolute:
                raise StructureError(f"part {part} accepts no revolute value")
            lo, hi = m.revolute_range
            if not (-lo - tol <= value <= hi + tol):
                raise StructureError(f"revolute value {value} outside [-{lo}, {hi}] for part {part}")


# ---------------------------------------------------------------------------
# kinematics


def _rotation_about_axis(direction: np.ndarray, point: np.ndarray, angle: float) -> np.ndarray:
    """4x4 rotation of `angle` about the line (point, direction)."""
    u = np.asarray(direction, float)
    u = u / np.linalg.norm(u)
    c, s = np.cos(angle), np.sin(angle)
    ux, uy, uz = u
    K = np.array([[0, -uz, uy], [uz, 0, -ux], [-uy, ux, 0]])
    R = c * np.eye(3) + s * K + (1 - c) * np.outer(u, u)
    M = np.eye(4)
    M[:3, :3] = R
    a = np.asarray(point, float)
    M[:3, 3] = a - R @ a
    return M


def _translation(vec: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, 3] = vec
    return M


def local_joint_transform(motion: MotionSpec, pose: JointPose, part: int) -> np.ndarray:
    """4x4 local transform: revolute rotation first, then prismatic slide."""
    M = np.eye(4)
    if motion.has_revolute:
        angle = pose.revolute.get(part, 0.0)
        if angle != 0.0:
            direction, point = motion.revolute_axis
            M = _rotation_about_axis(direction, point, angle)
    if motion.has_prismatic:
        offset = pose.prismatic.get(part, 0.0)
        if offset != 0.0:
            M = _translation(offset * np.asarray(motion.prismatic_direction)) @ M
    return M


def part_world_transforms(structure: ArticulatedStructure, pose: JointPose) -> np.ndarray:
    """(P,4,4) world transform per part: parent's world composed with the local joint."""
    pose.validate(structure)
    p = structure.part_count
    world = [None] * p

    def resolve(i: int) -> np.ndarray:
        if world[i] is None:
            local = local_joint_transform(structure.motions[i], pose, i)
            parent = structure.parents[i]
            world[i] = local if parent is None else resolve(parent) @ local
        return world[i]

    return np.stack([resolve(i) for i in range(p)])


def apply_articulation(mesh: Mesh, structure: ArticulatedStructure, pose: JointPose) -> Mesh:
    """Pose the mesh: every face moves rigidly with its part.

    Vertices shared between parts are duplicated per part, so the output
    vertex array is generally larger; face order is preserved and face i of
    the output is face i of the input, transformed.
    """
    structure.validate(mesh)
    world = part_world_transforms(structure, pose)
    new_vertices = []
    new_faces = np.empty_like(mesh.faces)
    offset = 0
    for part in range(structure.part_count):
        face_ids = np.nonzero(structure.face_labels == part)[0]
        if len(face_ids) == 0:
            continue
        used = np.unique(mesh.faces[face_ids])
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used)) + offset
        verts = mesh.vertices[used] @ world[part, :3, :3].T + world[part, :3, 3]
        new_vertices.append(verts)
        new_faces[face_ids] = remap[mesh.faces[face_ids]]
        offset += len(used)
    return Mesh(np.concatenate(new_vertices), new_faces)


def pose_structure(structure: ArticulatedStructure, pose: JointPose) -> ArticulatedStructure:
    """The ground-truth structure as seen from the posed state.

    Joint axes ride with the parent part, so each axis is transported by the
    parent's world transform; remaining ranges shrink by the consumed joint
    value.  Exact for fixed/prismatic/revolute parts; for 'both' parts the
    prismatic direction is transported likewise, which treats the stored
    direction as attached to the parent.
    """
    world = part_world_transforms(structure, pose)
    motions = []
    for part, m in enumerate(structure.motions):
        if m.motion_type == FIXED:
            motions.append(MotionSpec(FIXED))
            continue
        parent = structure.parents[part]
        W = np.eye(4) if parent is None else world[parent]
        R, t = W[:3, :3], W[:3, 3]
        new = MotionSpec(m.motion_type)
        if m.has_prismatic:
            v = pose.prismatic.get(part, 0.0)
            lo, hi = m.prismatic_range
            new.prismatic_direction = R @ m.prismatic_direction
            new.prismatic_range = (max(lo + v, 0.0), max(hi - v, 0.0))
        if m.has_revolute:
            v = pose.revolute.get(part, 0.0)
            lo, hi = m.revolute_range
            direction, point = m.revolute_axis
            new.revolute_axis = (R @ direction, R @ point + t)
            new.revolute_range = (max(lo + v, 0.0), max(hi - v, 0.0))
        motions.append(new)
    return ArticulatedStructure(
        structure.part_count, structure.face_labels.copy(), list(structure.parents), motions
    )


def transform_structure(
    structure: ArticulatedStructure, scale: float, translation
) -> ArticulatedStructure:
    """Re-express motion geometry under p -> scale*p + translation.

    Directions are unchanged, axis points map through the transform,
    prismatic ranges scale, angles do not.
    """
    translation = np.asarray(translation, float)
    motions = []
    for m in structure.motions:
        new = MotionSpec(m.motion_type)
        if m.has_prismatic:
            lo, hi = m.prismatic_range
            new.prismatic_direction = np.array(m.prismatic_direction)
            new.prismatic_range = (lo * scale, hi * scale)
        if m.has_revolute:
            direction, point = m.revolute_axis
            new.revolute_axis = (np.array(direction), point * scale + translation)
            new.revolute_range = m.revolute_range
        motions.append(new)
    return ArticulatedStructure(
        structure.part_count, structure.face_labels.copy(), list(structure.parents), motions
    )


def fully_articulated_pose(structure: ArticulatedStructure) -> JointPose:
    """Every joint driven to the positive bound of its range."""
    pose = JointPose()
    for part, m in enumerate(structure.motions):
        if m.has_prismatic:
            pose.prismatic[part] = m.prismatic_range[1]
        if m.has_revolute:
            pose.revolute[part] = m.revolute_range[1]
    return pose


def random_pose(structure: ArticulatedStructure, rng_seed) -> JointPose:
    """Each joint value drawn uniformly within its declared range."""
    rng = np.random.default_rng(rng_seed)
    pose = JointPose()
    for part, m in enumerate(structure.motions):
        if m.has_revolute:
            lo, hi = m.revolute_range
            pose.revolute[part] = float(rng.uniform(-lo, hi))
        if m.has_prismatic:
            lo, hi = m.prismatic_range
            pose.prismatic[part] = float(rng.uniform(-lo, hi))
    return pose


# ---------------------------------------------------------------------------
# JSON interchange


def structure_to_json(structure: ArticulatedStructure) -> dict:
    parts = []
    for i in range(structure.part_count):
        m = structure.motions[i]
        entry: dict = {
            "id": i,
            "parent": structure.parents[i],
            "motion_type": m.motion_type,
        }
        if m.has_prismatic:
            entry["prismatic"] = {
                "dir": list(map(float, m.prismatic_direction)),
                "range": list(map(float, m.prismatic_range)),
            }
        if m.has_revolute:
            entry["revolute"] = {
                "dir": list(map(float, m.revolute_axis[0])),
                "point": list(map(float, m.revolute_axis[1])),
                "range": list(map(float, m.revolute_range)),
            }
        parts.append(entry)
    return {"parts": parts, "face_labels": [int(x) for x in structure.face_labels]}


def structure_from_json(doc: dict) -> ArticulatedStructure:
    parts = sorted(doc["parts"], key=lambda e: e["id"])
    parents: list[Optional[int]] = []
    motions: list[MotionSpec] = []
    for entry in parts:
        parents.append(entry["parent"])
        m = MotionSpec(entry["motion_type"])
        if "prismatic" in entry:
            m.prismatic_direction = np.array(entry["prismatic"]["dir"], float)
            m.prismatic_range = tuple(entry["prismatic"]["range"])
        if "revolute" in entry:
            m.revolute_axis = (
                np.array(entry["revolute"]["dir"], float),
                np.array(entry["revolute"]["point"], float),
            )
            m.revolute_range = tuple(entry["revolute"]["range"])
        motions.append(m)
    structure = ArticulatedStructure(
        len(parts), np.array(doc["face_labels"], np.int64), parents, motions
    )
    structure.validate()
    return structure


def save_structure(structure: ArticulatedStructure, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(structure_to_json(structure), fh, indent=1)


def load_structure(path) -> ArticulatedStructure:
    with open(path, "r", encoding="utf-8") as fh:
        return structure_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# URDF export / import
#
# One link per part carrying its submesh as an OBJ.  Revolute (and 'both')
# child frames sit at the axis point; prismatic/fixed children share their
# parent's frame.  URDF has no 2-DoF joint, so a 'both' part becomes a
# massless geometry-free pivot link carrying the revolute joint, followed
# by the prismatic joint to the real part.


def _split_part_meshes(mesh: Mesh, structure: ArticulatedStructure) -> list[Mesh]:
    out = []
    for part in range(structure.part_count):
        face_ids = np.nonzero(structure.face_labels == part)[0]
        used = np.unique(mesh.faces[face_ids])
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        out.append(Mesh(mesh.vertices[used], remap[mesh.faces[face_ids]]))
    return out


def _inertial_xml(link: ET.Element) -> None:
    inertial = ET.SubElement(link, "inertial")
    ET.SubElement(inertial, "mass", value="1")
    ET.SubElement(
        inertial, "inertia",
        ixx="1", ixy="0", ixz="0", iyy="1", iyz="0", izz="1",
    )


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def export_urdf(mesh: Mesh, structure: ArticulatedStructure, out_dir, name: str = "object") -> str:
    """Write `<name>.urdf` plus one OBJ per part into `out_dir`; returns the URDF path."""
    structure.validate(mesh)
    os.makedirs(out_dir, exist_ok=True)
    submeshes = _split_part_meshes(mesh, structure)
    base = structure.base_part

    # frame origin per part in mesh coordinates
    frame = {}

    def frame_origin(part: int) -> np.ndarray:
        if part in frame:
            return frame[part]
        parent = structure.parents[part]
        if parent is None:
            origin = np.zeros(3)
        else:
            m = structure.motions[part]
            origin = np.asarray(m.revolute_axis[1], float) if m.has_revolute else frame_origin(parent)
        frame[part] = origin
        return origin

    robot = ET.Element("robot", name=name)
    for part in range(structure.part_count):
        mesh_file = f"{name}_part_{part}.obj"
        local = Mesh(submeshes[part].vertices - frame_origin(part), submeshes[part].faces)
        save_obj(local, os.path.join(out_dir, mesh_file))
        link = ET.SubElement(robot, "link", name=f"part_{part}")
        _inertial_xml(link)
        visual = ET.SubElement(link, "visual")
        geom = ET.SubElement(visual, "geometry")
        ET.SubElement(geom, "mesh", filename=mesh_file)

    for part in range(structure.part_count):
        if part == base:
            continue
        parent = structure.parents[part]
        m = structure.motions[part]
        parent_origin = frame_origin(parent)
        origin_xyz = frame_origin(part) - parent_origin
        if m.motion_type == BOTH:
            pivot = f"part_{part}__pivot"
            link = ET.SubElement(robot, "link", name=pivot)
            _inertial_xml(link)
            rev = ET.SubElement(robot, "joint", name=f"joint_rev_{part}", type="revolute")
            ET.SubElement(rev, "parent", link=f"part_{parent}")
            ET.SubElement(rev, "child", link=pivot)
            ET.SubElement(rev, "origin", xyz=_fmt(origin_xyz), rpy="0 0 0")
            ET.SubElement(rev, "axis", xyz=_fmt(m.revolute_axis[0]))
            lo, hi = m.revolute_range
            ET.SubElement(rev, "limit", lower=f"{-lo:.17g}", upper=f"{hi:.17g}",
                          effort="1", velocity="1")
            pri = ET.SubElement(robot, "joint", name=f"joint_pri_{part}", type="prismatic")
            ET.SubElement(pri, "parent", link=pivot)
            ET.SubElement(pri, "child", link=f"part_{part}")
            ET.SubElement(pri, "origin", xyz="0 0 0", rpy="0 0 0")
            ET.SubElement(pri, "axis", xyz=_fmt(m.prismatic_direction))
            lo, hi = m.prismatic_range
            ET.SubElement(pri, "limit", lower=f"{-lo:.17g}", upper=f"{hi:.17g}",
                          effort="1", velocity="1")
            continue
        if m.motion_type == REVOLUTE:
            jtype, axis, (lo, hi) = "revolute", m.revolute_axis[0], m.revolute_range
        elif m.motion_type == PRISMATIC:
            jtype, axis, (lo, hi) = "prismatic", m.prismatic_direction, m.prismatic_range
        else:
            jtype, axis, (lo, hi) = "fixed", None, (0.0, 0.0)
        joint = ET.SubElement(robot, "joint", name=f"joint_{part}", type=jtype)
        ET.SubElement(joint, "parent", link=f"part_{parent}")
        ET.SubElement(joint, "child", link=f"part_{part}")
        ET.SubElement(joint, "origin", xyz=_fmt(origin_xyz), rpy="0 0 0")
        if axis is not None:
            ET.SubElement(joint, "axis", xyz=_fmt(axis))
            ET.SubElement(joint, "limit", lower=f"{-lo:.17g}", upper=f"{hi:.17g}",
                          effort="1", velocity="1")

    tree = ET.ElementTree(robot)
    ET.indent(tree)
    urdf_path = os.path.join(out_dir, f"{name}.urdf")
    tree.write(urdf_path, xml_declaration=True, encoding="unicode")
    return urdf_path


def import_urdf(path) -> tuple[Mesh, ArticulatedStructure]:
    """Inverse of :func:`export_urdf` for files this toolkit emits.

    Also reads minimal hand-written URDFs whose links carry mesh geometry.
    Geometry-free pivot links between a revolute and a prismatic joint are
    collapsed back into a single 'both' part.
    """
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise StructureError(f"cannot parse URDF {path}: {exc}") from exc
    if root.tag != "robot":
        raise StructureError(f"{path}: root element is {root.tag!r}, expected 'robot'")
    base_dir = os.path.dirname(os.path.abspath(path))

    mesh_files: dict[str, str] = {}
    link_names = []
    for link in root.findall("link"):
        lname = link.get("name")
        link_names.append(lname)
        mesh_el = link.find("visual/geometry/mesh")
        if mesh_el is not None:
            mesh_files[lname] = os.path.join(base_dir, mesh_el.get("filename"))

    joints = []
    for joint in root.findall("joint"):
        limit = joint.find("limit")
        joints.append({
            "type": joint.get("type"),
            "parent": joint.find("parent").get("link"),
            "child": joint.find("child").get("link"),
            "origin": np.array(
                [float(x) for x in joint.find("origin").get("xyz", "0 0 0").split()]
            ) if joint.find("origin") is not None else np.zeros(3),
            "axis": np.array(
                [float(x) for x in joint.find("axis").get("xyz").split()]
            ) if joint.find("axis") is not None else None,
            "lower": float(limit.get("lower", 0.0)) if limit is not None else 0.0,
            "upper": float(limit.get("upper", 0.0)) if limit is not None else 0.0,
        })

    children_of = {j["child"] for j in joints}
    roots = [l for l in link_names if l not in children_of]
    if len(roots) != 1:
        raise StructureError(f"{path}: expected one root link, found {roots}")

    # accumulate frame origins from the root down
    origin_of = {roots[0]: np.zeros(3)}
    pending = list(joints)
    while pending:
        progressed = False
        for j in list(pending):
            if j["parent"] in origin_of:
                origin_of[j["child"]] = origin_of[j["parent"]] + j["origin"]
                pending.remove(j)
                progressed = True
        if not progressed:
            raise StructureError(f"{path}: joint graph is not a tree rooted at {roots[0]}")

    # collapse geometry-free pivot links: revolute into pivot + prismatic out
    inbound = {j["child"]: j for j in joints}
    part_links = [l for l in link_names if l in mesh_files]
    if not part_links:
        raise StructureError(f"{path}: no links with mesh geometry")

    def resolve_joint(link: str):
        """Walk up through pivot links; returns (parent_part, motion)."""
        j = inbound.get(link)
        if j is None:
            return None, fixed_motion()
        parent = j["parent"]
        if parent in mesh_files:
            upstream = None
        else:
            upstream = inbound.get(parent)
            if upstream is None or parent != upstream["child"]:
                raise StructureError(f"{path}: pivot link {parent} has no inbound joint")
        if upstream is None:
            if j["type"] == "revolute":
                m = revolute_motion(j["axis"], origin_of[link], -j["lower"], j["upper"])
            elif j["type"] == "prismatic":
                m = prismatic_motion(j["axis"], -j["lower"], j["upper"])
            elif j["type"] == "fixed":
                m = fixed_motion()
            else:
                raise StructureError(f"{path}: unsupported joint type {j['type']!r}")
            return parent, m
        if upstream["type"] != "revolute" or j["type"] != "prismatic":
            raise StructureError(
                f"{path}: pivot link {parent} must sit between revolute and prismatic joints"
            )
        m = MotionSpec(
            BOTH,
            prismatic_direction=j["axis"] / np.linalg.norm(j["axis"]),
            prismatic_range=(-j["lower"], j["upper"]),
            revolute_axis=(
                upstream["axis"] / np.linalg.norm(upstream["axis"]),
                origin_of[parent],
            ),
            revolute_range=(-upstream["lower"], upstream["upper"]),
        )
        return upstream["parent"], m

    part_ids = {lname: i for i, lname in enumerate(part_links)}
    parents: list[Optional[int]] = [None] * len(part_links)
    motions: list[MotionSpec] = [fixed_motion()] * len(part_links)
    all_vertices, all_faces, face_labels = [], [], []
    v_offset = 0
    for lname in part_links:
        part = part_ids[lname]
        sub = load_mesh(mesh_files[lname])
        verts = sub.vertices + origin_of[lname]
        all_vertices.append(verts)
        all_faces.append(sub.faces + v_offset)
        face_labels.append(np.full(sub.n_faces, part, dtype=np.int64))
        v_offset += sub.n_vertices
        parent_link, motion = resolve_joint(lname)
        parents[part] = part_ids[parent_link] if parent_link is not None else None
        if motion.has_revolute:
            direction, point = motion.revolute_axis
            motion.revolute_axis = (direction / np.linalg.norm(direction), point)
        if motion.has_prismatic:
            motion.prismatic_direction = (
                motion.prismatic_direction / np.linalg.norm(motion.prismatic_direction)
            )
        motions[part] = motion

    mesh = Mesh(np.concatenate(all_vertices), np.concatenate(all_faces))
    structure = ArticulatedStructure(
        len(part_links), np.concatenate(face_labels), parents, motions
    )
    structure.validate(mesh)
    return mesh, structure


# ---------------------------------------------------------------------------
# synthetic objects


_BOX_QUADS = (
    (0, 3, 2, 1),  # -z
    (4, 5, 6, 7),  # +z
    (0, 1, 5, 4),  # -y
    (2, 3, 7, 6),  # +y
    (0, 4, 7, 3),  # -x
    (1, 2, 6, 5),  # +x
)


def _box_mesh(lo, hi) -> Mesh:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    verts = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    faces = []
    for a, b, c, d in _BOX_QUADS:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return Mesh(verts, np.array(faces))


def _merge_parts(parts: list[Mesh]) -> tuple[Mesh, np.ndarray]:
    verts, faces, labels = [], [], []
    v_off = 0
    for idx, m in enumerate(parts):
        verts.append(m.vertices)
        faces.append(m.faces + v_off)
        labels.append(np.full(m.n_faces, idx, dtype=np.int64))
        v_off += m.n_vertices
    return Mesh(np.concatenate(verts), np.concatenate(faces)), np.concatenate(labels)


def _door_axis(cell, hinge: str, front_x: float) -> tuple[np.ndarray, np.ndarray]:
    """Hinge line (direction, point) for a front-face door; +angle opens outward (+x)."""
    (y0, y1), (z0, z1) = cell
    if hinge == "left":
        return np.array([0.0, 0.0, -1.0]), np.array([front_x, y0, (z0 + z1) / 2])
    if hinge == "right":
        return np.array([0.0, 0.0, 1.0]), np.array([front_x, y1, (z0 + z1) / 2])
    if hinge == "bottom":
        return np.array([0.0, 1.0, 0.0]), np.array([front_x, (y0 + y1) / 2, z0])
    return np.array([0.0, -1.0, 0.0]), np.array([front_x, (y0 + y1) / 2, z1])


def synth_object(kind: str, rng_seed) -> tuple[Mesh, ArticulatedStructure]:
    """Procedural articulated furniture: a hollow box with drawers/doors/panels.

    The base is five wall slabs around an open front facing +x.  Children
    fill a grid of front cells: drawers slide along +x, doors swing outward
    about one front edge, and occasional panels stay fixed.  Deterministic
    per seed; the ground-truth structure is returned alongside the mesh.
    """
    if kind not in ("cabinet", "microwave", "mixed"):
        raise ValueError(f"synth_object: unknown kind {kind!r}")
    rng = np.random.default_rng(rng_seed)
    if kind == "mixed":
        kind = "cabinet" if rng.random() < 0.5 else "microwave"
        child_kinds = ("drawer", "door", "panel")
    elif kind == "cabinet":
        child_kinds = ("drawer", "door")
    else:
        child_kinds = ("door", "panel")

    depth = rng.uniform(0.5, 0.9)
    width = rng.uniform(0.6, 1.2)
    height = rng.uniform(0.6, 1.4)
    t = rng.uniform(0.02, 0.04)
    gap = 0.012
    x0, x1 = -depth / 2, depth / 2
    y0, y1 = -width / 2, width / 2
    z0, z1 = -height / 2, height / 2

    walls = [
        _box_mesh((x0, y0, z0), (x0 + t, y1, z1)),              # back
        _box_mesh((x0, y0, z0), (x1, y0 + t, z1)),              # left
        _box_mesh((x0, y1 - t, z0), (x1, y1, z1)),              # right
        _box_mesh((x0 + t, y0 + t, z0), (x1, y1 - t, z0 + t)),  # bottom
        _box_mesh((x0 + t, y0 + t, z1 - t), (x1, y1 - t, z1)),  # top
    ]
    base_verts = [w.vertices for w in walls]
    base_faces, off = [], 0
    for w in walls:
        base_faces.append(w.faces + off)
        off += w.n_vertices
    base = Mesh(np.concatenate(base_verts), np.concatenate(base_faces))

    open_y = (y0 + t + gap, y1 - t - gap)
    open_z = (z0 + t + gap, z1 - t - gap)

    if kind == "microwave":
        rows, cols = 1, 1 if rng.random() < 0.6 else 2
    else:
        rows = int(rng.integers(1, 4))
        cols = int(rng.integers(1, 3))
        while rows * cols > 6:
            rows -= 1
    cell_w = (open_y[1] - open_y[0] - gap * (cols - 1)) / cols
    cell_h = (open_z[1] - open_z[0] - gap * (rows - 1)) / rows

    parts = [base]
    motions: list[MotionSpec] = [fixed_motion()]
    for r in range(rows):
        for c in range(cols):
            cy0 = open_y[0] + c * (cell_w + gap)
            cz0 = open_z[0] + r * (cell_h + gap)
            cell = ((cy0, cy0 + cell_w), (cz0, cz0 + cell_h))
            if kind == "microwave":
                child = "door" if (r, c) == (0, 0) else "panel"
            else:
                child = child_kinds[rng.integers(0, len(child_kinds))]
            if child == "drawer":
                d_depth = depth - t - 2 * gap
                lo = (x1 - d_depth, cell[0][0], cell[1][0])
                hi = (x1, cell[0][1], cell[1][1])
                parts.append(_box_mesh(lo, hi))
                l_max = float(rng.uniform(0.4, 0.8)) * d_depth
                motions.append(prismatic_motion((1.0, 0.0, 0.0), 0.0, l_max))
            else:
                td = t
                lo = (x1 + gap / 2, cell[0][0], cell[1][0])
                hi = (x1 + gap / 2 + td, cell[0][1], cell[1][1])
                parts.append(_box_mesh(lo, hi))
                if child == "panel":
                    motions.append(fixed_motion())
                else:
                    hinge = ("left", "right", "bottom", "top")[rng.integers(0, 4)]
                    direction, point = _door_axis(cell, hinge, x1 + gap / 2)
                    theta = float(rng.uniform(np.pi / 3, np.pi / 2))
                    motions.append(revolute_motion(direction, point, 0.0, theta))

    mesh, labels = _merge_parts(parts)
    structure = ArticulatedStructure(
        part_count=len(parts),
        face_labels=labels,
        parents=[None] + [0] * (len(parts) - 1),
        motions=motions,
    )
    structure.validate(mesh)
    return mesh, structure
