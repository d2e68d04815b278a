"""Mitsuba-style scene XML (a small subset) and PLY mesh payloads.

Supported layout::

    <scene version="2.1.0">
      <bsdf type="diffuse" id="mat-concrete"/>
      <shape type="ply" id="wall_north">
        <string name="filename" value="meshes/wall_north.ply"/>
        <ref id="mat-concrete"/>
        <boolean name="sheet" value="true"/>
      </shape>
      <shape type="mesh" id="floor">
        <string name="vertices" value="0 0 0  1 0 0  1 1 0"/>
        <string name="indices" value="0 1 2"/>
        <string name="material" value="concrete"/>
      </shape>
    </scene>

PLY payloads may carry a per-face ``material_index`` property; indices refer
to the ``comment materials ...`` header line, or to the MaterialClass order
when that comment is absent.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .materials import MaterialClass
from .scene import MeshError, Scene, TriMesh


class SceneLoadError(ValueError):
    pass


def read_ply_mesh(path: str | Path, default_material: MaterialClass | None, object_id: str, sheet: bool = False) -> TriMesh:
    ply = PlyData.read(str(path))
    vert = ply["vertex"]
    vertices = np.column_stack([vert["x"], vert["y"], vert["z"]]).astype(np.float64)
    face_el = ply["face"]
    names = face_el.data.dtype.names
    key = "vertex_indices" if "vertex_indices" in names else "vertex_index"
    rows = face_el[key]
    if len(rows) and any(len(r) != 3 for r in rows):
        raise SceneLoadError(f"shape {object_id!r}: only triangle faces are supported ({path})")
    faces = np.array([list(r) for r in rows], dtype=np.int64).reshape(-1, 3)

    if "material_index" in names:
        table = list(MaterialClass)
        for c in ply.comments:
            if c.startswith("materials "):
                table = [MaterialClass.parse(tok) for tok in c.split()[1:]]
        idx = np.asarray(face_el["material_index"], dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(table)):
            raise SceneLoadError(f"shape {object_id!r}: material_index out of range ({path})")
        mats = [table[i] for i in idx]
    elif default_material is not None:
        mats = [default_material] * len(faces)
    else:
        raise SceneLoadError(f"shape {object_id!r} has no material")
    return TriMesh(vertices, faces, mats, object_id=object_id, sheet=sheet)


def write_ply_mesh(mesh: TriMesh, path: str | Path) -> None:
    table = sorted(set(mesh.face_material), key=list(MaterialClass).index)
    lookup = {m: i for i, m in enumerate(table)}
    vert = np.empty(len(mesh.vertices), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,)), ("material_index", "u1")])
    face["vertex_indices"] = mesh.faces
    face["material_index"] = [lookup[m] for m in mesh.face_material]
    ply = PlyData(
        [PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
        text=False,
        byte_order="<",
        comments=["materials " + " ".join(m.value for m in table)],
    )
    ply.write(str(path))


def _props(shape: ET.Element) -> dict[str, str]:
    out = {}
    for child in shape:
        if child.tag in ("string", "boolean", "float", "integer") and "name" in child.attrib:
            out[child.attrib["name"]] = child.attrib.get("value", "")
    return out


def _shape_material(shape: ET.Element, props: dict[str, str], sid: str) -> MaterialClass | None:
    label = props.get("material")
    if label is None:
        ref = shape.find("ref")
        if ref is None:
            bsdf = shape.find("bsdf")
            label = bsdf.attrib.get("id") if bsdf is not None else None
        else:
            label = ref.attrib.get("id")
    if label is None:
        return None
    try:
        return MaterialClass.parse(label)
    except ValueError:
        raise SceneLoadError(f"shape {sid!r}: material {label!r} is not a known material class") from None


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise SceneLoadError(f"{path}: malformed XML at line {line}, column {col}: {exc}") from None
    except FileNotFoundError:
        raise SceneLoadError(f"scene file not found: {path}") from None
    if root.tag != "scene":
        raise SceneLoadError(f"{path}: root element must be <scene>, got <{root.tag}>")

    meshes = []
    for i, shape in enumerate(root.iter("shape")):
        sid = shape.attrib.get("id", f"shape_{i}")
        stype = shape.attrib.get("type", "")
        props = _props(shape)
        material = _shape_material(shape, props, sid)
        sheet = props.get("sheet", "false").lower() == "true"
        try:
            if stype in ("ply",):
                fname = props.get("filename")
                if not fname:
                    raise SceneLoadError(f"shape {sid!r}: missing filename")
                mesh_path = (path.parent / fname).resolve()
                if not mesh_path.is_file():
                    raise SceneLoadError(f"shape {sid!r}: mesh file not found: {mesh_path}")
                meshes.append(read_ply_mesh(mesh_path, material, sid, sheet))
            elif stype == "mesh":
                if material is None:
                    raise SceneLoadError(f"shape {sid!r} has no material")
                verts = np.array(props.get("vertices", "").split(), dtype=np.float64)
                idx = np.array(props.get("indices", "").split(), dtype=np.int64)
                if verts.size % 3 or idx.size % 3:
                    raise SceneLoadError(f"shape {sid!r}: inline arrays are not triples")
                meshes.append(TriMesh(verts.reshape(-1, 3), idx.reshape(-1, 3), material, object_id=sid, sheet=sheet))
            else:
                raise SceneLoadError(f"shape {sid!r}: unsupported shape type {stype!r}")
        except MeshError as exc:
            raise SceneLoadError(str(exc)) from None
    return Scene(meshes)


def save_scene(scene: Scene, path: str | Path, mesh_dir: str = "meshes") -> None:
    """Write scene XML plus one binary PLY per mesh under ``mesh_dir``."""
    path = Path(path)
    out_dir = path.parent / mesh_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    root = ET.Element("scene", version="2.1.0")
    used = sorted({m for mesh in scene.meshes for m in mesh.face_material}, key=list(MaterialClass).index)
    for m in used:
        ET.SubElement(root, "bsdf", type="diffuse", id=f"mat-{m.value}")
    for mesh in scene.meshes:
        fname = f"{mesh_dir}/{mesh.object_id}.ply"
        write_ply_mesh(mesh, path.parent / fname)
        shape = ET.SubElement(root, "shape", type="ply", id=mesh.object_id)
        ET.SubElement(shape, "string", name="filename", value=fname)
        mats = set(mesh.face_material)
        if len(mats) == 1:
            ET.SubElement(shape, "ref", id=f"mat-{next(iter(mats)).value}")
        if mesh.sheet:
            ET.SubElement(shape, "boolean", name="sheet", value="true")
    ET.indent(root)
    path.write_text(ET.tostring(root, encoding="unicode") + "\n")
