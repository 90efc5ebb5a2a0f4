"""PLY clouds, JSON records and scan-pair directories."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, RigidTransform, as_points
from .config import parse_pairs
from .errors import InvalidInput, ParseError
from .matching import CorrespondenceSet
from .scenes import Primitive, ScanPair, SceneSpec, fig1_primitives

log = logging.getLogger(__name__)

SCHEMA = 1

# PLY scalar type name -> little-endian numpy code
PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
FORMATS = ("ascii", "binary_little_endian")


# -- PLY -----------------------------------------------------------------------------

@dataclass
class _Property:
    name: str
    dtype: str | None            # None: unsupported scalar type, skipped on read
    list_types: tuple | None = None   # (count dtype, item dtype) for list properties
    line: int = 0


@dataclass
class _Element:
    name: str
    count: int
    props: list
    line: int


def _parse_header(fh):
    """Parse the header; returns (format, elements, number of header lines)."""
    lines = []
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError("header ends before end_header", len(lines) + 1)
        try:
            text = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII bytes in header", len(lines) + 1) from None
        lines.append(text)
        if len(lines) == 1 and text != "ply":
            raise ParseError("file does not start with 'ply'", 1)
        if text == "end_header":
            break
    fmt = None
    elements: list[_Element] = []
    for no, text in enumerate(lines[1:-1], start=2):
        tok = text.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in FORMATS and tok[1] != "binary_big_endian":
                raise ParseError(f"bad format line {text!r}", no)
            if tok[1] == "binary_big_endian":
                raise ParseError("binary_big_endian PLY is not supported", no)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"bad element line {text!r}", no)
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"element count {tok[2]!r} is not an integer", no) from None
            if count < 0:
                raise ParseError("negative element count", no)
            elements.append(_Element(tok[1], count, [], no))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", no)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise ParseError(f"bad list property {text!r}", no)
                ct, it = PLY_TYPES.get(tok[2]), PLY_TYPES.get(tok[3])
                if ct is None or it is None:
                    raise ParseError(f"unknown list property types in {text!r}", no)
                elements[-1].props.append(_Property(tok[4], None, (ct, it), no))
            else:
                if len(tok) != 3:
                    raise ParseError(f"bad property line {text!r}", no)
                dt = PLY_TYPES.get(tok[1])
                if dt is None:
                    log.warning("PLY header line %d: skipping property %r of unsupported type %r",
                                no, tok[2], tok[1])
                elements[-1].props.append(_Property(tok[2], dt, None, no))
        else:
            raise ParseError(f"unexpected header line {text!r}", no)
    if fmt is None:
        raise ParseError("missing format line", 2)
    return fmt, elements, len(lines)


def _read_ascii(fh, elements, header_lines):
    body = fh.read().decode("ascii", errors="replace").splitlines()
    out = {}
    pos = 0
    for el in elements:
        cols = {p.name: [] for p in el.props if p.list_types is None and p.dtype is not None}
        lists = {p.name: [] for p in el.props if p.list_types is not None}
        for _ in range(el.count):
            # skip blank lines between records
            while pos < len(body) and not body[pos].strip():
                pos += 1
            if pos >= len(body):
                raise ParseError(f"element {el.name!r} declares {el.count} rows, file ends early",
                                 header_lines + pos + 1)
            tok = body[pos].split()
            no = header_lines + pos + 1
            pos += 1
            k = 0
            try:
                for p in el.props:
                    if p.dtype is None and p.list_types is None:
                        tok[k]      # unsupported type: the value is skipped
                        k += 1
                    elif p.list_types is None:
                        cols[p.name].append(float(tok[k]))
                        k += 1
                    else:
                        n = int(tok[k])
                        lists[p.name].append([float(v) for v in tok[k + 1:k + 1 + n]])
                        if len(lists[p.name][-1]) != n:
                            raise IndexError
                        k += 1 + n
            except (IndexError, ValueError):
                raise ParseError(f"malformed {el.name!r} row", no) from None
            if k != len(tok):
                raise ParseError(f"{el.name!r} row has {len(tok)} values, expected {k}", no)
        out[el.name] = {**{n: np.asarray(v, dtype=np.float64) for n, v in cols.items()},
                        **{n: v for n, v in lists.items()}}
    return out


def _read_binary(fh, elements, header_lines):
    data = fh.read()
    off = 0
    out = {}
    for el in elements:
        for p in el.props:
            if p.dtype is None and p.list_types is None:
                raise ParseError(f"property {p.name!r} has an unsupported type, binary rows cannot be "
                                 "skipped", p.line)
        if all(p.list_types is None for p in el.props):
            dt = np.dtype([(p.name, "<" + p.dtype) for p in el.props])
            need = dt.itemsize * el.count
            if off + need > len(data):
                raise ParseError(f"element {el.name!r} declares {el.count} rows, file ends early",
                                 el.line)
            rec = np.frombuffer(data, dtype=dt, count=el.count, offset=off)
            off += need
            out[el.name] = {p.name: rec[p.name].copy() for p in el.props}
            continue
        # list properties force a row-by-row walk
        cols = {p.name: [] for p in el.props}
        try:
            for _ in range(el.count):
                for p in el.props:
                    if p.list_types is None:
                        t = np.dtype("<" + p.dtype)
                        cols[p.name].append(np.frombuffer(data, t, 1, off)[0])
                        off += t.itemsize
                    else:
                        ct, it = (np.dtype("<" + t) for t in p.list_types)
                        n = int(np.frombuffer(data, ct, 1, off)[0])
                        off += ct.itemsize
                        cols[p.name].append(np.frombuffer(data, it, n, off).copy())
                        off += it.itemsize * n
        except ValueError:
            raise ParseError(f"element {el.name!r} declares {el.count} rows, file ends early",
                             el.line) from None
        out[el.name] = {n: (np.asarray(v) if v and np.ndim(v[0]) == 0 else v) for n, v in cols.items()}
    return out


def _read(path):
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_header(fh)
        reader = _read_ascii if fmt == "ascii" else _read_binary
        return elements, reader(fh, elements, header_lines)


def read_ply_elements(path) -> dict:
    """Every element of a PLY file as {element: {property: values}}."""
    return _read(path)[1]


def read_ply(path) -> PointCloud:
    """Vertex x/y/z of an ASCII or binary little-endian PLY.

    Vertex properties other than the coordinates are dropped with a warning.
    """
    elements, data = _read(path)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element")
    names = [p.name for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element has no {axis!r} property", vertex.line)
    for p in vertex.props:
        if p.name in ("x", "y", "z") and (p.list_types is not None or p.dtype is None or p.dtype[0] != "f"):
            raise ParseError(f"coordinate {p.name!r} must be a float property", p.line or vertex.line)
    skipped = [p.name for p in vertex.props if p.name not in ("x", "y", "z") and p.dtype is not None]
    if skipped:
        log.warning("PLY %s: ignoring vertex properties %s", path, ", ".join(skipped))
    v = data["vertex"]
    if vertex.count == 0:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.column_stack([np.asarray(v[a], dtype=np.float64) for a in "xyz"]))


def write_ply(path, points, binary: bool = True, colors=None, edges=None) -> None:
    """Write vertices (double x/y/z, optional uchar rgb) and optional edges.

    ASCII output keeps 9 significant digits per coordinate.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
    if edges is not None:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise InvalidInput("edge endpoint out of range")
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            "comment written by sgfeat", f"element vertex {n}",
            "property double x", "property double y", "property double z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    if edges is not None:
        head += [f"element edge {edges.shape[0]}", "property int vertex1", "property int vertex2"]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            if colors is not None:
                rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
            fh.write(rec.tobytes())
            if edges is not None:
                fh.write(edges.astype("<i4").tobytes())
        else:
            rows = []
            for i in range(n):
                row = " ".join(f"{v:.9g}" for v in pts[i])
                if colors is not None:
                    row += " " + " ".join(str(int(c)) for c in colors[i])
                rows.append(row)
            if edges is not None:
                rows += [f"{a} {b}" for a, b in edges]
            fh.write(("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))


# -- JSON ------------------------------------------------------------------------------

def transform_to_list(T: RigidTransform) -> list:
    return [float(v) for v in T.matrix().reshape(-1)]


def transform_from_list(values) -> RigidTransform:
    m = np.asarray(values, dtype=np.float64)
    if m.size != 16:
        raise InvalidInput("a transform needs 16 row-major values")
    return RigidTransform.from_matrix(m.reshape(4, 4))


def corr_to_dict(c: CorrespondenceSet) -> dict:
    d = {"level": c.level, "src": c.src.tolist(), "tgt": c.tgt.tolist(), "score": c.score.tolist()}
    if c.patch is not None:
        d["patch"] = c.patch.tolist()
    return d


def corr_from_dict(d: dict) -> CorrespondenceSet:
    return CorrespondenceSet(np.asarray(d["src"], dtype=np.int64), np.asarray(d["tgt"], dtype=np.int64),
                             np.asarray(d["score"], dtype=np.float64), d.get("level", "dense"),
                             None if d.get("patch") is None else np.asarray(d["patch"], dtype=np.int64))


def write_json(path, doc: dict) -> None:
    doc = {"schema": SCHEMA, **doc}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise ParseError(f"{path}: expected a schema {SCHEMA} document")
    return doc


def strip_timings(doc):
    """Copy of a record with every ``timings`` entry removed (for reproducibility checks)."""
    if isinstance(doc, dict):
        return {k: strip_timings(v) for k, v in doc.items() if k != "timings"}
    if isinstance(doc, list):
        return [strip_timings(v) for v in doc]
    return doc


# -- scene specs -----------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteSpec:
    """What ``gen`` builds: the scene plus the per-pair overlap and noise settings."""

    primitives: tuple
    density: float = 700.0
    overlap_min: float = 0.3
    overlap_max: float = 1.0
    noise_sigma: float = 0.005
    max_angle_deg: float = 180.0
    max_translation: float = 5.0
    tau: float = 0.05

    def __post_init__(self):
        if not self.primitives:
            raise InvalidInput("a scene needs at least one primitive")
        if not 0 < self.overlap_min <= self.overlap_max <= 1:
            raise InvalidInput("need 0 < overlap_min <= overlap_max <= 1")
        if self.noise_sigma < 0 or not self.density > 0 or not self.tau > 0:
            raise InvalidInput("density and tau must be positive, noise_sigma non-negative")
        if not 0 <= self.max_angle_deg <= 180 or self.max_translation < 0:
            raise InvalidInput("max_angle_deg must lie in [0, 180], max_translation >= 0")

    def scene(self, seed: int) -> SceneSpec:
        return SceneSpec(self.primitives, self.density, seed)


_SUITE_FLOATS = ("density", "overlap_min", "overlap_max", "noise_sigma", "max_angle_deg",
                 "max_translation", "tau")


def _parse_primitive(value: str, line: int) -> Primitive:
    # kind s1 [s2 [s3]] @ cx cy cz [@ rx ry rz]
    parts = [p.split() for p in value.split("@")]
    if len(parts) not in (2, 3) or not parts[0]:
        raise ParseError("primitive must read 'kind sizes @ cx cy cz [@ rx ry rz]'", line)
    try:
        kind, size = parts[0][0], tuple(float(v) for v in parts[0][1:])
        center = tuple(float(v) for v in parts[1])
        rot = tuple(float(v) for v in parts[2]) if len(parts) == 3 else (0.0, 0.0, 0.0)
    except ValueError:
        raise ParseError(f"non-numeric value in primitive {value!r}", line) from None
    if len(center) != 3 or len(rot) != 3:
        raise ParseError("center and rotation need three values each", line)
    try:
        return Primitive(kind, size, center, rot)
    except InvalidInput as e:
        raise ParseError(str(e), line) from None


def parse_scene_spec(text: str) -> SuiteSpec:
    """Flat ``key = value`` scene text.

    ``preset = fig1`` starts from the hard-case scene; each ``primitive`` line
    adds one surface; the remaining keys are the SuiteSpec fields.
    """
    prims = []
    values = {}
    for key, value, no in parse_pairs(text):
        if key == "preset":
            if value != "fig1":
                raise ParseError(f"unknown scene preset {value!r}", no)
            prims.extend(fig1_primitives())
        elif key == "primitive":
            prims.append(_parse_primitive(value, no))
        elif key in _SUITE_FLOATS:
            try:
                values[key] = float(value)
            except ValueError:
                raise ParseError(f"cannot read {value!r} as float", no) from None
        else:
            raise ParseError(f"unknown scene key {key!r}", no)
    if not prims:
        raise ParseError("scene spec has no preset and no primitive lines")
    try:
        return SuiteSpec(tuple(prims), **values)
    except InvalidInput as e:
        raise ParseError(str(e)) from None


def load_scene_spec(path) -> SuiteSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_scene_spec(fh.read())


# -- pair directories ------------------------------------------------------------------

def pair_dirname(i: int) -> str:
    return f"pair_{i:04d}"


def write_pair(directory, pair: ScanPair, binary: bool = True) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "source.ply", pair.source.points, binary)
    write_ply(d / "target.ply", pair.target.points, binary)
    write_json(d / "gt.json", {"kind": "ground_truth", "T_gt": transform_to_list(pair.T_gt),
                               "gt_corr": corr_to_dict(pair.gt_corr), "overlap": pair.overlap,
                               "meta": pair.meta})
    return d


def read_ground_truth(path) -> tuple[RigidTransform, CorrespondenceSet, dict]:
    doc = read_json(path)
    try:
        return transform_from_list(doc["T_gt"]), corr_from_dict(doc["gt_corr"]), doc
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path}: malformed ground truth ({e})") from None


def read_pair(directory) -> ScanPair:
    d = Path(directory)
    T, gt, doc = read_ground_truth(d / "gt.json")
    return ScanPair(read_ply(d / "source.ply"), read_ply(d / "target.ply"), T, gt,
                    float(doc.get("overlap", 0.0)), dict(doc.get("meta", {})))


def list_pairs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidInput(f"{d} is not a directory")
    found = sorted(p for p in d.iterdir() if p.is_dir() and (p / "gt.json").is_file())
    if not found:
        raise InvalidInput(f"no scan pairs under {d}")
    return found

