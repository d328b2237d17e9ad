"""File formats: point clouds (PLY, XYZ), correspondences (CSV), rigid
transforms (4x4 text), registration reports (JSON) and key-value configs.

Readers raise :class:`~qreg.errors.ParseError` with a line number (text) or
byte offset (binary) on malformed input. Writes to one path are not
synchronised; callers running in parallel must use distinct paths.
"""

from __future__ import annotations

import ast
import configparser
import csv
import io as _io
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Literal

import numpy as np

from qreg.core import Correspondences, PointCloud, RigidTransform
from qreg.errors import ConfigError, ParseError

CloudFormat = Literal["ply_binary", "ply_ascii", "xyz"]
CLOUD_FORMATS: tuple[str, ...] = ("ply_binary", "ply_ascii", "xyz")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_COORDS = ("x", "y", "z")
_NORMALS = ("nx", "ny", "nz")


class UnsupportedPropertyWarning(UserWarning):
    """A PLY vertex property other than coordinates and normals was ignored."""


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


def _guess_format(path: Path) -> CloudFormat:
    if path.suffix.lower() == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        return "ply_ascii" if b"format ascii" in head else "ply_binary"
    return "xyz"


def read_cloud(path: str | os.PathLike, format: CloudFormat | None = None) -> PointCloud:
    """Load a cloud in file order. ``format`` defaults to a guess from the extension/header."""
    path = Path(path)
    fmt = format or _guess_format(path)
    data = path.read_bytes()
    if fmt == "xyz":
        return _read_xyz(data, path)
    if fmt in ("ply_binary", "ply_ascii"):
        return _read_ply(data, path)
    raise ValueError(f"unknown cloud format {fmt!r}")


def write_cloud(cloud: PointCloud, path: str | os.PathLike, format: CloudFormat = "ply_binary") -> None:
    path = Path(path)
    pts = cloud.points
    has_normals = cloud.normals is not None
    if format == "xyz":
        cols = np.hstack([pts, cloud.normals]) if has_normals else pts
        with open(path, "w", encoding="utf-8") as fh:
            for row in cols:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        return
    if format not in ("ply_binary", "ply_ascii"):
        raise ValueError(f"unknown cloud format {format!r}")
    names = _COORDS + (_NORMALS if has_normals else ())
    header = ["ply", "format " + ("ascii" if format == "ply_ascii" else "binary_little_endian") + " 1.0"]
    header.append(f"element vertex {len(pts)}")
    header.extend(f"property double {n}" for n in names)
    header.append("end_header")
    cols = np.hstack([pts, cloud.normals]) if has_normals else pts
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if format == "ply_ascii":
            for row in cols:
                fh.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))
        else:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())


def _read_xyz(data: bytes, path: Path) -> PointCloud:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8 text", exc.start, path) from None
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 6) or (width is not None and len(parts) != width):
            raise ParseError(f"expected 3 or 6 columns consistently, got {len(parts)}", lineno, path)
        width = len(parts)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise ParseError(f"non-numeric value in {line!r}", lineno, path) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite coordinate", lineno, path)
        rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    try:
        return PointCloud(arr[:, :3], arr[:, 3:] if width == 6 else None)
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def _parse_ply_header(data: bytes, path: Path):
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 0, path)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("header has no end_header", 0, path)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    try:
        header_lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("header is not ASCII", exc.start, path) from None

    fmt = None
    elements: list[dict[str, Any]] = []
    for lineno, raw in enumerate(header_lines, start=1):
        parts = raw.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        try:
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
            elif parts[0] == "property":
                if not elements:
                    raise ParseError("property before any element", lineno, path)
                if parts[1] == "list":
                    elements[-1]["props"].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]], None))
            else:
                raise ParseError(f"unknown header keyword {parts[0]!r}", lineno, path)
        except (IndexError, ValueError, KeyError):
            raise ParseError(f"malformed header line {raw!r}", lineno, path) from None
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", None, path)
    for el in elements:
        if el["count"] < 0:
            raise ParseError(f"negative element count for {el['name']!r}", None, path)
        names = [p[0] for p in el["props"]]
        if len(set(names)) != len(names):
            raise ParseError(f"duplicate property names in element {el['name']!r}", None, path)
        if el["count"] and not el["props"]:
            raise ParseError(f"element {el['name']!r} has rows but no properties", None, path)
    return fmt, elements, body_start, len(header_lines) + 1


def _vertex_cloud(columns: dict[str, np.ndarray], path: Path) -> PointCloud:
    missing = [c for c in _COORDS if c not in columns]
    if missing:
        raise ParseError(f"vertex element lacks properties {missing}", None, path)
    extra = [n for n in columns if n not in _COORDS + _NORMALS]
    if extra:
        warnings.warn(f"{path}: ignored vertex properties {extra}", UnsupportedPropertyWarning, stacklevel=3)
    pts = np.column_stack([columns[c].astype(np.float64) for c in _COORDS]) if columns["x"].size else np.empty((0, 3))
    if not np.all(np.isfinite(pts)):
        raise ParseError("non-finite vertex coordinate", None, path)
    normals = None
    if all(n in columns for n in _NORMALS) and columns["nx"].size:
        normals = np.column_stack([columns[n].astype(np.float64) for n in _NORMALS])
    try:
        return PointCloud(pts, normals)
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def _read_ply(data: bytes, path: Path) -> PointCloud:
    try:
        return _read_ply_unchecked(data, path)
    except ParseError:
        raise
    except (ValueError, TypeError, OverflowError, IndexError) as exc:
        # Safety net: malformed input must surface as ParseError, never as a crash.
        raise ParseError(f"malformed PLY: {exc}", None, path) from None


def _read_ply_unchecked(data: bytes, path: Path) -> PointCloud:
    fmt, elements, offset, header_lines = _parse_ply_header(data, path)
    if not any(el["name"] == "vertex" for el in elements):
        raise ParseError("no vertex element", None, path)
    if fmt == "ascii":
        return _read_ply_ascii(data[offset:], elements, header_lines, path)
    endian = "<" if fmt == "binary_little_endian" else ">"
    for el in elements:
        if el["count"] == 0 and el["name"] != "vertex":
            continue
        if all(p[2] is None for p in el["props"]):
            dtype = np.dtype([(name, endian + t) for name, t, _ in el["props"]])
            size = dtype.itemsize * el["count"]
            if offset + size > len(data):
                raise ParseError(f"truncated {el['name']!r} element", len(data), path)
            block = np.frombuffer(data, dtype=dtype, count=el["count"], offset=offset)
            offset += size
            if el["name"] == "vertex":
                return _vertex_cloud({n: block[n] for n in dtype.names}, path)
        else:
            if el["name"] == "vertex":
                raise ParseError("list properties on vertex elements are not supported", offset, path)
            offset = _skip_binary_lists(data, offset, el, endian, path)
    raise AssertionError("unreachable")


def _skip_binary_lists(data: bytes, offset: int, el: dict, endian: str, path: Path) -> int:
    for _ in range(el["count"]):
        for _, t, item in el["props"]:
            if item is None:
                offset += np.dtype(t).itemsize
                continue
            size = np.dtype(t).itemsize
            if offset + size > len(data):
                raise ParseError(f"truncated {el['name']!r} element", len(data), path)
            n = int(np.frombuffer(data, dtype=endian + t, count=1, offset=offset)[0])
            offset += size + n * np.dtype(item).itemsize
        if offset > len(data):
            raise ParseError(f"truncated {el['name']!r} element", len(data), path)
    return offset


def _read_ply_ascii(body: bytes, elements, first_line: int, path: Path) -> PointCloud:
    try:
        lines = body.decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII byte in ASCII body", exc.start, path) from None
    pos = 0
    for el in elements:
        rows = []
        for _ in range(el["count"]):
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise ParseError(f"truncated {el['name']!r} element", first_line + pos, path)
            if el["name"] == "vertex":
                parts = lines[pos].split()
                if len(parts) != len(el["props"]):
                    raise ParseError(f"expected {len(el['props'])} values, got {len(parts)}", first_line + pos + 1, path)
                try:
                    rows.append([float(v) for v in parts])
                except ValueError:
                    raise ParseError(f"non-numeric vertex value in {lines[pos]!r}", first_line + pos + 1, path) from None
            pos += 1
        if el["name"] == "vertex":
            if any(p[2] is not None for p in el["props"]):
                raise ParseError("list properties on vertex elements are not supported", None, path)
            arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(el["props"]))
            return _vertex_cloud({name: arr[:, j] for j, (name, _, _) in enumerate(el["props"])}, path)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------


def read_correspondences(path: str | os.PathLike) -> Correspondences:
    """CSV with header ``src,dst[,score]``; a missing score column means 1.0.

    Indices are not checked against any cloud here.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8 text", exc.start, path) from None
    reader = csv.reader(_io.StringIO(text))
    header = None
    src, dst, score = [], [], []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if header is None:
            header = [c.strip().lower() for c in row]
            if header[:2] != ["src", "dst"] or header[2:] not in ([], ["score"]):
                raise ParseError(f"header must be 'src,dst' or 'src,dst,score', got {row}", lineno, path)
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(row)}", lineno, path)
        try:
            s, d = int(row[0]), int(row[1])
            sc = float(row[2]) if len(row) == 3 else 1.0
        except ValueError:
            raise ParseError(f"malformed row {row}", lineno, path) from None
        if s < 0 or d < 0:
            raise ParseError("indices must be non-negative", lineno, path)
        if not 0.0 <= sc <= 1.0:
            raise ParseError(f"score {sc} outside [0, 1]", lineno, path)
        src.append(s)
        dst.append(d)
        score.append(sc)
    if header is None:
        raise ParseError("missing header", 1, path)
    return Correspondences(src, dst, score)


def write_correspondences(corrs: Correspondences, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "score"])
        for s, d, sc in zip(corrs.source, corrs.target, corrs.score):
            w.writerow([int(s), int(d), repr(float(sc))])


# ---------------------------------------------------------------------------
# Transforms and reports
# ---------------------------------------------------------------------------


def format_transform(transform: RigidTransform) -> str:
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in transform.as_matrix())


def write_transform(transform: RigidTransform, path: str | os.PathLike) -> None:
    """Four lines, row-major 4x4, 17 significant digits (lossless for float64)."""
    Path(path).write_text(format_transform(transform), encoding="utf-8")


def read_transform(path: str | os.PathLike) -> RigidTransform:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError:
            raise ParseError(f"non-numeric value in {line!r}", lineno, path) from None
        if len(vals) != 4:
            raise ParseError(f"expected 4 values per row, got {len(vals)}", lineno, path)
        rows.append(vals)
    if len(rows) != 4:
        raise ParseError(f"expected 4 rows, got {len(rows)}", None, path)
    try:
        return RigidTransform.from_matrix(rows)
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def report_to_dict(report) -> dict:
    """JSON-ready view of a :class:`~qreg.estimator.RegistrationReport`."""
    d = {
        "method": report.method,
        "best_transform": report.best_transform.as_matrix().tolist(),
        "pre_lo_transform": None if report.pre_lo_transform is None else report.pre_lo_transform.as_matrix().tolist(),
        "inlier_count": report.inlier_count,
        "inlier_indices": [int(i) for i in report.inlier_indices],
        "candidates_evaluated": int(report.candidates_evaluated),
        "stage_timings": dict(report.stage_timings),
        "config": report.config.to_dict(),
        "extra": report.extra,
    }
    if report.per_candidate_scores is not None:
        d["per_candidate_scores"] = [list(s) for s in report.per_candidate_scores]
    return d


def write_report(report, path: str | os.PathLike, **extra: Any) -> None:
    d = report_to_dict(report)
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: str | os.PathLike) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Key-value configs
# ---------------------------------------------------------------------------

_SECTION = "qreg"


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        lowered = raw.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        if lowered in ("none", "null"):
            return None
        return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; values are Python literals or bare strings."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            out[key] = _parse_value(raw)
    return out


def read_config(path: str | os.PathLike) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def _literal(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _literal(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_literal(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def format_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_literal(v)!r}\n" for k, v in values.items())


def write_config(values: dict[str, Any], path: str | os.PathLike) -> None:
    Path(path).write_text(format_config(values), encoding="utf-8")


def eprint(*args: Any) -> None:
    print(*args, file=sys.stderr)
