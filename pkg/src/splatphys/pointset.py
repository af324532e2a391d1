"""Point-set container and PLY interchange.

A :class:`PointSet` holds splat centers plus the bookkeeping columns the rest
of the pipeline needs: opacity, an integer instance label, and a flag marking
synthesized interior points. Unknown per-point attributes found in an input
file (spherical harmonics, scales, quaternions, ...) ride along as an opaque
payload and are written back verbatim; they are never interpreted.

Supported PLY flavors: ``ascii`` and ``binary_little_endian``. Big-endian
files are rejected rather than silently byte-swapped.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

NOISE = -1  # label value for points not assigned to any instance

# PLY scalar type names -> numpy dtype strings (little endian)
_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_PLY_NAMES = {
    "i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
    "i4": "int", "u4": "uint", "f4": "float", "f8": "double",
}


class PlyError(ValueError):
    """Raised for malformed, truncated, or unsupported PLY input."""


class GeometryError(ValueError):
    """Raised for degenerate geometric input (zero extent, empty set)."""


@dataclass(frozen=True)
class Transform:
    """Uniform scale-plus-offset map ``q = scale * p + offset``."""

    scale: float
    offset: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.offset

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (points - self.offset) / self.scale


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class PointSet:
    """Immutable set of splat centers with pipeline bookkeeping columns.

    Parameters
    ----------
    positions : (N, 3) float array
    opacity : (N,) float array in [0, 1], default all ones
    labels : (N,) int array, instance id per point or NOISE, default NOISE
    is_filled : (N,) bool array, True for synthesized interior points
    extras : mapping of name -> (N,) array, opaque payload columns preserved
        through save/load; ``extra_order`` fixes the on-disk column order.
    """

    def __init__(self, positions, opacity=None, labels=None, is_filled=None,
                 extras=None, extra_order=None):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        n = positions.shape[0]
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions contain non-finite values")

        if opacity is None:
            opacity = np.ones(n, dtype=np.float64)
        opacity = np.asarray(opacity, dtype=np.float64).reshape(n)
        if np.any(opacity < 0.0) or np.any(opacity > 1.0):
            raise ValueError("opacity values must lie in [0, 1]")

        if labels is None:
            labels = np.full(n, NOISE, dtype=np.int32)
        labels = np.asarray(labels, dtype=np.int32).reshape(n)
        if labels.size and labels.min() < NOISE:
            raise ValueError("labels must be >= -1 (NOISE)")

        if is_filled is None:
            is_filled = np.zeros(n, dtype=bool)
        is_filled = np.asarray(is_filled, dtype=bool).reshape(n)
        # synthesized points are render-suppressed by construction
        if np.any(opacity[is_filled] != 0.0):
            raise ValueError("filled points must have opacity 0")

        self.positions = _freeze(positions)
        self.opacity = _freeze(opacity)
        self.labels = _freeze(labels)
        self.is_filled = _freeze(is_filled)
        self.extras = {k: _freeze(np.asarray(v).reshape(n))
                       for k, v in (extras or {}).items()}
        self.extra_order = list(extra_order if extra_order is not None
                                else (extras or {}).keys())

    def __len__(self) -> int:
        return self.positions.shape[0]

    def with_labels(self, labels) -> "PointSet":
        """Same points, relabeled. Returns a new set; self is untouched."""
        return PointSet(self.positions, self.opacity, labels, self.is_filled,
                        self.extras, self.extra_order)

    def append_filled(self, positions, labels) -> "PointSet":
        """Append synthesized interior points (opacity 0, is_filled True).

        Existing indices are stable: the first ``len(self)`` rows of the
        result are exactly this set's rows. Payload columns on the new rows
        are zero of the original dtype.
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        m = positions.shape[0]
        if m == 0:
            return self
        labels = np.asarray(labels, dtype=np.int32).reshape(m)
        extras = {k: np.concatenate([v, np.zeros(m, dtype=v.dtype)])
                  for k, v in self.extras.items()}
        return PointSet(
            np.concatenate([self.positions, positions]),
            np.concatenate([self.opacity, np.zeros(m)]),
            np.concatenate([self.labels, labels]),
            np.concatenate([self.is_filled, np.ones(m, dtype=bool)]),
            extras, self.extra_order)


@dataclass(frozen=True)
class LabelStore:
    """Per-point instance labels plus the instance count.

    Labels are contiguous ids in ``[0, count)`` or NOISE. The store covers
    every point of the set it was built for, synthesized points included.
    """

    labels: np.ndarray
    count: int

    def __post_init__(self):
        labels = _freeze(np.asarray(self.labels, dtype=np.int32))
        object.__setattr__(self, "labels", labels)
        if labels.size:
            lo, hi = int(labels.min()), int(labels.max())
            if lo < NOISE or hi >= self.count:
                raise ValueError(
                    f"label values must lie in [-1, {self.count}), "
                    f"got range [{lo}, {hi}]")

    def indices_of(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


# ---------------------------------------------------------------------------
# PLY reading


def _parse_header(fh, path):
    """Parse the header; returns (fmt, elements, data_start_offset).

    elements is a list of (name, count, [(prop_name, dtype_str or None)]),
    dtype None marking list properties.
    """
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyError(f"{path}: not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyError(f"{path}: header ended before 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "" or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tokens = line.split()
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise PlyError(f"{path}: malformed header line: {line!r}")
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise PlyError(
                    f"{path}: unsupported PLY format {tokens[1]!r} "
                    "(ascii and binary_little_endian are supported)")
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyError(f"{path}: malformed header line: {line!r}")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before any element: {line!r}")
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyError(f"{path}: malformed header line: {line!r}")
                elements[-1][2].append((tokens[4], None))
            else:
                if len(tokens) != 3:
                    raise PlyError(f"{path}: malformed header line: {line!r}")
                dt = _PLY_DTYPES.get(tokens[1])
                if dt is None:
                    raise PlyError(f"{path}: unknown property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], dt))
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyError(f"{path}: malformed header line: {line!r}")
    if fmt is None:
        raise PlyError(f"{path}: header has no 'format' line")
    return fmt, elements


def load_ply(path) -> PointSet:
    """Load a splat point cloud from a PLY file.

    Requires x, y, z properties on the vertex element. Recognizes opacity
    (default 1.0), label (default NOISE), and is_filled (default 0); every
    other vertex property is preserved as opaque payload. Elements other
    than vertex are ignored; elements preceding vertex must be fixed-size
    to be skippable in binary files.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise PlyError(f"{path}: no vertex element in header")
        vidx = names.index("vertex")
        vname, vcount, vprops = elements[vidx]
        if vcount == 0:
            raise PlyError(f"{path}: empty input (vertex count is 0)")
        if any(dt is None for _, dt in vprops):
            raise PlyError(f"{path}: list properties on vertex are unsupported")

        if fmt == "binary":
            for ename, ecount, eprops in elements[:vidx]:
                if any(dt is None for _, dt in eprops):
                    raise PlyError(
                        f"{path}: cannot skip list-typed element {ename!r} "
                        "preceding vertex in binary file")
                stride = sum(np.dtype(dt).itemsize for _, dt in eprops)
                fh.seek(ecount * stride, os.SEEK_CUR)
            dtype = np.dtype([(nm, "<" + dt) for nm, dt in vprops])
            buf = fh.read(vcount * dtype.itemsize)
            if len(buf) < vcount * dtype.itemsize:
                got = len(buf) // dtype.itemsize
                raise PlyError(
                    f"{path}: truncated file, header promises {vcount} "
                    f"vertices but only {got} are present")
            rec = np.frombuffer(buf, dtype=dtype, count=vcount)
        else:
            text = fh.read().decode("ascii", errors="replace").splitlines()
            rows = [ln.split() for ln in text if ln.strip() != ""]
            skip = sum(e[1] for e in elements[:vidx])
            rows = rows[skip:]
            if len(rows) < vcount:
                raise PlyError(
                    f"{path}: truncated file, header promises {vcount} "
                    f"vertices but only {len(rows)} are present")
            dtype = np.dtype([(nm, dt) for nm, dt in vprops])
            rec = np.zeros(vcount, dtype=dtype)
            for i in range(vcount):
                row = rows[i]
                if len(row) != len(vprops):
                    raise PlyError(
                        f"{path}: vertex line {i} has {len(row)} values, "
                        f"expected {len(vprops)}")
                for (nm, _), tok in zip(vprops, row):
                    rec[nm][i] = float(tok)

    cols = {nm for nm, _ in vprops}
    for req in ("x", "y", "z"):
        if req not in cols:
            raise PlyError(f"{path}: missing required vertex property {req!r}")

    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    opacity = rec["opacity"].astype(np.float64) if "opacity" in cols else None
    labels = rec["label"].astype(np.int32) if "label" in cols else None
    filled = rec["is_filled"].astype(bool) if "is_filled" in cols else None
    core = {"x", "y", "z", "opacity", "label", "is_filled"}
    order = [nm for nm, _ in vprops if nm not in core]
    extras = {nm: np.array(rec[nm]) for nm in order}
    try:
        return PointSet(positions, opacity, labels, filled, extras, order)
    except ValueError as exc:
        raise PlyError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PLY writing


def save_ply(ps: PointSet, path, fmt: str = "binary",
             position_dtype: str = "f4") -> None:
    """Write a PointSet to PLY (``binary`` little endian or ``ascii``).

    Column order: x, y, z, opacity, label, is_filled, then payload columns
    in their original order. ``position_dtype`` is ``f4`` for interchange
    with splat tooling or ``f8`` for lossless frame dumps.
    """
    if fmt not in ("binary", "ascii"):
        raise ValueError(f"unsupported format {fmt!r}")
    if position_dtype not in ("f4", "f8"):
        raise ValueError(f"position_dtype must be f4 or f8, got {position_dtype!r}")

    fields = [("x", position_dtype), ("y", position_dtype),
              ("z", position_dtype), ("opacity", "f4"),
              ("label", "i4"), ("is_filled", "u1")]
    fields += [(nm, ps.extras[nm].dtype.str.lstrip("<>=|")) for nm in ps.extra_order]

    n = len(ps)
    rec = np.zeros(n, dtype=np.dtype([(nm, "<" + dt) for nm, dt in fields]))
    rec["x"], rec["y"], rec["z"] = ps.positions.T
    rec["opacity"] = ps.opacity
    rec["label"] = ps.labels
    rec["is_filled"] = ps.is_filled
    for nm in ps.extra_order:
        rec[nm] = ps.extras[nm]

    header = ["ply",
              "format binary_little_endian 1.0" if fmt == "binary"
              else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {_PLY_NAMES[dt]} {nm}" for nm, dt in fields]
    header.append("end_header")

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if fmt == "binary":
            fh.write(rec.tobytes())
        else:
            float_cols = {nm for nm, dt in fields if dt in ("f4", "f8")}
            lines = []
            for i in range(n):
                parts = []
                for nm, _ in fields:
                    v = rec[nm][i]
                    # .9g / .17g round-trip f4 / f8 exactly through text
                    if nm in float_cols:
                        digits = ".17g" if rec[nm].dtype.itemsize == 8 else ".9g"
                        parts.append(format(float(v), digits))
                    else:
                        parts.append(str(int(v)))
                lines.append(" ".join(parts))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Normalization


def normalize_to_unit_cube(ps: PointSet, fraction: float = 0.8):
    """Map the cloud into the unit cube by a uniform scale and translation.

    The centroid lands on (0.5, 0.5, 0.5) and the largest axis-aligned
    extent becomes ``fraction`` of the cube edge. Returns the transformed
    PointSet and the forward Transform; ``Transform.invert`` recovers the
    original coordinates.
    """
    if len(ps) == 0:
        raise GeometryError("cannot normalize an empty point set")
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    lo = ps.positions.min(axis=0)
    hi = ps.positions.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent == 0.0:
        raise GeometryError(
            "degenerate extent: all points coincide, cannot normalize")
    centroid = ps.positions.mean(axis=0)
    scale = fraction / extent
    offset = 0.5 - scale * centroid
    tf = Transform(scale, offset)
    out = PointSet(tf.apply(ps.positions), ps.opacity, ps.labels,
                   ps.is_filled, ps.extras, ps.extra_order)
    return out, tf


# ---------------------------------------------------------------------------
# Frame export


def save_frames(positions_per_frame, out_dir, labels=None, is_filled=None,
                opacity=None) -> list:
    """Write one PLY per frame: frame_000.ply, frame_001.ply, ...

    Positions are stored as float64 so a reloaded frame reproduces the
    simulated coordinates exactly. The static columns (labels, is_filled,
    opacity) are shared by all frames. Returns the written paths.
    """
    frames = list(positions_per_frame)
    if not frames:
        raise ValueError("no frames to save (empty frame list)")
    os.makedirs(out_dir, exist_ok=True)
    pad = max(3, len(str(len(frames) - 1)))
    n = frames[0].shape[0]
    if is_filled is not None:
        filled = np.asarray(is_filled, dtype=bool)
        opacity = np.where(filled, 0.0,
                           1.0 if opacity is None else np.asarray(opacity))
    paths = []
    for k, x in enumerate(frames):
        if x.shape != (n, 3):
            raise ValueError(f"frame {k} has shape {x.shape}, expected {(n, 3)}")
        ps = PointSet(x, opacity, labels, is_filled)
        p = os.path.join(out_dir, f"frame_{k:0{pad}d}.ply")
        save_ply(ps, p, fmt="binary", position_dtype="f8")
        paths.append(p)
    return paths
