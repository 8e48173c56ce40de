"""Point cloud data model, file ingestion/export, synthetic shapes, scene blocks.

File formats
------------
Text sample (one point per line, whitespace separated)::

    x y z [r g b] label

Binary sample: little-endian header ``b"SPAL"``, u32 N, u32 C, u8 has_color,
then N fixed records of 3 float64 coordinates, optionally 3 float64 colors,
and a u32 label.

A dataset directory may carry a ``dataset.json`` manifest recording the class
count, class names, per-sample categories and the train/test split. Without a
manifest every matching sample file is loaded and C is inferred.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

BINARY_MAGIC = b"SPAL"
MANIFEST_NAME = "dataset.json"
TEXT_SUFFIX = ".txt"
BINARY_SUFFIX = ".spal"


def _frozen_array(a, dtype, name):
    arr = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """One sample: coordinates, optional colors, per-point ground-truth labels."""

    id: str
    points: np.ndarray
    gt_labels: np.ndarray
    colors: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        pts = _frozen_array(self.points, np.float64, "points")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError(f"empty sample: {self.id!r}")
        labels = _frozen_array(self.gt_labels, np.int64, "gt_labels")
        if labels.shape != (pts.shape[0],):
            raise ValueError(
                f"gt_labels length {labels.shape} does not match {pts.shape[0]} points"
            )
        if labels.min() < 0:
            raise ValueError("negative label index")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "gt_labels", labels)
        if self.colors is not None:
            cols = _frozen_array(self.colors, np.float64, "colors")
            if cols.shape != pts.shape:
                raise ValueError("colors must match points shape")
            object.__setattr__(self, "colors", cols)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A collection of samples with a declared class count."""

    samples: tuple[PointCloud, ...]
    num_classes: int
    class_names: tuple[str, ...] | None = None
    test_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids")
        for s in self.samples:
            if s.n and s.gt_labels.max() >= self.num_classes:
                raise ValueError(
                    f"sample {s.id!r}: label {int(s.gt_labels.max())} out of range "
                    f"for {self.num_classes} classes"
                )
        known = set(ids)
        for tid in self.test_ids:
            if tid not in known:
                raise ValueError(f"test id {tid!r} not in dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def sample_by_id(self, sid: str) -> PointCloud:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def train_samples(self) -> list[PointCloud]:
        test = set(self.test_ids)
        return [s for s in self.samples if s.id not in test]

    def test_samples(self) -> list[PointCloud]:
        test = set(self.test_ids)
        return [s for s in self.samples if s.id in test]


# ---------------------------------------------------------------------------
# text / binary sample files


def _parse_text_sample(path: Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    points, colors, labels = [], [], []
    has_color = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) not in (4, 7):
                raise ValueError(
                    f"{path}:{lineno}: malformed point record "
                    f"(expected 4 or 7 fields, got {len(tok)})"
                )
            row_color = len(tok) == 7
            if has_color is None:
                has_color = row_color
            elif has_color != row_color:
                raise ValueError(f"{path}:{lineno}: inconsistent color columns")
            try:
                xyz = [float(t) for t in tok[:3]]
                if row_color:
                    rgb = [float(t) for t in tok[3:6]]
                label = int(tok[-1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed point record") from None
            points.append(xyz)
            if row_color:
                colors.append(rgb)
            labels.append(label)
    if not points:
        raise ValueError(f"{path}: empty sample")
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64) if has_color else None
    return pts, cols, np.asarray(labels, dtype=np.int64)


def _write_text_sample(path: Path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(cloud.n):
            x, y, z = cloud.points[i]
            parts = [f"{x:.17g}", f"{y:.17g}", f"{z:.17g}"]
            if cloud.colors is not None:
                parts += [f"{c:.17g}" for c in cloud.colors[i]]
            parts.append(str(int(cloud.gt_labels[i])))
            fh.write(" ".join(parts) + "\n")


def _record_dtype(has_color: bool) -> np.dtype:
    fields = [("xyz", "<f8", (3,))]
    if has_color:
        fields.append(("rgb", "<f8", (3,)))
    fields.append(("label", "<u4"))
    return np.dtype(fields)


def _parse_binary_sample(path: Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, int]:
    blob = path.read_bytes()
    if len(blob) < 13 or blob[:4] != BINARY_MAGIC:
        raise ValueError(f"{path}: not a SPAL binary sample")
    n, c, has_color = struct.unpack_from("<IIB", blob, 4)
    if n < 1:
        raise ValueError(f"{path}: empty sample")
    dt = _record_dtype(bool(has_color))
    expected = 13 + n * dt.itemsize
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated binary sample ({len(blob)} != {expected} bytes)")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=13)
    pts = rec["xyz"].astype(np.float64)
    cols = rec["rgb"].astype(np.float64) if has_color else None
    labels = rec["label"].astype(np.int64)
    return pts, cols, labels, int(c)


def _write_binary_sample(path: Path, cloud: PointCloud, num_classes: int) -> None:
    has_color = cloud.colors is not None
    dt = _record_dtype(has_color)
    rec = np.empty(cloud.n, dtype=dt)
    rec["xyz"] = cloud.points
    if has_color:
        rec["rgb"] = cloud.colors
    rec["label"] = cloud.gt_labels.astype(np.uint32)
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIB", cloud.n, num_classes, int(has_color)))
        fh.write(rec.tobytes())


def _load_sample_file(path: Path, fmt: str) -> tuple[PointCloud, int | None]:
    if fmt == "text":
        pts, cols, labels = _parse_text_sample(path)
        declared = None
    elif fmt == "binary":
        pts, cols, labels, declared = _parse_binary_sample(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    cloud = PointCloud(id=path.stem, points=pts, gt_labels=labels, colors=cols)
    return cloud, declared


def load_dataset(path, format: str = "text", num_classes: int | None = None) -> Dataset:
    """Load a dataset from a sample file or a directory of sample files.

    When the directory carries a manifest it declares the class count and the
    split; otherwise C is ``num_classes`` or inferred as max label + 1.
    """
    path = Path(path)
    suffix = TEXT_SUFFIX if format == "text" else BINARY_SUFFIX
    clouds: list[PointCloud] = []
    declared = num_classes
    class_names = None
    test_ids: tuple[str, ...] = ()
    if path.is_dir():
        manifest_path = path / MANIFEST_NAME
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            declared = num_classes if num_classes is not None else manifest["num_classes"]
            names = manifest.get("class_names")
            class_names = tuple(names) if names else None
            test_ids = tuple(
                e["id"] for e in manifest["samples"] if e.get("split") == "test"
            )
            for entry in manifest["samples"]:
                cloud, file_c = _load_sample_file(path / entry["file"], format)
                if file_c is not None and declared is not None and file_c != declared:
                    raise ValueError(
                        f"{entry['file']}: header class count {file_c} != manifest {declared}"
                    )
                cloud = replace(cloud, id=entry["id"], category=entry.get("category"))
                clouds.append(cloud)
        else:
            files = sorted(path.glob(f"*{suffix}"))
            if not files:
                raise ValueError(f"no {suffix} samples under {path}")
            for f in files:
                cloud, file_c = _load_sample_file(f, format)
                if file_c is not None:
                    declared = file_c if declared is None else max(declared, file_c)
                clouds.append(cloud)
    else:
        cloud, file_c = _load_sample_file(path, format)
        if file_c is not None and declared is None:
            declared = file_c
        clouds.append(cloud)

    max_label = max(int(c.gt_labels.max()) for c in clouds)
    if declared is None:
        declared = max_label + 1
    if max_label >= declared:
        bad = next(c for c in clouds if int(c.gt_labels.max()) >= declared)
        raise ValueError(
            f"sample {bad.id!r}: label {int(bad.gt_labels.max())} out of range "
            f"(declared {declared} classes)"
        )
    return Dataset(
        samples=tuple(clouds),
        num_classes=declared,
        class_names=class_names,
        test_ids=test_ids,
    )


def export_dataset(dataset: Dataset, out_dir, format: str = "text") -> Path:
    """Write one sample file per cloud plus a manifest. Returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = TEXT_SUFFIX if format == "text" else BINARY_SUFFIX
    entries = []
    test = set(dataset.test_ids)
    for cloud in dataset.samples:
        fname = cloud.id + suffix
        if format == "text":
            _write_text_sample(out / fname, cloud)
        else:
            _write_binary_sample(out / fname, cloud, dataset.num_classes)
        entries.append(
            {
                "id": cloud.id,
                "file": fname,
                "category": cloud.category,
                "split": "test" if cloud.id in test else "train",
            }
        )
    manifest = {
        "format_version": 1,
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names) if dataset.class_names else None,
        "samples": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class PartSpec:
    """One primitive of a synthetic shape."""

    kind: str  # segment | patch | cylinder | ellipsoid
    label: int
    n_points: int
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SampleSpec:
    parts: tuple[PartSpec, ...]
    id: str | None = None
    category: int | None = None


@dataclass(frozen=True)
class SynthSpec:
    """Declarative description of a synthetic dataset.

    jitter is the isotropic noise magnitude as a fraction of the pre-jitter
    bounding-box diagonal; normalize rescales each sample into the unit
    bounding box (longest side 1).
    """

    samples: tuple[SampleSpec, ...]
    num_classes: int
    jitter: float = 0.002
    normalize: bool = True
    test_fraction: float = 0.2

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "jitter": self.jitter,
            "normalize": self.normalize,
            "test_fraction": self.test_fraction,
            "samples": [
                {
                    "id": s.id,
                    "category": s.category,
                    "parts": [
                        {
                            "kind": p.kind,
                            "label": p.label,
                            "n_points": p.n_points,
                            **{k: _plain(v) for k, v in p.params.items()},
                        }
                        for p in s.parts
                    ],
                }
                for s in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        samples = []
        for s in d["samples"]:
            parts = []
            for p in s["parts"]:
                params = {
                    k: v for k, v in p.items() if k not in ("kind", "label", "n_points")
                }
                parts.append(
                    PartSpec(
                        kind=p["kind"],
                        label=int(p["label"]),
                        n_points=int(p["n_points"]),
                        params=params,
                    )
                )
            samples.append(
                SampleSpec(parts=tuple(parts), id=s.get("id"), category=s.get("category"))
            )
        return cls(
            samples=tuple(samples),
            num_classes=int(d["num_classes"]),
            jitter=float(d.get("jitter", 0.002)),
            normalize=bool(d.get("normalize", True)),
            test_fraction=float(d.get("test_fraction", 0.2)),
        )

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _plain(v):
    if isinstance(v, np.ndarray):
        return [float(x) for x in v]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _vec(params, key, default=None):
    v = params.get(key, default)
    if v is None:
        raise ValueError(f"missing primitive parameter {key!r}")
    return np.asarray(v, dtype=np.float64)


def _sample_segment(params, n, rng):
    a = _vec(params, "a")
    b = _vec(params, "b")
    t = rng.random(n)
    return a + t[:, None] * (b - a)


def _sample_patch(params, n, rng):
    origin = _vec(params, "origin")
    eu = _vec(params, "edge_u")
    ev = _vec(params, "edge_v")
    u = rng.random(n)
    v = rng.random(n)
    return origin + u[:, None] * eu + v[:, None] * ev


def _sample_cylinder(params, n, rng):
    center = _vec(params, "center")
    axis = _vec(params, "axis")
    radius = float(params["radius"])
    length = np.linalg.norm(axis)
    if length == 0:
        raise ValueError("cylinder axis must be non-zero")
    w = axis / length
    if "u_dir" in params:
        u = _vec(params, "u_dir")
        u = u - (u @ w) * w
        u /= np.linalg.norm(u)
    else:
        # deterministic orthonormal frame around the axis
        helper = np.zeros(3)
        helper[int(np.argmin(np.abs(w)))] = 1.0
        u = np.cross(w, helper)
        u /= np.linalg.norm(u)
    v = np.cross(w, u)
    arc_start = float(params.get("arc_start", 0.0))
    arc_span = float(params.get("arc_span", 2.0 * np.pi))
    theta = arc_start + rng.random(n) * arc_span
    h = rng.random(n)
    ring = radius * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
    return center + h[:, None] * axis + ring


def _sample_ellipsoid(params, n, rng):
    center = _vec(params, "center")
    radii = _vec(params, "radii")
    a, b, c = radii
    m_max = max(a * b, b * c, a * c)
    out = np.empty((n, 3))
    got = 0
    # rejection sampling for uniform density on the ellipsoid surface
    while got < n:
        todo = max(n - got, 16)
        d = rng.standard_normal((todo, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        m = np.sqrt((b * c * d[:, 0]) ** 2 + (a * c * d[:, 1]) ** 2 + (a * b * d[:, 2]) ** 2)
        keep = rng.random(todo) * m_max <= m
        pts = d[keep] * radii
        take = min(len(pts), n - got)
        out[got : got + take] = pts[:take]
        got += take
    return center + out


_SAMPLERS = {
    "segment": _sample_segment,
    "patch": _sample_patch,
    "cylinder": _sample_cylinder,
    "ellipsoid": _sample_ellipsoid,
}


def generate_synthetic(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministically generate a dataset from a SynthSpec.

    Pure function of (spec, seed): every sample draws from its own seeded
    substream, so samples are reproducible independently of each other.
    """
    clouds = []
    for i, sample in enumerate(spec.samples):
        rng = np.random.default_rng([int(seed), i])
        chunks, labels = [], []
        for part in sample.parts:
            if part.n_points < 1:
                raise ValueError(f"zero-point primitive in sample {i} ({part.kind})")
            if part.kind not in _SAMPLERS:
                raise ValueError(f"unknown primitive kind {part.kind!r}")
            pts = _SAMPLERS[part.kind](part.params, part.n_points, rng)
            chunks.append(pts)
            labels.append(np.full(part.n_points, part.label, dtype=np.int64))
        pts = np.vstack(chunks)
        lbl = np.concatenate(labels)
        if spec.jitter > 0:
            diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
            if diag > 0:
                pts = pts + rng.normal(0.0, spec.jitter * diag, size=pts.shape)
        if spec.normalize:
            lo = pts.min(axis=0)
            extent = float((pts.max(axis=0) - lo).max())
            if extent > 0:
                pts = (pts - lo) / extent
        sid = sample.id if sample.id is not None else f"shape_{i:04d}"
        clouds.append(
            PointCloud(id=sid, points=pts, gt_labels=lbl, category=sample.category)
        )
    n_test = int(round(spec.test_fraction * len(clouds)))
    test_ids: tuple[str, ...] = ()
    if n_test > 0:
        split_rng = np.random.default_rng([int(seed), 0x5EED])
        order = split_rng.permutation(len(clouds))
        test_ids = tuple(sorted(clouds[j].id for j in order[:n_test]))
    return Dataset(samples=tuple(clouds), num_classes=spec.num_classes, test_ids=test_ids)


# ---------------------------------------------------------------------------
# benchmark spec builder
#
# Shapes are built so every part boundary is geometric: slabs roll tangentially
# into curved hems (continuous junctions, the radius sits at the scale a k=10
# neighborhood can resolve), thin wire rails run one point-spacing away from
# slab edges, struts and small pods attach at the same near-contact distance.

# class scheme shared by all synthetic families
BODY, SLAB, STRUT, POD = 0, 1, 2, 3


def _unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _rolled_edge(origin, edge, slab_normal, inward, radius, span, label=BODY):
    """Cylinder hem tangent to a slab along one edge, curling away from it."""
    edge = np.asarray(edge, dtype=np.float64)
    w = edge / np.linalg.norm(edge)
    v0 = np.cross(w, slab_normal)
    sign = -1.0 if float(v0 @ inward) > 0 else 1.0
    center = np.asarray(origin, dtype=np.float64) - radius * np.asarray(slab_normal)
    params = {
        "center": list(center),
        "axis": list(edge),
        "radius": float(radius),
        "u_dir": list(np.asarray(slab_normal, dtype=np.float64)),
        "arc_span": float(sign * span),
    }
    area = abs(span) * radius * float(np.linalg.norm(edge))
    return ("cylinder", label, params, ("area", area))


def _ridge(origin, edge, slab_normal, inward, radius, span):
    """Cylindrical fold tangent to a slab edge, ending on a new tangent plane.

    Returns the cylinder part plus the end line origin, the new plane normal
    and the in-plane continuation direction, so a second slab can attach with
    C1 continuity (two junction lines per ridge)."""
    edge = np.asarray(edge, dtype=np.float64)
    w = edge / np.linalg.norm(edge)
    u = np.asarray(slab_normal, dtype=np.float64)
    v0 = np.cross(w, u)
    sign = -1.0 if float(v0 @ np.asarray(inward, dtype=np.float64)) > 0 else 1.0
    v = sign * v0
    center = np.asarray(origin, dtype=np.float64) - radius * u
    part = (
        "cylinder",
        BODY,
        {
            "center": list(center),
            "axis": list(edge),
            "radius": float(radius),
            "u_dir": list(u),
            "arc_span": float(sign * span),
        },
        ("area", span * radius * float(np.linalg.norm(edge))),
    )
    end_normal = np.cos(span) * u + np.sin(span) * v
    end_origin = center + radius * end_normal
    continue_dir = -np.sin(span) * u + np.cos(span) * v
    return part, end_origin, end_normal, continue_dir


def _fold_plates(rng, o, eu, width, n_plates, roll_r):
    """Chain of slabs joined by tangent cylindrical ridges along shared edges."""
    parts = []
    nrm = _unit(rng)
    nrm -= (nrm @ eu) * eu / (eu @ eu)
    nrm /= np.linalg.norm(nrm)
    across = np.cross(eu / np.linalg.norm(eu), nrm)
    origin = np.asarray(o, dtype=np.float64)
    for p in range(n_plates):
        depth = rng.uniform(0.45, 0.8)
        ev = across * depth
        parts.append(
            ("patch", SLAB, {"origin": list(origin), "edge_u": list(eu), "edge_v": list(ev)},
             ("area", float(np.linalg.norm(np.cross(eu, ev)))))
        )
        if p == n_plates - 1:
            break
        span = rng.uniform(0.35, 0.8) * np.pi
        ridge, origin, nrm, across = _ridge(origin + ev, eu, nrm, -ev, roll_r, span)
        parts.append(ridge)
    return parts


def _family_foldwing(rng, spacing):
    w = rng.uniform(1.0, 1.5)
    eu = np.array([w, 0.0, rng.uniform(-0.2, 0.2)])
    gap = spacing * rng.uniform(1.0, 1.3)
    roll_r = 1.8 * spacing * rng.uniform(0.5, 0.85)
    parts = _fold_plates(rng, np.zeros(3), eu, w, n_plates=2, roll_r=roll_r)
    first_ev = np.asarray(parts[0][2]["edge_v"])
    nrm = np.cross(eu, first_ev)
    nrm /= np.linalg.norm(nrm)
    # wire rail floating one spacing off the leading edge
    parts.append(
        ("cylinder", BODY,
         {"center": list(nrm * gap), "axis": list(eu), "radius": rng.uniform(0.008, 0.014)},
         ("wire", w)),
    )
    parts.append(
        ("segment", STRUT,
         {"a": list(nrm * gap), "b": list(eu + first_ev + nrm * gap)},
         ("wire", float(np.linalg.norm(eu + first_ev)))),
    )
    pr = rng.uniform(0.035, 0.05)
    parts.append(
        ("ellipsoid", POD,
         {"center": list(eu + nrm * (gap + pr)), "radii": [pr, pr, pr * rng.uniform(0.8, 1.2)]},
         ("area", 4 * np.pi * pr * pr)),
    )
    return parts


def _family_zigtray(rng, spacing):
    w = rng.uniform(0.9, 1.4)
    eu = np.array([w, 0.0, 0.0])
    gap = spacing * rng.uniform(1.0, 1.3)
    roll_r = 1.8 * spacing * rng.uniform(0.5, 0.85)
    parts = _fold_plates(rng, np.array([0.0, 0.0, 0.0]), eu, w, n_plates=3, roll_r=roll_r)
    for t in (0.1, 0.9):
        drop = rng.uniform(0.4, 0.7)
        parts.append(
            ("segment", STRUT,
             {"a": [w * t, 0.0, -gap], "b": [w * t, rng.uniform(-0.2, 0.2), -gap - drop]},
             ("wire", drop)),
        )
    pr = rng.uniform(0.035, 0.05)
    last_patch = [p for p in parts if p[0] == "patch"][-1]
    far = np.asarray(last_patch[2]["origin"]) + np.asarray(last_patch[2]["edge_u"]) * rng.uniform(0.3, 0.7)
    far_n = np.cross(np.asarray(last_patch[2]["edge_u"]), np.asarray(last_patch[2]["edge_v"]))
    far_n /= np.linalg.norm(far_n)
    parts.append(
        ("ellipsoid", POD,
         {"center": list(far + far_n * (gap + pr)), "radii": [pr, pr, pr]},
         ("area", 4 * np.pi * pr * pr)),
    )
    return parts


def _family_antenna(rng, spacing):
    length = rng.uniform(1.3, 1.8)
    dv = _unit(rng)
    gap = spacing * rng.uniform(1.0, 1.3)
    roll_r = 1.8 * spacing * rng.uniform(0.5, 0.85)
    parts = [
        ("cylinder", BODY,
         {"center": [0.0, 0.0, 0.0], "axis": list(dv * length), "radius": rng.uniform(0.008, 0.014)},
         ("wire", length)),
    ]
    ortho = np.cross(dv, _unit(rng))
    ortho /= np.linalg.norm(ortho)
    for s in (1.0, -1.0):
        u = s * ortho * rng.uniform(0.5, 0.75)
        orig = dv * length * rng.uniform(0.25, 0.5) + s * ortho * gap
        # each fin is a small two-plate fold hinged on a ridge
        parts.extend(_fold_plates(rng, orig, u, np.linalg.norm(u), n_plates=2, roll_r=roll_r))
    for t in np.linspace(0.15, 0.95, 3):
        ln = rng.uniform(0.3, 0.5)
        dirn = _unit(rng)
        parts.append(
            ("segment", STRUT, {"a": list(dv * length * t + dirn * gap), "b": list(dv * length * t + dirn * ln)},
             ("wire", ln))
        )
    for t in (0.0, 1.0):
        pr = rng.uniform(0.035, 0.05)
        parts.append(
            ("ellipsoid", POD,
             {"center": list(dv * length * t + dv * (2 * t - 1) * (gap + pr)), "radii": [pr, pr, pr]},
             ("area", 4 * np.pi * pr * pr)),
        )
    return parts


_FAMILIES = [_family_foldwing, _family_zigtray, _family_antenna]


def _alloc_density(n_total, measures):
    """Point counts giving near-uniform surface density.

    measures: list of (label, kind, size) with kind 'area' or 'wire'. Wires get
    double linear density relative to the areal spacing; pods 1.5x areal."""

    def counts_for(rho):
        s = np.sqrt(1.0 / rho)
        out = []
        for label, kind, m in measures:
            if kind == "area":
                out.append(m * rho * (1.5 if label == POD else 1.0))
            else:
                out.append(2.0 * m / s)
        return np.asarray(out)

    lo, hi = 1.0, 1e7
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if counts_for(mid).sum() < n_total:
            lo = mid
        else:
            hi = mid
    raw = counts_for(lo)
    counts = np.maximum(np.floor(raw).astype(int), 4)
    while counts.sum() > n_total:
        counts[int(np.argmax(counts))] -= 1
    counts[int(np.argmax(counts))] += n_total - counts.sum()
    return [int(c) for c in counts]


def benchmark_spec(
    n_shapes: int,
    n_points: int = 2048,
    num_classes: int = 4,
    seed: int = 0,
    jitter: float = 0.002,
    test_fraction: float = 0.2,
) -> SynthSpec:
    """Randomized multi-family shape benchmark with geometric part boundaries."""
    samples = []
    for i in range(n_shapes):
        rng = np.random.default_rng([int(seed), 0xBE7C, i])
        fam = i % len(_FAMILIES)
        # expected slab spacing, used to scale hem radii and rail gaps
        spacing = np.sqrt(1.1 / (0.55 * n_points))
        parts = _FAMILIES[fam](rng, spacing)
        counts = _alloc_density(n_points, [(label, kind, m) for (_, label, _, (kind, m)) in parts])
        specs = tuple(
            PartSpec(kind=kind, label=label, n_points=c, params=params)
            for (kind, label, params, _), c in zip(parts, counts)
        )
        samples.append(SampleSpec(parts=specs, id=f"shape_{i:04d}", category=fam))
    return SynthSpec(
        samples=tuple(samples),
        num_classes=num_classes,
        jitter=jitter,
        test_fraction=test_fraction,
    )


# ---------------------------------------------------------------------------
# scene blocks


def split_blocks(
    scene: PointCloud, block_size: float, points_per_block: int, seed: int
) -> Dataset:
    """Split a scene on an xy grid anchored at its minimum corner.

    Cells with at least points_per_block points are sampled without
    replacement, smaller cells with replacement.
    """
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    if points_per_block < 1:
        raise ValueError("points_per_block must be >= 1")
    xy = scene.points[:, :2]
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    n_cells = np.maximum(1, np.ceil(span / block_size - 1e-12).astype(int))
    ij = np.clip(np.floor((xy - lo) / block_size).astype(int), 0, n_cells - 1)
    keys = ij[:, 0] * n_cells[1] + ij[:, 1]
    rng = np.random.default_rng(seed)
    clouds = []
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        replace_draw = len(idx) < points_per_block
        pick = rng.choice(len(idx), size=points_per_block, replace=replace_draw)
        pick = idx[np.sort(pick)]
        ix, iy = int(key) // int(n_cells[1]), int(key) % int(n_cells[1])
        clouds.append(
            PointCloud(
                id=f"{scene.id}_x{ix}y{iy}",
                points=scene.points[pick],
                gt_labels=scene.gt_labels[pick],
                colors=scene.colors[pick] if scene.colors is not None else None,
                category=scene.category,
            )
        )
    num_classes = int(scene.gt_labels.max()) + 1
    return Dataset(samples=tuple(clouds), num_classes=num_classes)
