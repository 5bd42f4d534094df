"""VOX1 volume container and dataset manifest.

A volume is a dense 3D field with voxel spacing and origin, stored z-major
(x fastest). On disk: little-endian header (80 bytes) then the raw payload.

    bytes 0-3    magic "VOX1"
    4-7          u32 version = 1
    8-11         u32 dtype code: 1 = f32 scalar, 2 = u8 label
    12-23        u32 x3 dims (z, y, x)
    24-47        f64 x3 spacing_mm (z, y, x)
    48-71        f64 x3 origin_mm (z, y, x)
    72-79        zero padding
    80-          payload, z-major

Scalar volumes may carry float64 in memory (preprocessing keeps full
precision until a write); the file payload is always f32. Label volumes
hold u8 values 0..6.

The manifest is a JSON file: {"task": "mr2ct"|"cbct2ct", "entries": [...]},
each entry {"case_id", "input_path", "target_path", "label_path"?,
"region": "HN"|"AB"|"TH"}. Paths are resolved relative to the manifest's
directory.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VOX1"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2
_HEADER = struct.Struct("<4sII3I3d3d8x")
assert _HEADER.size == 80

LABEL_MAX = 6
REGIONS = ("HN", "AB", "TH")
TASKS = ("mr2ct", "cbct2ct")


class VolumeError(ValueError):
    pass


class FormatError(VolumeError):
    """Not a VOX1 file."""


class CorruptionError(VolumeError):
    """Header and payload disagree."""


class UnsupportedError(VolumeError):
    """Unknown dtype or version."""


class ManifestError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        self.validate()

    @property
    def dims(self):
        return self.data.shape

    @property
    def kind(self):
        return "label_u8" if self.data.dtype == np.uint8 else "scalar_f32"

    def validate(self):
        if self.data.dtype == np.uint8:
            if self.data.size and self.data.max() > LABEL_MAX:
                raise VolumeError(
                    f"label volume contains value {int(self.data.max())}, valid range 0..{LABEL_MAX}"
                )
        elif self.data.dtype not in (np.float32, np.float64):
            raise VolumeError(f"unsupported volume dtype {self.data.dtype}")
        if any(s <= 0 for s in self.spacing_mm):
            raise VolumeError(f"spacing must be positive, got {self.spacing_mm}")
        if len(self.spacing_mm) != 3 or len(self.origin_mm) != 3:
            raise VolumeError("spacing and origin must have 3 components")

    def astype_f32(self):
        if self.data.dtype == np.float32:
            return self
        return Volume(self.data.astype(np.float32), self.spacing_mm, self.origin_mm)


def write_volume(v, path):
    v.validate()
    if v.data.dtype == np.uint8:
        code, payload = DTYPE_U8, np.ascontiguousarray(v.data).tobytes()
    else:
        code = DTYPE_F32
        payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    z, y, x = v.dims
    header = _HEADER.pack(MAGIC, VERSION, code, z, y, x, *v.spacing_mm, *v.origin_mm)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a VOX1 file")
    magic, version, code, z, y, x, *rest = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedError(f"{path}: unsupported version {version}")
    if code == DTYPE_F32:
        dt, item = np.dtype("<f4"), 4
    elif code == DTYPE_U8:
        dt, item = np.dtype("u1"), 1
    else:
        raise UnsupportedError(f"{path}: unknown dtype code {code}")
    n = z * y * x
    body = raw[_HEADER.size:]
    if len(body) != n * item:
        raise CorruptionError(
            f"{path}: payload holds {len(body) // item} values, dims say {n}"
        )
    data = np.frombuffer(body, dtype=dt).reshape(z, y, x)
    data = np.ascontiguousarray(data)  # native, writable copy
    if code == DTYPE_F32:
        data = data.astype(np.float32, copy=False)
    return Volume(data, tuple(rest[0:3]), tuple(rest[3:6]))


@dataclass
class ManifestEntry:
    case_id: str
    input_path: str
    target_path: str
    region: str
    label_path: str = None


@dataclass
class DatasetManifest:
    task: str
    entries: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def resolve(self, rel):
        return Path(self.base_dir) / rel


def load_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from e
    task = doc.get("task")
    if task not in TASKS:
        raise ManifestError(f"{path}: task must be one of {TASKS}, got {task!r}")
    entries = doc.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: 'entries' must be a non-empty list")
    base = path.parent
    seen = set()
    out = []
    for i, e in enumerate(entries):
        for key in ("case_id", "input_path", "target_path", "region"):
            if key not in e:
                raise ManifestError(f"{path}: entry {i} missing '{key}'")
        cid = e["case_id"]
        if cid in seen:
            raise ManifestError(f"{path}: duplicate case_id {cid!r}")
        seen.add(cid)
        if e["region"] not in REGIONS:
            raise ManifestError(
                f"{path}: case {cid}: region must be one of {REGIONS}, got {e['region']!r}"
            )
        entry = ManifestEntry(
            case_id=cid,
            input_path=e["input_path"],
            target_path=e["target_path"],
            region=e["region"],
            label_path=e.get("label_path"),
        )
        paths = [entry.input_path, entry.target_path]
        if entry.label_path is not None:
            paths.append(entry.label_path)
        for p in paths:
            if not (base / p).exists():
                raise ManifestError(f"{path}: case {cid}: missing file {p}")
        out.append(entry)
    return DatasetManifest(task=task, entries=out, base_dir=base)


def save_manifest(manifest, path):
    doc = {"task": manifest.task, "entries": []}
    for e in manifest.entries:
        d = {
            "case_id": e.case_id,
            "input_path": e.input_path,
            "target_path": e.target_path,
            "region": e.region,
        }
        if e.label_path is not None:
            d["label_path"] = e.label_path
        doc["entries"].append(d)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
