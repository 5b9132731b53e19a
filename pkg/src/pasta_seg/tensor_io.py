"""On-disk formats: feature grids, PGM label rasters, manifests, fitted artifacts.

All multi-byte values are little-endian except 16-bit PGM samples, which are
big-endian as the PGM format requires. Writers are byte-deterministic and
replace their target atomically.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .containers import INSTANCE, TRI_CLASS, FeatureGrid, LabelRaster
from .errors import (
    BadMagic,
    Corrupt,
    DimMismatch,
    EmptyManifest,
    MissingFile,
    NonFinite,
    Truncated,
    UnsupportedFormat,
    ValidationError,
    VersionMismatch,
)

FEATURE_MAGIC = b"PASTAFV1"
_FEATURE_HEADER = struct.Struct("<8sIII")

MODEL_MAGIC = b"PASTAMDL"
CODEBOOK_MAGIC = b"PASTACBK"
BAG_MAGIC = b"PASTABAG"
FORMAT_VERSION = 1

ROLES = ("mixed", "reference", "test")


def atomic_write_bytes(path, data: bytes):
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFile(f"no such file: {path}") from exc


# --------------------------------------------------------------------------
# feature grids
# --------------------------------------------------------------------------

def encode_feature_grid(grid: FeatureGrid) -> bytes:
    if not np.isfinite(grid.values).all():
        raise NonFinite("refusing to write a grid with NaN or Inf")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, grid.grid_h, grid.grid_w, grid.dim)
    return header + grid.values.astype("<f4").tobytes()


def decode_feature_header(buf: bytes) -> tuple:
    if len(buf) < len(FEATURE_MAGIC) or buf[:8] != FEATURE_MAGIC:
        raise BadMagic("not a PASTAFV1 feature file")
    if len(buf) < _FEATURE_HEADER.size:
        raise Truncated("feature header is incomplete")
    _, h, w, d = _FEATURE_HEADER.unpack_from(buf)
    if min(h, w, d) < 1:
        raise Corrupt(f"feature grid dims must be >= 1, got {(h, w, d)}")
    return h, w, d


def decode_feature_grid(buf: bytes) -> FeatureGrid:
    h, w, d = decode_feature_header(buf)
    expected = _FEATURE_HEADER.size + 4 * h * w * d
    if len(buf) < expected:
        raise Truncated(f"payload holds {len(buf) - _FEATURE_HEADER.size} bytes, header promises {4 * h * w * d}")
    if len(buf) > expected:
        raise Corrupt(f"{len(buf) - expected} trailing bytes after feature payload")
    data = np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(h, w, d)
    return FeatureGrid(data.astype(np.float32))


def read_feature_grid(path) -> FeatureGrid:
    return decode_feature_grid(_read_bytes(path))


def read_feature_header(path) -> tuple:
    """``(grid_h, grid_w, dim)`` without loading the payload."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(_FEATURE_HEADER.size)
    except FileNotFoundError as exc:
        raise MissingFile(f"no such file: {path}") from exc
    return decode_feature_header(head)


def write_feature_grid(grid: FeatureGrid, path):
    atomic_write_bytes(path, encode_feature_grid(grid))


# --------------------------------------------------------------------------
# PGM rasters
# --------------------------------------------------------------------------

def _pgm_header(buf: bytes) -> tuple:
    """Parse a P5 header; returns ``(width, height, maxval, data_offset)``."""
    if buf[:2] != b"P5":
        raise UnsupportedFormat("only binary PGM (P5) rasters are supported")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise UnsupportedFormat("malformed PGM header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise UnsupportedFormat("malformed PGM header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise UnsupportedFormat(f"unsupported PGM geometry/maxval {fields}")
    return width, height, maxval, pos + 1


def decode_label_raster(buf: bytes, semantics: str = TRI_CLASS) -> LabelRaster:
    width, height, maxval, offset = _pgm_header(buf)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = offset + width * height * dtype.itemsize
    if len(buf) < expected:
        raise Truncated("PGM payload shorter than header promises")
    if len(buf) > expected:
        raise Corrupt("trailing bytes after PGM payload")
    values = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(height, width)
    if values.size and int(values.max()) > maxval:
        raise Corrupt("PGM sample exceeds maxval")
    return LabelRaster(values.astype(np.uint16 if maxval >= 256 else np.uint8), semantics)


def encode_label_raster(raster: LabelRaster) -> bytes:
    if raster.semantics == TRI_CLASS:
        raster.validate_tri_class()
    wide = int(raster.values.max()) > 255
    maxval = 65535 if wide else 255
    header = f"P5\n{raster.width} {raster.height}\n{maxval}\n".encode("ascii")
    payload = raster.values.astype(">u2" if wide else "u1").tobytes()
    return header + payload


def read_label_raster(path, semantics: str = TRI_CLASS) -> LabelRaster:
    """Read a P5 PGM. ``semantics='tri-class'`` validates values are in {0, 1, 2}."""
    return decode_label_raster(_read_bytes(path), semantics)


def write_label_raster(raster: LabelRaster, path):
    atomic_write_bytes(path, encode_label_raster(raster))


def read_pgm_size(path) -> tuple:
    """``(height, width)`` of a PGM file from its header."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(512)
    except FileNotFoundError as exc:
        raise MissingFile(f"no such file: {path}") from exc
    width, height, _, _ = _pgm_header(head)
    return height, width


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass
class ImageRecord:
    feature_path: Path
    image_h: int
    image_w: int
    instance_mask_path: Path | None = None
    gt_mask_path: Path | None = None
    grid_h: int = 0
    grid_w: int = 0
    dim: int = 0

    @property
    def stem(self) -> str:
        return self.feature_path.stem

    def load_grid(self) -> FeatureGrid:
        return read_feature_grid(self.feature_path)

    def load_instances(self) -> LabelRaster | None:
        if self.instance_mask_path is None:
            return None
        return read_label_raster(self.instance_mask_path, INSTANCE)

    def load_gt(self) -> LabelRaster | None:
        if self.gt_mask_path is None:
            return None
        return read_label_raster(self.gt_mask_path, TRI_CLASS)


@dataclass
class DatasetManifest:
    role: str
    records: list

    @property
    def dim(self) -> int:
        return self.records[0].dim

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _resolve(base: Path, field: str) -> Path | None:
    if field == "-":
        return None
    p = Path(field)
    return p if p.is_absolute() else base / p


def read_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest.

    Line 1 is ``role=<mixed|reference|test>``; each further non-blank line is
    ``featurePath<TAB>imageH<TAB>imageW<TAB>instanceMaskPath|-<TAB>gtMaskPath|-``.
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFile(f"no such manifest: {path}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("role="):
        raise ValidationError(f"{path}: first line must be role=<{'|'.join(ROLES)}>")
    role = lines[0][len("role="):].strip()
    if role not in ROLES:
        raise ValidationError(f"{path}: unknown role {role!r}")

    base = path.parent
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        try:
            image_h, image_w = int(fields[1]), int(fields[2])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: imageH/imageW must be integers") from exc
        rec = ImageRecord(
            feature_path=_resolve(base, fields[0]),
            image_h=image_h,
            image_w=image_w,
            instance_mask_path=_resolve(base, fields[3]),
            gt_mask_path=_resolve(base, fields[4]),
        )
        _check_record(rec, f"{path}:{lineno}")
        records.append(rec)

    if not records:
        raise EmptyManifest(f"{path}: manifest lists no images")
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise DimMismatch(f"{path}: records disagree on embedding dim {sorted(dims)}")
    return DatasetManifest(role=role, records=records)


def _check_record(rec: ImageRecord, where: str):
    for p in (rec.feature_path, rec.instance_mask_path, rec.gt_mask_path):
        if p is not None and not p.is_file():
            raise MissingFile(f"{where}: missing file {p}")
    rec.grid_h, rec.grid_w, rec.dim = read_feature_header(rec.feature_path)
    if rec.image_h < rec.grid_h or rec.image_w < rec.grid_w:
        raise DimMismatch(
            f"{where}: image {rec.image_h}x{rec.image_w} smaller than grid {rec.grid_h}x{rec.grid_w}"
        )
    for p in (rec.instance_mask_path, rec.gt_mask_path):
        if p is not None:
            size = read_pgm_size(p)
            if size != (rec.image_h, rec.image_w):
                raise DimMismatch(f"{where}: raster {p.name} is {size[0]}x{size[1]}, "
                                  f"record says {rec.image_h}x{rec.image_w}")


def format_manifest(role: str, records, base=None) -> str:
    """Render records as manifest text; paths are made relative to ``base`` when given."""
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}")

    def rel(p):
        if p is None:
            return "-"
        p = Path(p)
        return os.path.relpath(p, base) if base is not None else str(p)

    lines = [f"role={role}"]
    for r in records:
        lines.append("\t".join([rel(r.feature_path), str(r.image_h), str(r.image_w),
                                rel(r.instance_mask_path), rel(r.gt_mask_path)]))
    return "\n".join(lines) + "\n"


def write_manifest(path, role: str, records):
    path = Path(path)
    atomic_write_text(path, format_manifest(role, records, base=path.parent))


# --------------------------------------------------------------------------
# fitted artifacts
# --------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.buf):
            raise Corrupt(f"{self.what} file is truncated")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out if len(out) > 1 else out[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        end = self.pos + dt.itemsize * count
        if end > len(self.buf):
            raise Corrupt(f"{self.what} file is truncated")
        out = np.frombuffer(self.buf, dtype=dt, count=count, offset=self.pos).copy()
        self.pos = end
        return out

    def finish(self):
        if self.pos != len(self.buf):
            raise Corrupt(f"{self.what} file has {len(self.buf) - self.pos} trailing bytes")


def _check_magic(buf: bytes, magic: bytes, what: str) -> _Reader:
    if buf[:8] != magic:
        raise Corrupt(f"not a {what} file (bad magic)")
    r = _Reader(buf, what)
    r.pos = 8
    version = r.take("I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{what} format version {version}, this build reads {FORMAT_VERSION}")
    return r


def _pack_codebook(cb) -> bytes:
    hist = np.asarray(cb.inertia_history, dtype="<f8")
    return b"".join([
        struct.pack("<IIQ", cb.k, cb.dim, cb.seed),
        cb.centroids.astype("<f8").tobytes(),
        cb.counts.astype("<u8").tobytes(),
        struct.pack("<I", len(hist)),
        hist.tobytes(),
    ])


def _unpack_codebook(r: _Reader):
    from .clustering import ClusterCodebook

    k, dim, seed = r.take("IIQ")
    centroids = r.array("<f8", k * dim).reshape(k, dim)
    counts = r.array("<u8", k).astype(np.int64)
    n_hist = r.take("I")
    hist = r.array("<f8", n_hist).tolist()
    try:
        return ClusterCodebook(centroids=centroids, counts=counts, seed=int(seed), inertia_history=hist)
    except ValidationError as exc:
        raise Corrupt(f"invalid codebook payload: {exc}") from exc


def encode_codebook(cb) -> bytes:
    return CODEBOOK_MAGIC + struct.pack("<I", FORMAT_VERSION) + _pack_codebook(cb)


def decode_codebook(buf: bytes):
    r = _check_magic(buf, CODEBOOK_MAGIC, "codebook")
    cb = _unpack_codebook(r)
    r.finish()
    return cb


def save_codebook(cb, path):
    atomic_write_bytes(path, encode_codebook(cb))


def load_codebook(path):
    return decode_codebook(_read_bytes(path))


def encode_model(model) -> bytes:
    k = model.codebook.k
    aset = model.anomaly_set
    flags = np.zeros(k, dtype="u1")
    flags[sorted(aset.anomaly_ids)] = 1
    return b"".join([
        MODEL_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _pack_codebook(model.codebook),
        model.mixed_dist.counts.astype("<u8").tobytes(),
        model.ref_dist.counts.astype("<u8").tobytes(),
        np.asarray(aset.ratios, dtype="<f8").tobytes(),
        struct.pack("<dd", aset.threshold, model.gamma),
        flags.tobytes(),
    ])


def decode_model(buf: bytes):
    from .distribution import AnomalyClusterSet, ClusterDistribution, PastaModel

    r = _check_magic(buf, MODEL_MAGIC, "model")
    cb = _unpack_codebook(r)
    k = cb.k
    mixed = r.array("<u8", k).astype(np.int64)
    ref = r.array("<u8", k).astype(np.int64)
    ratios = r.array("<f8", k)
    threshold, gamma = r.take("dd")
    flags = r.array("u1", k)
    r.finish()
    try:
        return PastaModel(
            codebook=cb,
            mixed_dist=ClusterDistribution(mixed),
            ref_dist=ClusterDistribution(ref),
            anomaly_set=AnomalyClusterSet(
                anomaly_ids=frozenset(int(i) for i in np.flatnonzero(flags)),
                ratios=ratios,
                threshold=threshold,
            ),
            gamma=gamma,
        )
    except ValidationError as exc:
        raise Corrupt(f"invalid model payload: {exc}") from exc


def save_model(model, path):
    atomic_write_bytes(path, encode_model(model))


def load_model(path):
    return decode_model(_read_bytes(path))


def encode_bag(bag) -> bytes:
    n, dim = bag.embeddings.shape
    return b"".join([
        BAG_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<IIId", n, dim, bag.k_sphere, bag.bag_fraction),
        bag.embeddings.astype("<f8").tobytes(),
        bag.radii.astype("<f8").tobytes(),
    ])


def decode_bag(buf: bytes):
    from .baseline import FeatureBag

    r = _check_magic(buf, BAG_MAGIC, "feature bag")
    n, dim, k_sphere, fraction = r.take("IIId")
    emb = r.array("<f8", n * dim).reshape(n, dim)
    radii = r.array("<f8", n)
    r.finish()
    try:
        return FeatureBag(embeddings=emb, radii=radii, k_sphere=k_sphere, bag_fraction=fraction)
    except ValidationError as exc:
        raise Corrupt(f"invalid bag payload: {exc}") from exc


def save_bag(bag, path):
    atomic_write_bytes(path, encode_bag(bag))


def load_bag(path):
    return decode_bag(_read_bytes(path))
