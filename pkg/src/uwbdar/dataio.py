"""On-disk formats: sample containers, weight bundles, manifests, reports, ingestion.

Sample container (``.uwbs``), all little-endian::

    magic   4s   b"UWBS"
    version u16  1
    rows    u32
    cols    u32
    kind    u8   0 pulse, 1 range-time, 2 frequency-time, 3 range-Doppler
    label   u16  index into LABELS
    subject u16
    payload rows*cols float32, row-major

Parameter files (bundles ``.uwbb`` and trained models ``.uwbm``)::

    magic   4s   b"UWBB" or b"UWBM"
    version u16  1
    hlen    u32  length of the JSON header
    header  hlen bytes, UTF-8 JSON with an ordered block index
    blocks  float64 little-endian, concatenated in index order
"""
from __future__ import annotations

import csv
import io
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import domainmaps as dm
from .adapt import K_ORIGINAL, InputAdapter, PevGrid
from .model import BranchSpec, DarModel, EncoderConfig, ModelSpec, PretrainedBundle
from .uwbsim import LABELS, PulseMatrix, label_index

__all__ = [
    "DataError",
    "BadMagic",
    "Truncated",
    "UnknownKind",
    "VersionUnsupported",
    "KIND_CODES",
    "SampleRecord",
    "encode_sample",
    "decode_sample",
    "save_sample",
    "load_sample",
    "save_bundle",
    "load_bundle",
    "encode_bundle",
    "decode_bundle",
    "save_model",
    "load_model",
    "ManifestEntry",
    "write_manifest",
    "read_manifest",
    "IngestResult",
    "DEFAULT_MAPPING",
    "ingest_alert",
    "write_reports",
    "read_reports",
    "save_corpus",
    "load_corpus",
]

log = logging.getLogger(__name__)


class DataError(Exception):
    """Malformed or unreadable data file."""


class BadMagic(DataError):
    pass


class Truncated(DataError):
    pass


class UnknownKind(DataError):
    pass


class VersionUnsupported(DataError):
    pass


SAMPLE_MAGIC = b"UWBS"
BUNDLE_MAGIC = b"UWBB"
MODEL_MAGIC = b"UWBM"
VERSION = 1
_SAMPLE_HEAD = struct.Struct("<4sHIIBHH")

KIND_CODES = {"pulse": 0, dm.RANGE_TIME: 1, dm.FREQUENCY_TIME: 2, dm.RANGE_DOPPLER: 3}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


# ---------------------------------------------------------------------------
# samples


@dataclass
class SampleRecord:
    """Contents of one sample container."""

    kind: str
    data: np.ndarray  # float32 (rows, cols)
    label_code: int = 0
    subject_id: int = 0

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise UnknownKind(f"unknown sample kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"sample data must be 2-D, got shape {self.data.shape}")
        for name, v in (("label_code", self.label_code), ("subject_id", self.subject_id)):
            if not 0 <= int(v) <= 0xFFFF:
                raise ValueError(f"{name} must fit in 16 bits, got {v}")

    @property
    def label(self) -> str:
        return LABELS[self.label_code]

    @classmethod
    def from_pulse(cls, m: PulseMatrix) -> "SampleRecord":
        return cls("pulse", np.asarray(m.data, dtype=np.float32), m.label_code, m.subject_id)

    @classmethod
    def from_map(cls, m: dm.DomainMap) -> "SampleRecord":
        return cls(m.kind, np.asarray(m.data, dtype=np.float32), label_index(m.label) if m.label else 0, m.subject_id)

    def to_pulse(self, frame_rate: float = 100.0, sample_id: str = "") -> PulseMatrix:
        if self.kind != "pulse":
            raise ValueError(f"a {self.kind} sample is not a pulse matrix")
        return PulseMatrix(self.data, frame_rate, self.label, self.subject_id, sample_id)


def _as_record(sample) -> SampleRecord:
    if isinstance(sample, SampleRecord):
        return sample
    if isinstance(sample, PulseMatrix):
        return SampleRecord.from_pulse(sample)
    if isinstance(sample, dm.DomainMap):
        return SampleRecord.from_map(sample)
    raise TypeError(f"cannot store {type(sample).__name__} as a sample")


def encode_sample(sample) -> bytes:
    rec = _as_record(sample)
    data = np.ascontiguousarray(rec.data, dtype="<f4")
    rows, cols = data.shape
    head = _SAMPLE_HEAD.pack(SAMPLE_MAGIC, VERSION, rows, cols, KIND_CODES[rec.kind], int(rec.label_code),
                             int(rec.subject_id))
    return head + data.tobytes()


def decode_sample(buf: bytes) -> SampleRecord:
    if len(buf) < 4 or buf[:4] != SAMPLE_MAGIC:
        if len(buf) < 4 and SAMPLE_MAGIC.startswith(bytes(buf)):
            raise Truncated(f"{len(buf)} bytes, shorter than the magic")
        raise BadMagic(f"expected magic {SAMPLE_MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < _SAMPLE_HEAD.size:
        raise Truncated(f"header needs {_SAMPLE_HEAD.size} bytes, got {len(buf)}")
    _, version, rows, cols, kind, label, subject = _SAMPLE_HEAD.unpack_from(buf)
    if version != VERSION:
        raise VersionUnsupported(f"sample container version {version}; this reader handles {VERSION}")
    if kind not in _KIND_NAMES:
        raise UnknownKind(f"kind code {kind} is not one of {sorted(_KIND_NAMES)}")
    want = rows * cols * 4
    got = len(buf) - _SAMPLE_HEAD.size
    if got < want:
        raise Truncated(f"payload has {got} bytes, {rows}x{cols} float32 needs {want}")
    if got > want:
        raise DataError(f"{got - want} trailing bytes after the payload")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_SAMPLE_HEAD.size).reshape(rows, cols)
    return SampleRecord(_KIND_NAMES[kind], data.astype(np.float32), label, subject)


def save_sample(sample, path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path) -> SampleRecord:
    return decode_sample(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# parameter files


def _encode_blocks(magic: bytes, header: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> bytes:
    index = []
    payload = io.BytesIO()
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape)})
        payload.write(a.tobytes())
    blob = json.dumps({**header, "blocks": index}, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<HI", VERSION, len(blob)) + blob + payload.getvalue()


def _decode_blocks(magic: bytes, buf: bytes) -> tuple[dict, dict]:
    if buf[:4] != magic:
        if len(buf) < 4 and magic.startswith(bytes(buf)):
            raise Truncated("file shorter than the magic")
        raise BadMagic(f"expected magic {magic!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 10:
        raise Truncated("parameter file header is incomplete")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise VersionUnsupported(f"parameter file version {version}; this reader handles {VERSION}")
    if len(buf) < 10 + hlen:
        raise Truncated("JSON header is incomplete")
    try:
        header = json.loads(buf[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable header: {exc}") from None
    arrays = {}
    off = 10 + hlen
    for blk in header.get("blocks", []):
        shape = tuple(int(s) for s in blk["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(buf):
            raise Truncated(f"block {blk['name']!r} needs {8 * n} bytes, {len(buf) - off} left")
        arrays[blk["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes after the last block")
    return header, arrays


def _encoder_header(cfg: EncoderConfig) -> dict:
    return {"d": cfg.d, "layers": cfg.layers, "heads": cfg.heads, "mlp_ratio": cfg.mlp_ratio, "seed": cfg.seed}


def encode_bundle(bundle: PretrainedBundle) -> bytes:
    header = {**_encoder_header(bundle.config), "k_original": K_ORIGINAL, "provenance": bundle.provenance,
              "notes": bundle.notes}
    arrays = [("kernel", bundle.kernel), ("kernel_bias", bundle.kernel_bias), ("pev", bundle.pev.grid),
              ("pev_cls", bundle.pev.class_token_pev), ("class_token", bundle.class_token)]
    arrays += [(f"encoder/{k}", bundle.encoder[k]) for k in sorted(bundle.encoder)]
    return _encode_blocks(BUNDLE_MAGIC, header, arrays)


def decode_bundle(buf: bytes, provenance: str | None = None) -> PretrainedBundle:
    header, arr = _decode_blocks(BUNDLE_MAGIC, buf)
    if header.get("k_original") != K_ORIGINAL:
        raise DataError(f"bundle kernel side {header.get('k_original')} differs from {K_ORIGINAL}")
    try:
        cfg = EncoderConfig(d=header["d"], layers=header["layers"], heads=header["heads"],
                            mlp_ratio=header["mlp_ratio"], seed=header["seed"])
        return PretrainedBundle(
            config=cfg,
            kernel=arr["kernel"],
            kernel_bias=arr["kernel_bias"],
            pev=PevGrid(arr["pev"], arr["pev_cls"]),
            class_token=arr["class_token"],
            encoder={k[len("encoder/"):]: v for k, v in arr.items() if k.startswith("encoder/")},
            provenance=provenance or header["provenance"],
            notes=dict(header.get("notes", {})),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"inconsistent bundle: {exc}") from None


def save_bundle(bundle: PretrainedBundle, path) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def load_bundle(path, provenance: str | None = None) -> PretrainedBundle:
    """Read a bundle; pass ``provenance="external"`` for weights obtained elsewhere."""
    return decode_bundle(Path(path).read_bytes(), provenance)


def _spec_header(spec: ModelSpec) -> dict:
    branches = []
    for br in spec.branches:
        d = {"kind": br.kind, "source": br.source}
        if br.adapter is not None:
            d["adapter"] = {"strategy": br.adapter.strategy, "source_shape": list(br.adapter.source_shape),
                            "channels": br.adapter.channels}
        if br.input_shape is not None:
            d["input_shape"] = list(br.input_shape)
        branches.append(d)
    return {"encoder": _encoder_header(spec.encoder), "n_classes": spec.n_classes,
            "beta_trainable": spec.beta_trainable, "freq_layers": [list(l) for l in spec.freq_layers],
            "head_hidden": list(spec.head_hidden), "branches": branches}


def _spec_from_header(h: dict) -> ModelSpec:
    branches = []
    for d in h["branches"]:
        ad = d.get("adapter")
        adapter = InputAdapter(ad["strategy"], tuple(ad["source_shape"]), ad["channels"]) if ad else None
        shape = tuple(d["input_shape"]) if "input_shape" in d else None
        branches.append(BranchSpec(d["kind"], d["source"], adapter, shape))
    return ModelSpec(tuple(branches), EncoderConfig(**h["encoder"]), h["n_classes"], h["beta_trainable"],
                     tuple(tuple(l) for l in h["freq_layers"]), tuple(h["head_hidden"]))


def save_model(model: DarModel, path, meta: Mapping | None = None) -> None:
    """Trained model: spec and dtype in the header, parameters as float64 blocks."""
    header = {"spec": _spec_header(model.spec), "dtype": np.dtype(model.dtype).name, "meta": dict(meta or {})}
    Path(path).write_bytes(_encode_blocks(MODEL_MAGIC, header, sorted(model.params.items())))


def load_model(path) -> tuple[DarModel, dict]:
    header, arr = _decode_blocks(MODEL_MAGIC, Path(path).read_bytes())
    try:
        spec = _spec_from_header(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"inconsistent model header: {exc}") from None
    dtype = np.dtype(header["dtype"])
    return DarModel(spec, {k: v.astype(dtype) for k, v in arr.items()}), header.get("meta", {})


# ---------------------------------------------------------------------------
# manifests

_MANIFEST_TAG = "# uwbdar manifest v1"
_FIELDS = ("path", "label", "subject", "frame_rate", "sample_id", "notes")


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest's directory, or absolute
    label: str
    subject_id: int
    frame_rate: float = 100.0
    sample_id: str = ""
    notes: str = ""


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    """Tab-separated text, one record per line after a version tag and column names."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_MANIFEST_TAG + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(_FIELDS)
        for e in entries:
            if e.label not in LABELS:
                raise ValueError(f"label {e.label!r} is not one of {LABELS}")
            w.writerow([e.path, e.label, int(e.subject_id), repr(float(e.frame_rate)), e.sample_id, e.notes])


def read_manifest(path, check_paths: bool = True) -> list[ManifestEntry]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != _MANIFEST_TAG:
            raise BadMagic(f"{path}: not a manifest (first line {first!r})")
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != _FIELDS:
        raise DataError(f"{path}: expected columns {_FIELDS}")
    out = []
    for n, row in enumerate(rows[1:], start=3):
        if len(row) != len(_FIELDS):
            raise DataError(f"{path}:{n}: expected {len(_FIELDS)} fields, got {len(row)}")
        p, label, subject, rate, sid, notes = row
        if label not in LABELS:
            raise DataError(f"{path}:{n}: label {label!r} is not one of {LABELS}")
        if check_paths and not (path.parent / p).exists():
            raise DataError(f"{path}:{n}: listed file {p} does not exist")
        try:
            out.append(ManifestEntry(p, label, int(subject), float(rate), sid, notes))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# ingestion of externally recorded data

# File naming and numeric layout of an external recording set.  The public
# release documents its own layout; adjust ``pattern``, ``labels`` and
# ``layout`` to match it rather than changing code.
DEFAULT_MAPPING: dict = {
    "pattern": r"(?P<subject>\d+)[_/-](?P<label>[A-Za-z]+)[_-](?P<index>\d+)\.(?P<ext>npy|csv|txt|f32)$",
    "labels": {
        "relax": "Relax",
        "drive": "Drive",
        "nod": "Nod",
        "nodding": "Nod",
        "smoke": "Smoke",
        "smoking": "Smoke",
        "drink": "Drink",
        "drinking": "Drink",
        "panel": "Panel",
        "phone": "Phone",
    },
    "subjects": {},
    "kind": "pulse",
    "frame_rate": 100.0,
    # rows = fast time (range bins), cols = slow time; transpose if stored the other way
    "layout": {"rows": None, "cols": None, "transpose": False, "delimiter": ","},
}


@dataclass
class IngestResult:
    manifest_path: Path
    entries: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (relative path, reason)


def _read_numeric(path: Path, ext: str, layout: Mapping) -> np.ndarray:
    if ext == "npy":
        return np.load(path, allow_pickle=False)
    if ext in ("csv", "txt"):
        return np.loadtxt(path, delimiter=layout.get("delimiter", ",") if ext == "csv" else None, ndmin=2)
    rows, cols = layout.get("rows"), layout.get("cols")
    if not rows or not cols:
        raise ValueError("raw float32 files need layout.rows and layout.cols")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != rows * cols:
        raise ValueError(f"{raw.size} floats, expected {rows}x{cols}")
    return raw.reshape(rows, cols)


def ingest_alert(directory, out_dir, mapping: Mapping | None = None) -> IngestResult:
    """Convert externally recorded files into sample containers plus a manifest.

    Files are matched against ``mapping["pattern"]`` (a regex with ``subject``,
    ``label`` and ``ext`` groups, matched against the path relative to
    ``directory``); external labels are mapped through ``mapping["labels"]``
    (case-insensitive).  Every file that is not converted is listed with a
    reason in ``ingest_skipped.tsv``; conversion continues past bad files.
    """
    m = {**DEFAULT_MAPPING, **(mapping or {})}
    layout = {**DEFAULT_MAPPING["layout"], **m.get("layout", {})}
    labels = {str(k).lower(): v for k, v in m["labels"].items()}
    bad = {v for v in labels.values() if v not in LABELS}
    if bad:
        raise ValueError(f"mapping targets unknown labels {sorted(bad)}")
    kind = m["kind"]
    if kind not in KIND_CODES:
        raise ValueError(f"mapping kind {kind!r} is not one of {sorted(KIND_CODES)}")
    pattern = re.compile(m["pattern"])
    src = Path(directory)
    if not src.is_dir():
        raise DataError(f"{src} is not a directory")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    result = IngestResult(out / "manifest.tsv")
    for path in sorted(p for p in src.rglob("*") if p.is_file()):
        rel = path.relative_to(src).as_posix()
        hit = pattern.search(rel)
        if not hit:
            result.skipped.append((rel, "name does not match the mapping pattern"))
            continue
        ext_label = hit.group("label").lower()
        if ext_label not in labels:
            result.skipped.append((rel, f"unmapped label {hit.group('label')!r}"))
            continue
        raw_subject = hit.group("subject")
        try:
            subject = int(m["subjects"].get(raw_subject, raw_subject))
            data = np.asarray(_read_numeric(path, hit.group("ext"), layout), dtype=np.float64)
            if layout.get("transpose"):
                data = data.T
            if data.ndim != 2:
                raise ValueError(f"expected a 2-D array, got shape {data.shape}")
            for axis, want in ((0, layout.get("rows")), (1, layout.get("cols"))):
                if want and data.shape[axis] != want:
                    raise ValueError(f"shape {data.shape} does not match layout {layout.get('rows')}x{layout.get('cols')}")
            if not np.all(np.isfinite(data)):
                raise ValueError("non-finite values")
            label = labels[ext_label]
            rec = SampleRecord(kind, data.astype(np.float32), label_index(label), subject)
        except (OSError, ValueError) as exc:
            result.skipped.append((rel, f"unreadable: {exc}"))
            continue
        stem = re.sub(r"[^A-Za-z0-9_.-]+", "_", rel.rsplit(".", 1)[0])
        target = Path("samples") / f"{stem}.uwbs"
        save_sample(rec, out / target)
        sid = f"S{subject:02d}-{label}-{stem}"
        result.entries.append(ManifestEntry(target.as_posix(), label, subject, float(m["frame_rate"]), sid,
                                            f"source={rel}"))
    write_manifest(result.entries, result.manifest_path)
    with open(out / "ingest_skipped.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("path", "reason"))
        w.writerows(result.skipped)
    for rel, why in result.skipped:
        log.info("skipped %s: %s", rel, why)
    return result


# ---------------------------------------------------------------------------
# reports


def write_reports(reports, path, append: bool = True) -> None:
    """One JSON object per line."""
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_reports(path) -> list:
    from .bench import EvalReport

    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# corpora


def save_corpus(corpus, out_dir) -> Path:
    """Pulse containers under ``out_dir/samples`` plus ``manifest.tsv``; returns the manifest path.

    Few-shot pool membership is kept in the notes column as ``pool=1``.
    """
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in corpus.pulses:
        target = Path("samples") / f"{p.sample_id}.uwbs"
        save_sample(p, out / target)
        notes = "pool=1" if p.sample_id in corpus.reserved else ""
        entries.append(ManifestEntry(target.as_posix(), p.label, p.subject_id, p.frame_rate, p.sample_id, notes))
    write_manifest(entries, out / "manifest.tsv")
    return out / "manifest.tsv"


def load_corpus(manifest_path):
    """Read a pulse-matrix corpus listed in a manifest."""
    from .bench import Corpus

    manifest_path = Path(manifest_path)
    pulses, reserved = [], set()
    for e in read_manifest(manifest_path):
        rec = load_sample(manifest_path.parent / e.path)
        if rec.kind != "pulse":
            raise DataError(f"{e.path}: corpus entries must be pulse matrices, got {rec.kind}")
        if rec.label != e.label or rec.subject_id != e.subject_id:
            raise DataError(f"{e.path}: container says {rec.label}/{rec.subject_id}, manifest {e.label}/{e.subject_id}")
        sid = e.sample_id or Path(e.path).stem
        pulses.append(rec.to_pulse(e.frame_rate, sid))
        if "pool=1" in e.notes.split(";"):
            reserved.add(sid)
    try:
        return Corpus(pulses, frozenset(reserved))
    except ValueError as exc:
        raise DataError(str(exc)) from None
