"""Loading of images, reports, labels and prompt corpora.

Formats:
  images   -- PNG (8/16-bit grayscale) or raw little-endian float32 with a
              JSON sidecar {id, width, height, source_range}
  reports  -- JSON lines, one object per report
              {id, text, labels: [14 ints in {-1, 0, 1, null}]}
  prompts  -- plain text, one prompt per line
  manifest -- JSON object {"kind": ..., "records": [paths]}
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import FormatError, MissingSection, RangeError
from .io_utils import atomic_write_bytes, atomic_write_json, atomic_write_text

log = logging.getLogger(__name__)

CHEXPERT_CLASSES = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
NUM_CLASSES = len(CHEXPERT_CLASSES)

# 4-state label alphabet: raw integer codes as found in report files.
POSITIVE, NEGATIVE, UNCERTAIN, MISSING = 1, 0, -1, None


@dataclass
class ImageSample:
    """A pixel grid normalized to [0,1] with its original dynamic range."""

    id: str
    pixels: np.ndarray          # (height, width) float64 in [0,1]
    source_range: float = 255.0
    labels: np.ndarray | None = None   # binary 14-vector once normalized

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise FormatError(f"image {self.id}: expected 2-D grid")
        if self.source_range <= 0:
            raise FormatError(f"image {self.id}: source_range must be positive")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise RangeError(f"image {self.id}: pixel values outside [0,1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class LabeledReport:
    id: str
    full_text: str
    impression: str
    labels: list                 # 14 entries in {1, 0, -1, None}
    primary_class: str | None
    valid: bool = True


@dataclass
class FinetuneSet:
    """The few-shot pairing: negatives + positives, each with one caption."""

    negatives: list              # list[ImageSample]
    positives: list
    negative_caption: str
    positive_caption: str

    def pairs(self):
        out = [(img, self.negative_caption) for img in self.negatives]
        out += [(img, self.positive_caption) for img in self.positives]
        return out


@dataclass
class PromptCorpus:
    prompts: list
    origin: str = "external file"

    def __post_init__(self):
        if not self.prompts:
            raise FormatError("prompt corpus is empty")
        if any(not p for p in self.prompts):
            raise FormatError("prompt corpus contains empty strings")


_IMPRESSION_RE = re.compile(r"impression\s*:", re.IGNORECASE)
# Section terminators: all-caps header lines/segments like "NOTIFICATION:".
_HEADER_RE = re.compile(r"\b[A-Z][A-Z ]{2,}:")


def extract_impression(full_text: str) -> str:
    """Text after the last "IMPRESSION:" marker, up to the next all-caps
    section header or end of text."""
    if not full_text:
        raise FormatError("empty report text")
    matches = list(_IMPRESSION_RE.finditer(full_text))
    if not matches:
        raise MissingSection("no IMPRESSION section found")
    start = matches[-1].end()
    rest = full_text[start:]
    header = _HEADER_RE.search(rest)
    if header:
        rest = rest[:header.start()]
    return rest.strip()


def normalize_labels(raw) -> np.ndarray:
    """Map the 4-state alphabet to binary: uncertain and positive -> 1,
    negative and missing -> 0."""
    if len(raw) != NUM_CLASSES:
        raise FormatError(f"expected {NUM_CLASSES} labels, got {len(raw)}")
    out = np.zeros(NUM_CLASSES, dtype=np.int64)
    for i, v in enumerate(raw):
        if v not in (POSITIVE, NEGATIVE, UNCERTAIN, MISSING):
            raise FormatError(f"label {i}: invalid state {v!r}")
        out[i] = 1 if v in (POSITIVE, UNCERTAIN) else 0
    return out


def assign_primary_class(raw_labels) -> str | None:
    """Lowest-index positive class; "No Finding" only when sole positive."""
    binary = normalize_labels(raw_labels)
    positives = [CHEXPERT_CLASSES[i] for i in np.flatnonzero(binary)]
    if not positives:
        return None
    if "No Finding" in positives and len(positives) > 1:
        positives = [c for c in positives if c != "No Finding"]
    return positives[0]


def parse_report_record(obj) -> LabeledReport:
    try:
        rid = obj["id"]
        text = obj["text"]
        raw = obj["labels"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad report record: {exc}") from exc
    try:
        impression = extract_impression(text)
        valid = bool(impression)
    except MissingSection:
        impression = ""
        valid = False
    return LabeledReport(
        id=str(rid),
        full_text=text,
        impression=impression,
        labels=list(raw),
        primary_class=assign_primary_class(raw),
        valid=valid,
    )


def load_reports(path) -> list:
    reports = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            try:
                reports.append(parse_report_record(obj))
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    reports.sort(key=lambda r: r.id)
    if not reports:
        log.warning("empty report manifest: %s", path)
    return reports


def load_prompts(path) -> PromptCorpus:
    with open(path, "r", encoding="utf-8") as fh:
        prompts = [line.rstrip("\n") for line in fh if line.strip()]
    return PromptCorpus(prompts=prompts, origin="external file")


def _load_png(path, record_id=None):
    img = Image.open(path)
    if img.mode == "I;16":
        source_range = 65535.0
        arr = np.asarray(img, dtype=np.float64)
    elif img.mode in ("L", "I"):
        source_range = 255.0 if img.mode == "L" else 65535.0
        arr = np.asarray(img, dtype=np.float64)
    else:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
        source_range = 255.0
    if arr.max(initial=0.0) > source_range:
        raise RangeError(f"{path}: pixel {arr.max()} exceeds range {source_range}")
    rid = record_id or os.path.splitext(os.path.basename(path))[0]
    return ImageSample(id=rid, pixels=arr / source_range, source_range=source_range)


def _load_raw(path, sidecar_path):
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    for key in ("id", "width", "height", "source_range"):
        if key not in meta:
            raise FormatError(f"{sidecar_path}: missing key {key!r}")
    w, h = int(meta["width"]), int(meta["height"])
    source_range = float(meta["source_range"])
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != w * h:
        raise FormatError(f"{path}: expected {w * h} floats, found {flat.size}")
    pixels = flat.reshape(h, w).astype(np.float64)
    # Raw payload is normalized: value 1.0 corresponds to source_range.
    if pixels.size and (pixels.max() > 1.0 or pixels.min() < 0.0):
        peak = pixels.max() * source_range
        raise RangeError(
            f"{path}: pixel {peak:g} exceeds declared range {source_range:g}")
    return ImageSample(id=str(meta["id"]), pixels=pixels, source_range=source_range)


def load_image(path) -> ImageSample:
    path = os.fspath(path)
    if path.endswith(".png"):
        return _load_png(path)
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        return _load_raw(path, sidecar)
    raise FormatError(f"unsupported image record: {path}")


def load_images(paths) -> list:
    samples = [load_image(p) for p in paths]
    samples.sort(key=lambda s: s.id)
    return samples


def load_image_dir(directory) -> list:
    paths = sorted(
        os.path.join(directory, name)
        for name in os.listdir(directory)
        if name.endswith(".png") or os.path.exists(os.path.join(directory, name + ".json"))
    )
    return load_images(paths)


def load_manifest(path, kind):
    """Load a manifest of records of the given kind (images|reports|prompts)."""
    if kind not in ("images", "reports", "prompts"):
        raise FormatError(f"unknown manifest kind {kind!r}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or "records" not in manifest:
        raise FormatError(f"{path}: manifest must be an object with 'records'")
    base = os.path.dirname(os.fspath(path))
    records = [os.path.join(base, p) for p in manifest["records"]]
    if not records:
        log.warning("empty manifest: %s", path)
    if kind == "images":
        return load_images(records)
    if kind == "reports":
        out = []
        for p in records:
            out.extend(load_reports(p))
        out.sort(key=lambda r: r.id)
        return out
    prompts = []
    for p in records:
        prompts.extend(load_prompts(p).prompts)
    return PromptCorpus(prompts=prompts, origin="external file")


def save_image(sample: ImageSample, path):
    """Write an ImageSample back to disk.

    PNG round-trips 8/16-bit sources exactly; any other source_range is
    written in the raw float32 + sidecar format (bit-exact for float32).
    """
    path = os.fspath(path)
    if path.endswith(".png"):
        if sample.source_range == 255.0:
            arr = np.rint(sample.pixels * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(path)
        elif sample.source_range == 65535.0:
            arr = np.rint(sample.pixels * 65535.0).astype(np.uint16)
            Image.fromarray(arr).save(path)
        else:
            raise FormatError(
                f"image {sample.id}: PNG output needs source_range 255 or 65535")
        return
    atomic_write_bytes(path, sample.pixels.astype("<f4").tobytes())
    atomic_write_json(path + ".json", {
        "id": sample.id,
        "width": sample.width,
        "height": sample.height,
        "source_range": sample.source_range,
    })


def save_image_collection(samples, directory, fmt="raw") -> str:
    """Write samples plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for s in samples:
        name = f"{s.id}.png" if fmt == "png" else f"{s.id}.f32"
        save_image(s, os.path.join(directory, name))
        records.append(name)
    manifest_path = os.path.join(directory, "manifest.json")
    atomic_write_json(manifest_path, {"kind": "images", "records": records})
    return manifest_path


def save_reports(reports, path):
    lines = []
    for r in reports:
        lines.append(json.dumps({"id": r.id, "text": r.full_text, "labels": r.labels}))
    atomic_write_text(path, "\n".join(lines) + "\n")
