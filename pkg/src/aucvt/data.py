"""Dataset manifests, the canonical 21-AU schema, and OpenFace CSV ingestion.

Manifest CSV format (UTF-8, comma-separated):

    # optional comment lines; a `# au_mask=1+2+...` directive fixes the
    # validity mask applied to every AU-labeled row in the file
    path,expression,aus
    img/a.png,happiness,
    img/b.png,,1+2+25

`expression` is a lowercase basic-emotion name or empty; `aus` is a
`+`-joined list of AU ids that are present, or empty. Without a mask
directive a row's mask covers exactly the AUs it lists.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, DecodeError, ManifestError, SchemaError
from .model import AU_INDEX, CANONICAL_AU_IDS, EXPRESSIONS

EXPRESSION_INDEX = {name: i for i, name in enumerate(EXPRESSIONS)}

# the 16 AUs OpenFace emits presence (`_c`) columns for, per our schema
OPENFACE_AU_IDS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26)


@dataclass(frozen=True)
class AUVector:
    """21 binary AU flags plus a per-slot validity mask, canonical order."""

    values: tuple
    mask: tuple

    def __post_init__(self):
        if len(self.values) != 21 or len(self.mask) != 21:
            raise ContractError("AUVector needs exactly 21 value and mask slots")
        if any(v not in (0, 1) for v in self.values) or any(m not in (0, 1) for m in self.mask):
            raise ContractError("AUVector entries must be binary")
        if any(v and not m for v, m in zip(self.values, self.mask)):
            raise ContractError("AUVector value set outside its mask")

    @staticmethod
    def from_sets(present: Sequence[int], known: Sequence[int]) -> "AUVector":
        for au in list(present) + list(known):
            if au not in AU_INDEX:
                raise ContractError(f"AU{au} outside the canonical 21-AU set")
        present = set(present)
        known = set(known) | present
        values = tuple(1 if au in present else 0 for au in CANONICAL_AU_IDS)
        mask = tuple(1 if au in known else 0 for au in CANONICAL_AU_IDS)
        return AUVector(values, mask)

    def present_aus(self) -> tuple:
        return tuple(au for au, v in zip(CANONICAL_AU_IDS, self.values) if v)

    def known_aus(self) -> tuple:
        return tuple(au for au, m in zip(CANONICAL_AU_IDS, self.mask) if m)

    def to_arrays(self):
        return np.array(self.values, dtype=np.float64), np.array(self.mask, dtype=np.float64)


def select_au_subset(vec: AUVector, keep: Sequence[int]) -> AUVector:
    """Intersect the validity mask with `keep`, zeroing newly masked values."""
    keep_set = set(keep)
    for au in keep_set:
        if au not in AU_INDEX:
            raise ContractError(f"AU{au} outside the canonical 21-AU set")
    mask = tuple(m if au in keep_set else 0 for au, m in zip(CANONICAL_AU_IDS, vec.mask))
    values = tuple(v if m else 0 for v, m in zip(vec.values, mask))
    return AUVector(values, mask)


@dataclass(frozen=True)
class Sample:
    image_path: str
    expression: Optional[int] = None
    au: Optional[AUVector] = None
    source: str = "target"

    def __post_init__(self):
        if self.expression is None and self.au is None:
            raise ContractError(f"{self.image_path}: sample carries no label")


@dataclass
class Manifest:
    root: str
    samples: list = field(default_factory=list)
    split: str = "train"


# ---------------------------------------------------------------------------
# manifest parsing / emission

_HEADER = ["path", "expression", "aus"]


def _parse_au_field(text: str, row: int) -> list:
    aus = []
    for part in text.split("+"):
        part = part.strip()
        if not part:
            raise ManifestError(row, f"malformed aus field {text!r}")
        try:
            aus.append(int(part))
        except ValueError:
            raise ManifestError(row, f"malformed aus field {text!r}") from None
    return aus


def load_manifest(path, split: str = "train", check_files: bool = True, source: str = "target") -> Manifest:
    """Parse a manifest CSV; errors carry 1-based physical row numbers."""
    root = os.path.dirname(os.path.abspath(path))
    mask_directive: Optional[list] = None
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("au_mask="):
                    mask_directive = _parse_au_field(body[len("au_mask=") :], lineno)
                continue
            rows.append((lineno, line))
    if not rows:
        raise SchemaError(f"{path}: empty manifest")
    header_no, header = rows[0]
    if next(csv.reader([header])) != _HEADER:
        raise SchemaError(f"{path}: row {header_no}: expected header {','.join(_HEADER)}")

    manifest = Manifest(root=root, split=split)
    seen = set()
    for lineno, line in rows[1:]:
        fields = next(csv.reader([line]))
        if len(fields) != 3:
            raise ManifestError(lineno, f"expected 3 fields, got {len(fields)}")
        rel, expr_name, aus_text = (f.strip() for f in fields)
        if not rel:
            raise ManifestError(lineno, "empty path")
        if rel in seen:
            raise ManifestError(lineno, f"duplicate path {rel!r}")
        seen.add(rel)
        expression = None
        if expr_name:
            if expr_name not in EXPRESSION_INDEX:
                raise ManifestError(lineno, f"unknown expression {expr_name!r}")
            expression = EXPRESSION_INDEX[expr_name]
        # a row with an expression and an empty aus field is expression-only
        # even under a mask directive; without an expression, an empty aus
        # field plus a directive reads as "all masked AUs absent"
        au = None
        if aus_text or (mask_directive is not None and expression is None):
            present = _parse_au_field(aus_text, lineno) if aus_text else []
            known = mask_directive if mask_directive is not None else present
            try:
                au = AUVector.from_sets(present, known)
            except ContractError as exc:
                raise ManifestError(lineno, str(exc)) from None
        if expression is None and au is None:
            raise ManifestError(lineno, "row carries neither an expression nor AU labels")
        full = os.path.join(root, rel)
        if check_files and not os.path.exists(full):
            raise ManifestError(lineno, f"missing image file {full}")
        manifest.samples.append(Sample(image_path=full, expression=expression, au=au, source=source))
    return manifest


def emit_manifest(path, rows, mask: Optional[Sequence[int]] = None, header_comment: Optional[str] = None):
    """Write a manifest CSV.

    `rows` is a sequence of (relative path, expression name or None,
    AUVector or None). With a shared `mask`, rows carry only their present
    AUs and a single `# au_mask=` directive pins the validity set.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        if mask is not None:
            fh.write("# au_mask=" + "+".join(str(a) for a in mask) + "\n")
        fh.write(",".join(_HEADER) + "\n")
        for rel, expr_name, au in rows:
            aus_text = ""
            if au is not None:
                aus_text = "+".join(str(a) for a in au.present_aus())
            fh.write(f"{rel},{expr_name or ''},{aus_text}\n")


# ---------------------------------------------------------------------------
# OpenFace ingestion


def parse_openface_csv(path) -> list:
    """Extract (frame_id, AUVector) per row from an OpenFace output CSV.

    Uses the binary presence (`_c`) columns of the 16 supported AUs; all
    other columns (intensities, AU28_c, AU45_c, pose, ...) are ignored.
    """
    required = {au: f"AU{au:02d}_c" for au in OPENFACE_AU_IDS}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            raw_header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty CSV") from None
        header = [h.strip() for h in raw_header]
        col = {}
        for au, name in required.items():
            if name not in header:
                raise SchemaError(f"{path}: missing required column {name}")
            col[au] = header.index(name)
        frame_col = header.index("frame") if "frame" in header else None

        out = []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            present = []
            for au, ci in col.items():
                try:
                    value = float(row[ci])
                except (ValueError, IndexError):
                    raise ManifestError(rowno, f"bad value for {required[au]}: {row[ci] if ci < len(row) else '<missing>'}") from None
                if value not in (0.0, 1.0):
                    raise ManifestError(rowno, f"non-binary value {value} for {required[au]}")
                if value == 1.0:
                    present.append(au)
            if frame_col is not None:
                try:
                    frame_id = int(float(row[frame_col]))
                except ValueError:
                    raise ManifestError(rowno, f"bad frame id {row[frame_col]!r}") from None
            else:
                frame_id = rowno - 1
            out.append((frame_id, AUVector.from_sets(present, OPENFACE_AU_IDS)))
    return out


# ---------------------------------------------------------------------------
# image decoding


def decode_and_resize(path, short_edge: int = 112) -> np.ndarray:
    """PNG -> [3, short_edge, short_edge] float64 in [0,1].

    Bilinear resize so the short edge hits `short_edge`, preserving aspect
    ratio, then center-crop to a square.
    """
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    if img.mode != "RGB":
        raise DecodeError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
    w, h = img.size
    scale = short_edge / min(w, h)
    nw, nh = max(short_edge, round(w * scale)), max(short_edge, round(h * scale))
    img = img.resize((nw, nh), Image.BILINEAR)
    left = (nw - short_edge) // 2
    top = (nh - short_edge) // 2
    img = img.crop((left, top, left + short_edge, top + short_edge))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_samples(manifest: Manifest, short_edge: int = 112) -> list:
    """Decode every manifest entry into a training-ready LoadedSample list."""
    from .train import LoadedSample

    out = []
    for s in manifest.samples:
        image = decode_and_resize(s.image_path, short_edge)
        values = mask = None
        if s.au is not None:
            values, mask = s.au.to_arrays()
        out.append(LoadedSample(image=image, expression=s.expression, au_values=values, au_mask=mask))
    return out
