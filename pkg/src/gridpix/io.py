"""Netpbm image/label files and dataset manifests.

Images are binary PPM (P6, maxval 255); label maps are binary 16-bit PGM
(P5, maxval 65535, big-endian samples as netpbm prescribes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segmentation import LabelMap

MAX_LABEL = 65535


class NetpbmError(ValueError):
    pass


def _parse_header(raw: bytes, magic: bytes, path) -> tuple[list[int], int]:
    """Return the three header integers and the payload offset."""
    if raw[:2] != magic:
        raise NetpbmError(f"{path}: byte 0: expected magic {magic.decode()}, found {raw[:2]!r}")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            found = raw[pos : pos + 1] or b"end of file"
            raise NetpbmError(f"{path}: byte {pos}: expected a header integer, found {found!r}")
        values.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise NetpbmError(f"{path}: byte {pos}: expected whitespace after header")
    return values, pos + 1


def read_image(path) -> np.ndarray:
    """(H, W, 3) float32 image scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    (w, h, maxval), offset = _parse_header(raw, b"P6", path)
    if maxval != 255:
        raise NetpbmError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    expected = w * h * 3
    actual = len(raw) - offset
    if actual < expected:
        raise NetpbmError(f"{path}: byte {offset}: truncated payload, expected {expected} bytes, got {actual}")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_image(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_labels(path) -> LabelMap:
    raw = Path(path).read_bytes()
    (w, h, maxval), offset = _parse_header(raw, b"P5", path)
    if maxval != MAX_LABEL:
        raise NetpbmError(f"{path}: label maps must be 16-bit PGM with maxval {MAX_LABEL}, got {maxval}")
    expected = w * h * 2
    actual = len(raw) - offset
    if actual < expected:
        raise NetpbmError(f"{path}: byte {offset}: truncated payload, expected {expected} bytes, got {actual}")
    data = np.frombuffer(raw, dtype=">u2", count=w * h, offset=offset)
    return LabelMap.from_array(data.reshape(h, w).astype(np.int64))


def write_labels(path, labels) -> None:
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"label map must be 2-D, got {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() > MAX_LABEL):
        raise ValueError(
            f"label ids must lie in [0, {MAX_LABEL}] for 16-bit PGM; compact the labels first (max id {lab.max()})"
        )
    h, w = lab.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAX_LABEL}\n".encode("ascii"))
        fh.write(lab.astype(">u2").tobytes())


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)  # (image_path, label_path | None)
    split: str = ""

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Parse ``image[TAB]labels`` lines; paths resolve relative to the manifest.

        A leading ``# split: <tag>`` line sets the split; other ``#`` lines
        and blank lines are ignored.
        """
        path = Path(path)
        base = path.parent
        manifest = cls()
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped[1:].strip()
                if body.startswith("split:"):
                    manifest.split = body[len("split:") :].strip()
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise ValueError(f"{path}:{lineno}: expected at most two tab-separated fields")
            image = base / parts[0].strip()
            labels = base / parts[1].strip() if len(parts) == 2 and parts[1].strip() else None
            for p in (image, labels):
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"{path}:{lineno}: {p} does not exist")
            manifest.entries.append((image, labels))
        return manifest

    def save(self, path) -> None:
        path = Path(path)
        lines = [f"# split: {self.split}"] if self.split else []
        for image, labels in self.entries:
            img = _relative(image, path.parent)
            lines.append(img if labels is None else f"{img}\t{_relative(labels, path.parent)}")
        path.write_text("\n".join(lines) + "\n")

    def samples(self):
        from .net import Sample

        out = []
        for image, labels in self.entries:
            out.append(Sample(read_image(image), None if labels is None else read_labels(labels).labels))
        return out


def _relative(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)
