"""Manifest loading, mask decoding and the precomputed region cache."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .image_ops import decode_png, png_bit_depth, read_image
from .masks import DEFAULT_MIN_AREA, DEFAULT_THETA, BBox, RegionMask, RegionSet, postprocess_regions

log = logging.getLogger(__name__)

CACHE_MAGIC = b"SAMCLRRC"
CACHE_VERSION = 1


class DataError(Exception):
    """Bad manifest, mask or cache content."""


@dataclass
class ManifestEntry:
    image_id: str
    image: Path
    masks: list[Path] = field(default_factory=list)
    label: Optional[int] = None


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image_id = str(obj["id"])
                image = base / obj["image"]
                masks = [base / m for m in obj.get("masks", [])]
                label = obj.get("label")
                label = None if label is None else int(label)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
            if image_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            entries.append(ManifestEntry(image_id, image, masks, label))
    return entries


def load_labels(path: str | Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "class_id"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header image_id,class_id")
        try:
            return {row["image_id"]: int(row["class_id"]) for row in reader}
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad class id ({exc})") from None


def image_size(path: Path) -> tuple[int, int]:
    """(width, height) from the PNG header without decoding pixels."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    png_bit_depth(head)
    return struct.unpack(">II", head[16:24])


def load_region_masks(entry: ManifestEntry) -> list[RegionMask]:
    """Decode every mask of an entry as a binary bitmap (value > 127 is set)."""
    width, height = image_size(entry.image)
    regions = []
    for mpath in entry.masks:
        gray = decode_png(Path(mpath).read_bytes(), str(mpath), channels=1)
        if gray.shape != (height, width):
            raise DataError(f"{entry.image_id}: mask {mpath} is {gray.shape[1]}x{gray.shape[0]}, "
                            f"image is {width}x{height}")
        bitmap = gray > 127
        if not bitmap.any():
            log.warning("%s: empty mask %s skipped", entry.image_id, mpath)
            continue
        regions.append(RegionMask(bitmap))
    return regions


def content_hash(entry: ManifestEntry, min_area: int, theta: float) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<Id", min_area, theta))
    h.update(struct.pack("<II", *image_size(entry.image)))
    for mpath in entry.masks:
        data = Path(mpath).read_bytes()
        h.update(struct.pack("<Q", len(data)))
        h.update(data)
    return h.digest()


# -- run-length coding ---------------------------------------------------------

def rle_encode(bitmap: np.ndarray) -> np.ndarray:
    """(start, length) runs of set pixels over the row-major flattened bitmap."""
    flat = np.concatenate([[False], bitmap.ravel(), [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return np.stack([starts, ends - starts], axis=1).astype(np.uint32)


def rle_decode(runs: np.ndarray, width: int, height: int) -> np.ndarray:
    flat = np.zeros(width * height, dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(height, width)


# -- cache ---------------------------------------------------------------------

@dataclass
class CacheEntry:
    image_id: str
    digest: bytes
    width: int
    height: int
    regions: RegionSet


def encode_cache(entries: Sequence[CacheEntry]) -> bytes:
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<II", CACHE_VERSION, len(entries))
    for e in entries:
        raw = e.image_id.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += e.digest
        buf += struct.pack("<III", e.width, e.height, len(e.regions))
        for r in e.regions.regions:
            b = r.bbox
            buf += struct.pack("<5I", b.x0, b.y0, b.w, b.h, r.area)
            runs = rle_encode(r.bitmap)
            buf += struct.pack("<I", len(runs)) + runs.astype("<u4").tobytes()
    return bytes(buf)


def decode_cache(data: bytes, source: str = "<cache>") -> dict[str, CacheEntry]:
    if data[:8] != CACHE_MAGIC:
        raise DataError(f"{source}: not a region cache")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CACHE_VERSION:
        raise DataError(f"{source}: unsupported cache version {version}")
    pos = 16
    out: dict[str, CacheEntry] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            image_id = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            digest = data[pos:pos + 32]
            pos += 32
            width, height, nreg = struct.unpack_from("<III", data, pos)
            pos += 12
            regions = []
            for _ in range(nreg):
                x0, y0, w, h, area = struct.unpack_from("<5I", data, pos)
                (nruns,) = struct.unpack_from("<I", data, pos + 20)
                pos += 24
                runs = np.frombuffer(data, dtype="<u4", count=2 * nruns, offset=pos).reshape(-1, 2)
                pos += 8 * nruns
                region = RegionMask(rle_decode(runs, width, height))
                if region.area != area or region.bbox != BBox(x0, y0, w, h):
                    raise DataError(f"{source}: region of {image_id} fails its area/bbox check")
                regions.append(region)
            out[image_id] = CacheEntry(image_id, digest, width, height, RegionSet(image_id, regions))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{source}: truncated or corrupt cache ({exc})") from None
    return out


def read_cache(path: str | Path) -> dict[str, CacheEntry]:
    return decode_cache(Path(path).read_bytes(), str(path))


def precompute_regions(entries: Sequence[ManifestEntry], cache_path: str | Path,
                       min_area: int = DEFAULT_MIN_AREA, theta: float = DEFAULT_THETA) -> tuple[dict[str, RegionSet], bool]:
    """Filter each entry's masks and write the cache.

    Returns (region sets by image id, whether the cache was already up to date).
    Entries whose digest matches the existing cache are reused without decoding.
    """
    cache_path = Path(cache_path)
    old: dict[str, CacheEntry] = {}
    if cache_path.exists():
        try:
            old = read_cache(cache_path)
        except DataError:
            old = {}
    fresh: list[CacheEntry] = []
    for entry in entries:
        try:
            digest = content_hash(entry, min_area, theta)
            prev = old.get(entry.image_id)
            if prev is not None and prev.digest == digest:
                fresh.append(prev)
                continue
            width, height = image_size(entry.image)
            kept = postprocess_regions(load_region_masks(entry), min_area, theta)
        except (OSError, ValueError, DataError) as exc:
            raise DataError(f"entry {entry.image_id}: {exc}") from exc
        fresh.append(CacheEntry(entry.image_id, digest, width, height, RegionSet(entry.image_id, kept)))
    blob = encode_cache(fresh)
    up_to_date = cache_path.exists() and cache_path.read_bytes() == blob
    if not up_to_date:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_bytes(blob)
    return {e.image_id: e.regions for e in fresh}, up_to_date


@dataclass
class Sample:
    """One training image with its filtered regions (None in simclr-only use)."""

    image_id: str
    image: np.ndarray
    regions: Optional[RegionSet] = None
    label: Optional[int] = None


def load_samples(entries: Sequence[ManifestEntry], regions: Optional[dict[str, RegionSet]] = None,
                 labels: Optional[dict[str, int]] = None) -> list[Sample]:
    out = []
    for e in entries:
        label = e.label
        if labels is not None and e.image_id in labels:
            label = labels[e.image_id]
        rs = regions.get(e.image_id) if regions is not None else None
        out.append(Sample(e.image_id, read_image(e.image), rs, label))
    return out
