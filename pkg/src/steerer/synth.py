"""Deterministic synthetic multi-scale scenes and their on-disk corpus.

A scene is a grayscale image of Gaussian intensity blobs from a few size
classes plus uniform noise; the annotation is every blob center with its
class radius. Images are 8-bit binary PGM (P5), annotations use the
``x y radius`` text format, and the manifest is tab-separated::

    # steerer-corpus v1
    # seed=<int>
    # spec_hash=<sha256 of the canonical spec JSON>
    # spec=<canonical spec JSON>
    split  image  annotation  image_sha256  annotation_sha256  interior
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from steerer.density import PointSet, format_annotations, is_interior, parse_annotations

MANIFEST_NAME = "manifest.tsv"
MANIFEST_MAGIC = "# steerer-corpus v1"
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Missing, malformed or tampered corpus files."""


@dataclass
class BlobClass:
    radius: float
    count: tuple[int, int]                 # inclusive range
    intensity: tuple[float, float] = (0.6, 1.0)
    band: Optional[tuple[float, float]] = None  # allowed center rows as fractions of H
    # std of the offset between the annotated center and the rendered bump, as a
    # fraction of the radius; models how loosely big objects get annotated
    jitter: float = 0.0


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    classes: list[BlobClass] = field(default_factory=list)
    noise: float = 0.05
    min_separation: float = 8.0
    margin: float = 4.0
    blob_width: float = 0.5  # Gaussian sigma as a fraction of the class radius
    max_tries: int = 2000

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        for c in self.classes:
            if c.radius <= 0:
                raise ValueError(f"blob radius must be positive, got {c.radius}")
            if c.count[0] < 0 or c.count[1] < c.count[0]:
                raise ValueError(f"bad count range {c.count}")
            if c.jitter < 0:
                raise ValueError(f"jitter must be non-negative, got {c.jitter}")
        if self.blob_width <= 0 or self.noise < 0:
            raise ValueError("blob_width must be positive and noise non-negative")
        if 2 * self.margin >= min(self.height, self.width):
            raise ValueError(f"margin {self.margin} leaves no room in {self.height}x{self.width}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        raw = json.loads(text)
        raw["classes"] = [BlobClass(c["radius"], tuple(c["count"]), tuple(c["intensity"]),
                                    None if c["band"] is None else tuple(c["band"]), c.get("jitter", 0.0))
                          for c in raw["classes"]]
        return cls(**raw)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def two_scale_spec(height: int = 128, width: int = 128) -> SceneSpec:
    """Small blobs (r=2, 12-28 per scene) and large blobs (r=12, 1-5 per scene).

    Large blobs are rendered up to a few pixels off their annotated center, the
    way loose annotation of big objects behaves; small ones are exact.
    """
    return SceneSpec(height, width,
                     [BlobClass(12.0, (1, 5), (0.7, 1.0), jitter=0.4), BlobClass(2.0, (12, 28), (0.7, 1.0))],
                     noise=0.05, min_separation=12.0, margin=12.0, blob_width=0.5)


def generate_scene(spec: SceneSpec, rng_seed) -> tuple[np.ndarray, PointSet]:
    """Render one scene. Returns a float image in [0, 1] and the blob centers with radii."""
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    H, W = spec.height, spec.width
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    peaks: list[float] = []
    jitters: list[float] = []
    # place large blobs first; they are the hardest to fit
    order = sorted(range(len(spec.classes)), key=lambda i: -spec.classes[i].radius)
    counts = [int(rng.integers(c.count[0], c.count[1] + 1)) for c in spec.classes]
    for ci in order:
        cls = spec.classes[ci]
        y_lo, y_hi = spec.margin, H - spec.margin
        if cls.band is not None:
            y_lo = max(y_lo, cls.band[0] * H)
            y_hi = min(y_hi, cls.band[1] * H)
        for _ in range(counts[ci]):
            for _ in range(spec.max_tries):
                x = float(rng.uniform(spec.margin, W - spec.margin))
                y = float(rng.uniform(y_lo, y_hi))
                if all(math.hypot(x - cx, y - cy) >= max(spec.min_separation, cls.radius + r)
                       for (cx, cy), r in zip(centers, radii)):
                    break
            else:
                raise ValueError(f"could not place a radius-{cls.radius} blob after {spec.max_tries} "
                                 f"tries; separation constraint unsatisfiable")
            centers.append((x, y))
            radii.append(cls.radius)
            peaks.append(float(rng.uniform(*cls.intensity)))
            jitters.append(cls.jitter)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W))
    offsets = np.zeros((len(centers), 2))
    if jitters and max(jitters) > 0:
        offsets = rng.normal(0.0, 1.0, size=(len(centers), 2)) * (np.array(jitters) * np.array(radii))[:, None]
    for ((x, y), r, a), (dx, dy) in zip(zip(centers, radii, peaks), offsets):
        x, y = x + dx, y + dy
        s = spec.blob_width * r
        img += a * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
    img += rng.uniform(-spec.noise, spec.noise, size=(H, W))
    img = np.clip(img, 0.0, 1.0)
    pts = PointSet(np.array(centers).reshape(-1, 2), np.array(radii) if radii else None)
    return img, pts


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------- PGM


def write_pgm(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM as a ``uint8`` array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read image {path}: {exc}") from exc
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise CorpusError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise CorpusError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise CorpusError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise CorpusError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# --------------------------------------------------------------------------- corpus


@dataclass
class CorpusEntry:
    split: str
    image: str
    annotation: str
    image_sha256: str = ""
    annotation_sha256: str = ""
    interior: bool = True


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry]
    seed: int
    spec: SceneSpec

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()

    def split(self, name: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == name]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scene_seed(seed: int, index: int) -> list[int]:
    return [seed, index]


def write_corpus(root, spec: SceneSpec, seed: int, counts: dict[str, int],
                 sigma0: float = 2.0) -> CorpusManifest:
    """Generate and write every split; scene ``i`` uses seed ``[seed, i]``.

    ``interior`` marks scenes whose every center keeps its full level-0 kernel
    (width ``sigma0`` cells) inside the map.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for split in SPLITS:
        for k in range(counts.get(split, 0)):
            img, pts = generate_scene(spec, scene_seed(seed, index))
            stem = f"{split}_{k:04d}"
            ipath, apath = root / "images" / f"{stem}.pgm", root / "annotations" / f"{stem}.txt"
            write_pgm(ipath, img)
            apath.write_text(format_annotations(pts), encoding="utf-8")
            interior = all(is_interior(x, y, (spec.height, spec.width), sigma0) for x, y in pts.points)
            entries.append(CorpusEntry(split, str(ipath.relative_to(root)), str(apath.relative_to(root)),
                                       _sha(ipath), _sha(apath), interior))
            index += 1
    manifest = CorpusManifest(entries, seed, spec)
    write_manifest(root, manifest)
    return manifest


def write_manifest(root, manifest: CorpusManifest) -> None:
    lines = [MANIFEST_MAGIC, f"# seed={manifest.seed}", f"# spec_hash={manifest.spec_hash}",
             f"# spec={manifest.spec.to_json()}"]
    for e in manifest.entries:
        lines.append("\t".join([e.split, e.image, e.annotation, e.image_sha256, e.annotation_sha256,
                                "1" if e.interior else "0"]))
    (Path(root) / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(root, verify: bool = True) -> CorpusManifest:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise CorpusError(f"no manifest at {mpath}")
    seed, spec, spec_hash = None, None, None
    entries = []
    for lineno, line in enumerate(mpath.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("seed="):
                seed = int(body[5:])
            elif body.startswith("spec_hash="):
                spec_hash = body[10:]
            elif body.startswith("spec="):
                try:
                    spec = SceneSpec.from_json(body[5:])
                except (ValueError, KeyError, TypeError) as exc:
                    raise CorpusError(f"{mpath}:{lineno}: malformed spec: {exc}") from None
            continue
        cols = line.split("\t")
        if len(cols) != 6 or cols[0] not in SPLITS:
            raise CorpusError(f"{mpath}:{lineno}: expected 6 tab-separated fields with a known split, "
                              f"got {line!r}")
        entries.append(CorpusEntry(cols[0], cols[1], cols[2], cols[3], cols[4], cols[5] == "1"))
    if seed is None or spec is None:
        raise CorpusError(f"{mpath}: missing seed or spec header")
    if spec_hash != spec.spec_hash():
        raise CorpusError(f"{mpath}: spec hash mismatch (header {spec_hash}, computed {spec.spec_hash()})")
    names = [e.image for e in entries]
    if len(set(names)) != len(names):
        raise CorpusError(f"{mpath}: an image is listed in more than one entry")
    manifest = CorpusManifest(entries, seed, spec)
    if verify:
        for e in entries:
            for rel, digest in ((e.image, e.image_sha256), (e.annotation, e.annotation_sha256)):
                p = root / rel
                if not p.exists():
                    raise CorpusError(f"missing corpus file {p}")
                actual = _sha(p)
                if actual != digest:
                    raise CorpusError(f"hash mismatch for {p}: manifest {digest}, file {actual}")
    return manifest


def load_scene(root, entry: CorpusEntry) -> tuple[np.ndarray, PointSet]:
    """Image as float in [0, 1] plus its annotation."""
    root = Path(root)
    img = read_pgm(root / entry.image).astype(np.float64) / 255.0
    apath = root / entry.annotation
    try:
        text = apath.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read annotation {apath}: {exc}") from exc
    return img, parse_annotations(text, str(apath))


def load_split(root, manifest: CorpusManifest, split: str) -> list[tuple[np.ndarray, PointSet]]:
    return [load_scene(root, e) for e in manifest.split(split)]


def blob_classes_in_patch(pts: PointSet, x0: float, y0: float, size: float) -> set[float]:
    """Radii of the blobs whose centers fall inside the square patch."""
    if len(pts) == 0:
        return set()
    inside = ((pts.points[:, 0] >= x0) & (pts.points[:, 0] < x0 + size)
              & (pts.points[:, 1] >= y0) & (pts.points[:, 1] < y0 + size))
    return set(pts.radii[inside].tolist()) if pts.radii is not None else set()


def scene_counts(scenes: Sequence[tuple[np.ndarray, PointSet]]) -> np.ndarray:
    return np.array([len(p) for _, p in scenes], dtype=np.float64)
