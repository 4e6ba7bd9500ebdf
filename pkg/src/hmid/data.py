"""Procedural image-caption corpus with a three-level caption hierarchy.

Scenes are 1-3 flat-colour shapes on a 4x4 grid. Every scene carries a
``specific`` caption (a full description), a ``mid`` caption (shape count
only) and a ``generic`` caption from a four-string pool, so each level is
entailed by the one above it by construction.

Specific captions use a compact code of four bytes per shape (colour
initial, kind initial, column letter, row digit) joined by spaces, so
``"rca1 ytc2"`` reads "red circle at a1, yellow triangle at c2". Three
shapes fit in 14 bytes, which keeps every caption inside a 16-token window.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID = 4
COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "pink": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "gray": (0.4, 0.4, 0.4),
    "silver": (0.6, 0.6, 0.6),
}
KINDS = ("circle", "square", "triangle")
# single-letter codes; black is "k" so that it differs from blue
COLOR_CODES = {"red": "r", "green": "g", "blue": "b", "yellow": "y",
               "cyan": "c", "pink": "p", "white": "w", "black": "k"}
KIND_CODES = {"circle": "c", "square": "s", "triangle": "t"}
COUNT_PROBS = (0.1, 0.4, 0.5)
MID_CAPTIONS = {1: "1 shape", 2: "2 shapes", 3: "3 shapes"}
GENERIC_POOL = ("an image", "a picture", "a drawing", "a scene")

PAD_ID = 0
EOS_ID = 3
VOCAB_SIZE = 256


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cell: int  # row-major index on the grid

    @property
    def cell_name(self) -> str:
        row, col = divmod(self.cell, GRID)
        return f"{'abcd'[col]}{row + 1}"

    @property
    def code(self) -> str:
        return COLOR_CODES[self.color] + KIND_CODES[self.kind] + self.cell_name


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    background: str = "gray"
    seed: int = 0

    def __post_init__(self):
        if len(self.shapes) > 3:
            raise ValueError("a scene holds at most 3 shapes")
        cells = [s.cell for s in self.shapes]
        if len(set(cells)) != len(cells):
            raise ValueError("two shapes share a cell")


@dataclass(frozen=True)
class CaptionLevels:
    specific: str
    mid: str
    generic: str


def describe(spec: SceneSpec, generic_index: int = 0) -> CaptionLevels:
    shapes = sorted(spec.shapes, key=lambda s: s.cell)
    specific = " ".join(s.code for s in shapes)
    return CaptionLevels(specific, MID_CAPTIONS[len(shapes)],
                         GENERIC_POOL[generic_index % len(GENERIC_POOL)])


def parse_specific(caption: str) -> list[Shape]:
    """Inverse of the specific-caption grammar."""
    colors = {v: k for k, v in COLOR_CODES.items()}
    kinds = {v: k for k, v in KIND_CODES.items()}
    shapes = []
    for word in caption.split():
        if len(word) != 4 or word[0] not in colors or word[1] not in kinds \
                or word[2] not in "abcd" or word[3] not in "1234":
            raise ValueError(f"bad shape code {word!r}")
        cell = (int(word[3]) - 1) * GRID + "abcd".index(word[2])
        shapes.append(Shape(kinds[word[1]], colors[word[0]], cell))
    return shapes


def _shape_mask(kind: str, cell: int) -> np.ndarray:
    m = max(1, cell // 8)
    yy, xx = np.mgrid[0:cell, 0:cell]
    inner = (yy >= m) & (yy < cell - m) & (xx >= m) & (xx < cell - m)
    if kind == "square":
        return inner
    centre = (cell - 1) / 2.0
    if kind == "circle":
        r = cell / 2.0 - m
        return inner & ((yy - centre) ** 2 + (xx - centre) ** 2 <= r * r)
    if kind == "triangle":
        height = cell - 2 * m
        half = (yy - m + 1) / height * (cell / 2.0 - m)
        return inner & (np.abs(xx - centre) <= half)
    raise ValueError(f"unknown shape kind {kind!r}")


def render(spec: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Rasterize a scene to ``[H, W, 3]`` float values in [0, 1]."""
    if image_size % GRID:
        raise ValueError(f"image size must be a multiple of {GRID}")
    cell = image_size // GRID
    img = np.empty((image_size, image_size, 3), dtype=np.float32)
    img[:] = BACKGROUNDS[spec.background]
    for shape in spec.shapes:
        row, col = divmod(shape.cell, GRID)
        block = img[row * cell:(row + 1) * cell, col * cell:(col + 1) * cell]
        block[_shape_mask(shape.kind, cell)] = COLORS[shape.color]
    return img


def sample_scene(rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    count = int(rng.choice(3, p=COUNT_PROBS)) + 1
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    colors = list(COLORS)
    shapes = tuple(
        Shape(KINDS[rng.integers(len(KINDS))], colors[rng.integers(len(colors))], int(cell))
        for cell in cells)
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    return SceneSpec(shapes, background, seed)


def _hash_int(seed: int, index: int, salt: str) -> int:
    digest = hashlib.sha256(f"{salt}:{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def split_of(seed: int, index: int) -> str:
    return "val" if _hash_int(seed, index, "split") % 10 == 0 else "train"


# -- tokenization --------------------------------------------------------------

def tokenize(text: str, max_len: int) -> np.ndarray:
    """Byte-level ids followed by EOS and zero padding to ``max_len``."""
    raw = text.encode("utf-8")
    if len(raw) + 1 > max_len:
        raise TokenizerError(f"caption of {len(raw)} bytes exceeds max_text_len={max_len}")
    if PAD_ID in raw or EOS_ID in raw:
        raise TokenizerError("caption contains reserved control bytes")
    ids = np.zeros(max_len, dtype=np.int64)
    ids[:len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    ids[len(raw)] = EOS_ID
    return ids


def tokenize_batch(texts, max_len: int) -> np.ndarray:
    return np.stack([tokenize(t, max_len) for t in texts]) if len(texts) else \
        np.zeros((0, max_len), dtype=np.int64)


# -- corpus ------------------------------------------------------------------

@dataclass
class Sample:
    id: int
    spec: SceneSpec
    captions: CaptionLevels
    split: str


@dataclass
class Corpus:
    """An in-memory corpus; ``images`` is ``[N, H, W, 3]`` float32."""

    images: np.ndarray
    specific: list[str]
    mid: list[str]
    generic: list[str]
    split: np.ndarray
    ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.specific)

    def subset(self, which: str) -> "Corpus":
        keep = np.flatnonzero(self.split == which)
        return Corpus(self.images[keep], [self.specific[i] for i in keep],
                      [self.mid[i] for i in keep], [self.generic[i] for i in keep],
                      self.split[keep], [self.ids[i] for i in keep] if self.ids else [])


def generate_samples(n: int, seed: int) -> list[Sample]:
    """Draw ``n`` scenes with pairwise distinct specific captions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    samples: list[Sample] = []
    while len(samples) < n:
        i = len(samples)
        spec = sample_scene(rng, seed)
        caps = describe(spec, _hash_int(seed, i, "generic"))
        if caps.specific in seen:
            continue
        seen.add(caps.specific)
        samples.append(Sample(i, spec, caps, split_of(seed, i)))
    return samples


def build_corpus(n: int, seed: int, image_size: int = 32) -> Corpus:
    samples = generate_samples(n, seed)
    images = np.stack([render(s.spec, image_size) for s in samples])
    return Corpus(images, [s.captions.specific for s in samples], [s.captions.mid for s in samples],
                  [s.captions.generic for s in samples],
                  np.array([s.split for s in samples]), [s.id for s in samples])


def write_ppm(path, image: np.ndarray) -> None:
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def generate_corpus(n: int, seed: int, image_size: int, out_dir) -> Path:
    """Write ``n`` PPM images plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_samples(n, seed)
    lines = []
    for s in samples:
        rel = f"images/{s.id:05d}.ppm"
        write_ppm(out / rel, render(s.spec, image_size))
        lines.append(json.dumps({
            "id": s.id, "image_path": rel,
            "caption_specific": s.captions.specific, "caption_mid": s.captions.mid,
            "caption_generic": s.captions.generic, "split": s.split,
        }, sort_keys=True))
    tmp = out / "manifest.jsonl.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, out / "manifest.jsonl")
    return out / "manifest.jsonl"


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: manifest not found")
    records = [json.loads(line) for line in manifest.read_text(encoding="utf-8").splitlines()
               if line.strip()]
    images = np.stack([read_ppm(root / r["image_path"]) for r in records])
    return Corpus(images, [r["caption_specific"] for r in records],
                  [r["caption_mid"] for r in records], [r["caption_generic"] for r in records],
                  np.array([r["split"] for r in records]), [r["id"] for r in records])
