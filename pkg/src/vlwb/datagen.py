"""Procedural dataset of colored geometric shapes with templated captions.

Each image holds one shape drawn from analytic inequalities with 2x2
supersampling, placed at one of five positions on a dark or gray background,
plus clipped Gaussian pixel noise.  Every sample carries five captions built
from fixed templates, so the text side never leaves the workbench vocabulary.
"""

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

DEFAULT_CLASSES = ("circle", "square", "triangle", "cross", "ring", "bar", "diamond", "dot")

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "purple": (0.60, 0.20, 0.80),
    "cyan": (0.10, 0.85, 0.90),
}
DEFAULT_COLORS = tuple(COLORS)

# fractional (row, col) centres on the unit square
POSITIONS = {
    "upper left": (0.25, 0.25),
    "upper right": (0.25, 0.75),
    "lower left": (0.75, 0.25),
    "lower right": (0.75, 0.75),
    "center": (0.5, 0.5),
}

BACKGROUNDS = {"dark": 0.05, "gray": 0.25}

CONTEXTS = {
    "circle": "a round closed curve with all points equidistant from its center",
    "square": "a flat shape with four equal straight sides and four right angles",
    "triangle": "a flat shape with three straight sides and three sharp corners",
    "cross": "two straight strokes that meet at right angles in the middle",
    "ring": "a thin round band with an empty hole in its center",
    "bar": "a long narrow rectangle stretched out in one direction",
    "diamond": "a square turned on its corner so its points face up and down",
    "dot": "a very small filled round mark like a tiny spot",
}

CAPTION_TEMPLATES = (
    "a {color} {shape} in the {position} on a {background} background",
    "a photo of a {color} {shape}",
    "a {shape} in the {position} of the image",
    "a {color} object on a {background} background",
    "there is a {color} {shape} near the {position}",
)

PROMPT_TEMPLATES = {
    "classification": "a photo of {}",
    "existence": "is there a {} in this image?",
    "question": "what is the main object in this image?",
    "caption": "describe this image in a short sentence.",
}

_EXTRA_WORDS = "a an photo of in the on background object there is near image this what main describe short sentence shape".split()

UNK = "<unk>"


def tokenize(text):
    return re.findall(r"[a-z]+", text.lower())


class Vocabulary:
    """Word list with a reserved UNK at index 0."""

    def __init__(self, words):
        uniq = sorted(set(words) - {UNK})
        self.words = [UNK] + uniq
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def encode(self, text):
        tokens = tokenize(text) if isinstance(text, str) else list(text)
        return [self.index.get(t, 0) for t in tokens]

    def unk_count(self, text):
        return sum(1 for i in self.encode(text) if i == 0)


def build_vocabulary(classes=DEFAULT_CLASSES, colors=DEFAULT_COLORS):
    words = list(_EXTRA_WORDS)
    words += list(classes) + list(colors)
    for text in list(POSITIONS) + list(BACKGROUNDS) + list(CONTEXTS.values()):
        words += tokenize(text)
    for tpl in list(CAPTION_TEMPLATES) + list(PROMPT_TEMPLATES.values()):
        words += tokenize(re.sub(r"\{\w*\}", " ", tpl))
    return Vocabulary(words)


@dataclass
class ClassVocab:
    classes: list
    contexts: dict
    templates: dict = field(default_factory=lambda: dict(PROMPT_TEMPLATES))

    def context(self, name):
        return self.contexts[name]

    def index(self, name):
        return self.classes.index(name)


def build_class_contexts(classes=DEFAULT_CLASSES):
    unknown = [c for c in classes if c not in CONTEXTS]
    if unknown:
        raise ValueError(f"no built-in context for classes {unknown}")
    return ClassVocab(list(classes), {c: CONTEXTS[c] for c in classes})


@dataclass
class SyntheticSpec:
    classes: tuple = DEFAULT_CLASSES
    colors: tuple = DEFAULT_COLORS
    per_class: int = 100
    height: int = 32
    width: int = 32
    channels: int = 3
    noise_std: float = 0.03
    seed: int = 42

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.colors = tuple(self.colors)
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if not 0.0 <= self.noise_std <= 0.2:
            raise ValueError("noise_std must lie in [0, 0.2]")
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must be nonempty and distinct")
        unknown = [c for c in self.classes if c not in _SHAPES]
        if unknown:
            raise ValueError(f"no renderer for classes {unknown}")
        unknown = [c for c in self.colors if c not in COLORS]
        if unknown:
            raise ValueError(f"unknown colors {unknown}")
        if self.channels != 3:
            raise ValueError("only 3-channel images are rendered")

    @property
    def image_shape(self):
        return (self.height, self.width, self.channels)


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    class_index: int
    class_name: str
    captions: list
    attributes: dict
    split: str = "train"

    def __post_init__(self):
        if len(self.captions) != 5:
            raise ValueError(f"sample {self.id}: expected 5 captions, got {len(self.captions)}")


# -- rendering ----------------------------------------------------------------

def _triangle(u, v, r):
    # upward triangle with apex (0, -r) and base at v = 0.8r
    return (v <= 0.8 * r) & (v >= -r + 1.8 * np.abs(u))


_SHAPES = {
    "circle": lambda u, v, r: u * u + v * v <= r * r,
    "square": lambda u, v, r: (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r),
    "triangle": _triangle,
    "cross": lambda u, v, r: ((np.abs(u) <= 0.3 * r) & (np.abs(v) <= r))
    | ((np.abs(v) <= 0.3 * r) & (np.abs(u) <= r)),
    "ring": lambda u, v, r: (u * u + v * v <= r * r) & (u * u + v * v >= (0.55 * r) ** 2),
    "bar": lambda u, v, r: (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r),
    "diamond": lambda u, v, r: np.abs(u) + np.abs(v) <= r,
    "dot": lambda u, v, r: u * u + v * v <= (0.4 * r) ** 2,
}


def coverage(shape, height, width, cy, cx, r):
    """Fraction of each pixel covered by ``shape`` using 2x2 supersampling."""
    offs = np.array([0.25, 0.75])
    rows = (np.arange(height)[:, None] + offs[None, :]).reshape(-1)
    cols = (np.arange(width)[:, None] + offs[None, :]).reshape(-1)
    v, u = np.meshgrid(rows - cy, cols - cx, indexing="ij")
    inside = _SHAPES[shape](u, v, r).astype(np.float64)
    return inside.reshape(height, 2, width, 2).mean(axis=(1, 3))


def render(shape, color, position, background, height=32, width=32, jitter=(0.0, 0.0), radius=6.0):
    fy, fx = POSITIONS[position]
    cy, cx = fy * height + jitter[0], fx * width + jitter[1]
    alpha = coverage(shape, height, width, cy, cx, radius)[..., None]
    bg = np.full(3, BACKGROUNDS[background])
    return bg * (1.0 - alpha) + np.asarray(COLORS[color]) * alpha


def captions_for(shape, color, position, background):
    attrs = dict(shape=shape, color=color, position=position, background=background)
    return [t.format(**attrs) for t in CAPTION_TEMPLATES]


def make_sample(spec, index):
    k = len(spec.classes)
    class_index = index % k
    shape = spec.classes[class_index]
    rng = rng_for(spec.seed, "sample", index)
    color = spec.colors[rng.integers(len(spec.colors))]
    position = list(POSITIONS)[rng.integers(len(POSITIONS))]
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    scale = min(spec.height, spec.width) / 32.0
    jitter = rng.uniform(-0.5, 0.5, size=2) * scale
    radius = rng.uniform(5.0, 6.5) * scale
    img = render(shape, color, position, background, spec.height, spec.width, jitter, radius)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return ImageSample(
        id=f"{index:05d}_{shape}",
        image=img,
        class_index=class_index,
        class_name=shape,
        captions=captions_for(shape, color, position, background),
        attributes={"color": color, "position": position, "background": background},
    )


def make_samples(spec):
    """Generate all samples in memory with a stratified 80/20 train/val split."""
    k = len(spec.classes)
    n_val = spec.per_class // 5
    samples = []
    for i in range(spec.per_class * k):
        s = make_sample(spec, i)
        s.split = "val" if i // k >= spec.per_class - n_val else "train"
        samples.append(s)
    return samples


@dataclass
class Dataset:
    spec: SyntheticSpec
    samples: list

    @property
    def train(self):
        return [s for s in self.samples if s.split == "train"]

    @property
    def val(self):
        return [s for s in self.samples if s.split == "val"]

    @property
    def class_vocab(self):
        return build_class_contexts(self.spec.classes)

    @property
    def vocabulary(self):
        return build_vocabulary(self.spec.classes, self.spec.colors)


# -- file formats -------------------------------------------------------------

IMG_MAGIC = b"VLIF"


def write_imgf32(path, image):
    image = np.asarray(image)
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(IMG_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_imgf32(path):
    raw = Path(path).read_bytes()
    if raw[:4] != IMG_MAGIC:
        raise ValueError(f"{path}: not an .imgf32 file")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload has {data.size} values, header says {h * w * c}")
    return data.reshape(h, w, c).astype(np.float64)


def write_ppm(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def _spec_dict(spec):
    d = asdict(spec)
    d["classes"] = list(spec.classes)
    d["colors"] = list(spec.colors)
    return d


def generate_dataset(spec, out_dir, overwrite=False, ppm=False):
    """Write images and ``manifest.json`` under ``out_dir``; returns the Dataset.

    Images are stored as float32, so a dataset read back from disk is the
    float32 rounding of the in-memory one.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} is not empty; pass overwrite=True to replace it")
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = make_samples(spec)
    records = []
    for s in samples:
        rel = f"images/{s.id}.imgf32"
        write_imgf32(out / rel, s.image)
        if ppm:
            write_ppm(out / "images" / f"{s.id}.ppm", s.image)
        s.image = read_imgf32(out / rel)
        records.append(
            {
                "id": s.id,
                "file": rel,
                "class_index": s.class_index,
                "class_name": s.class_name,
                "captions": s.captions,
                "attributes": s.attributes,
                "split": s.split,
            }
        )
    manifest = {"spec": _spec_dict(spec), "samples": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return Dataset(spec, samples)


def load_dataset(path):
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = SyntheticSpec(**manifest["spec"])
    samples = [
        ImageSample(
            id=r["id"],
            image=read_imgf32(root / r["file"]),
            class_index=r["class_index"],
            class_name=r.get("class_name", spec.classes[r["class_index"]]),
            captions=r["captions"],
            attributes=r["attributes"],
            split=r["split"],
        )
        for r in manifest["samples"]
    ]
    return Dataset(spec, samples)


def in_memory_dataset(spec):
    """Dataset with the same float32 quantisation as one written to disk."""
    samples = make_samples(spec)
    for s in samples:
        s.image = s.image.astype("<f4").astype(np.float64)
    return Dataset(spec, samples)
