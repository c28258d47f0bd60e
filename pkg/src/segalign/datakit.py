"""Synthetic compositional-shapes dataset with per-object captions.

Every scene places 1-4 colored shapes on a 3x3 grid. The caption has one
sentence per object following the fixed grammar
``A {color} {shape} in the {cell}.`` so the vocabulary stays closed and
each sentence can be parsed back to its scene triple.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .segmentation import Vocabulary

SHAPES = ("circle", "square", "triangle")

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

CELL_NAMES = (
    "top left", "top center", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom center", "bottom right",
)

BACKGROUND = 0.1
DEFAULT_IMAGE_SIZE = 24  # 3x3 grid of 8-pixel cells


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # 0..8, row-major on the 3x3 grid

    def caption(self) -> str:
        return f"A {self.color} {self.shape} in the {CELL_NAMES[self.cell]}."


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 4:
            raise InvalidSpecError(f"need 1-4 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise InvalidSpecError("two objects share a grid cell")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or not 0 <= o.cell < 9:
                raise InvalidSpecError(f"bad object {o}")


@dataclass(frozen=True)
class DatasetRecord:
    scene: SceneSpec
    caption_long: str
    caption_short: str
    image_path: str | None = None


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    short_prompt: str
    scene_win: SceneSpec
    scene_lose: SceneSpec
    corruption: str


def build_vocabulary() -> Vocabulary:
    """Closed vocabulary covering every caption the grammar can emit."""
    words = {"a", "in", "the"}
    words |= set(COLORS)
    words |= set(SHAPES)
    for name in CELL_NAMES:
        words |= set(name.split())
    return Vocabulary.from_words(words)


def render_scene(spec: SceneSpec, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Deterministic H x W x 3 float raster in [0, 1]."""
    spec.validate()
    if size % 3 != 0:
        raise InvalidSpecError(f"image size {size} not divisible by the 3x3 grid")
    cell = size // 3
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
    yy, xx = np.mgrid[0:cell, 0:cell].astype(np.float64) + 0.5
    c = cell / 2.0
    r = cell * 0.38
    masks = {
        "circle": (yy - c) ** 2 + (xx - c) ** 2 <= r**2,
        "square": (np.abs(yy - c) <= r) & (np.abs(xx - c) <= r),
        "triangle": (yy - (c - r) >= 2 * np.abs(xx - c)) & (yy <= c + r),
    }
    for obj in spec.objects:
        row, col = divmod(obj.cell, 3)
        patch = img[row * cell : (row + 1) * cell, col * cell : (col + 1) * cell]
        patch[masks[obj.shape]] = COLORS[obj.color]
    return img


def caption_for(spec: SceneSpec) -> str:
    return " ".join(o.caption() for o in spec.objects)


_SENTENCE_RE = re.compile(
    r"a (?P<color>\w+) (?P<shape>\w+) in the (?P<cell>[\w ]+)"
)


def parse_caption(caption: str) -> list[SceneObject]:
    """Invert the caption grammar back to scene triples (alignment oracle)."""
    objects = []
    for sentence in caption.lower().split("."):
        sentence = sentence.strip()
        if not sentence:
            continue
        m = _SENTENCE_RE.fullmatch(sentence)
        if m is None:
            raise InvalidSpecError(f"unparseable caption sentence: {sentence!r}")
        cell = CELL_NAMES.index(m.group("cell"))
        objects.append(
            SceneObject(shape=m.group("shape"), color=m.group("color"), cell=cell)
        )
    return objects


def scene_satisfies(spec: SceneSpec, caption: str) -> bool:
    """True iff every caption sentence names an object present in the scene."""
    present = set(spec.objects)
    return all(obj in present for obj in parse_caption(caption))


def random_scene(rng: random.Random, n_objects: int | None = None) -> SceneSpec:
    n = n_objects if n_objects is not None else rng.randint(1, 4)
    cells = rng.sample(range(9), n)
    objects = tuple(
        SceneObject(
            shape=rng.choice(SHAPES), color=rng.choice(list(COLORS)), cell=cells[i]
        )
        for i in range(n)
    )
    return SceneSpec(objects=objects, seed=rng.randrange(2**31))


def generate_dataset(
    n: int,
    seed: int,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    min_objects: int = 1,
) -> tuple[list[DatasetRecord], list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic train/val/test record lists with disjoint splits."""
    if n < 1:
        raise ValueError("need n >= 1")
    records = []
    for i in range(n):
        rng = random.Random(f"{seed}:{i}")
        n_obj = rng.randint(min_objects, 4)
        spec = random_scene(rng, n_obj)
        records.append(
            DatasetRecord(
                scene=spec,
                caption_long=caption_for(spec),
                caption_short=spec.objects[0].caption(),
            )
        )
    n_train = int(round(n * split_ratios[0]))
    n_val = int(round(n * split_ratios[1]))
    return records[:n_train], records[n_train : n_train + n_val], records[n_train + n_val :]


def _corrupt_drop(scene: SceneSpec, rng: random.Random) -> SceneSpec:
    # Drop the first object, the one the short caption describes, so the
    # loser violates both the long and the short prompt.
    keep = list(scene.objects)
    keep.pop(0)
    return replace(scene, objects=tuple(keep))


def _corrupt_swap(scene: SceneSpec, rng: random.Random) -> SceneSpec:
    objs = list(scene.objects)
    # Corrupt the first object so the loser also violates the short caption.
    i = 0
    obj = objs[i]
    field = rng.choice(["shape", "color", "cell"])
    if field == "shape":
        obj = replace(obj, shape=rng.choice([s for s in SHAPES if s != obj.shape]))
    elif field == "color":
        obj = replace(obj, color=rng.choice([c for c in COLORS if c != obj.color]))
    else:
        taken = {o.cell for o in objs}
        obj = replace(obj, cell=rng.choice([c for c in range(9) if c not in taken]))
    objs[i] = obj
    return replace(scene, objects=tuple(objs))


def derive_preference_pairs(
    records: list[DatasetRecord],
    seed: int,
    corruption: str = "segment-drop",
) -> tuple[list[PreferencePair], int]:
    """Winner = faithful scene, loser = corrupted scene.

    Returns the pairs plus a count of records skipped because segment-drop
    needs at least two objects.
    """
    if corruption not in ("segment-drop", "attribute-swap"):
        raise ValueError(f"unknown corruption {corruption!r}")
    rng = random.Random(f"pairs:{seed}")
    pairs, skipped = [], 0
    for rec in records:
        if corruption == "segment-drop":
            if len(rec.scene.objects) < 2:
                skipped += 1
                continue
            lose = _corrupt_drop(rec.scene, rng)
        else:
            lose = _corrupt_swap(rec.scene, rng)
        pairs.append(
            PreferencePair(
                prompt=rec.caption_long,
                short_prompt=rec.caption_short,
                scene_win=rec.scene,
                scene_lose=lose,
                corruption=corruption,
            )
        )
    return pairs, skipped


# ---------------------------------------------------------------------------
# Manifest / image file IO


def _scene_to_json(scene: SceneSpec) -> dict:
    return {
        "seed": scene.seed,
        "objects": [[o.shape, o.color, o.cell] for o in scene.objects],
    }


def _scene_from_json(obj: dict) -> SceneSpec:
    return SceneSpec(
        objects=tuple(SceneObject(s, c, cell) for s, c, cell in obj["objects"]),
        seed=obj.get("seed", 0),
    )


def save_image(img: np.ndarray, directory: Path) -> Path:
    """Write a content-addressed PNG and return its path."""
    from PIL import Image

    data = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    digest = hashlib.sha1(data.tobytes()).hexdigest()[:16]
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{digest}.png"
    if not path.exists():
        Image.fromarray(data).save(path)
    return path


def load_image(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_manifest(records: list[DatasetRecord], path: Path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {
                        "image": rec.image_path,
                        "caption_long": rec.caption_long,
                        "caption_short": rec.caption_short,
                        "scene": _scene_to_json(rec.scene),
                    }
                )
                + "\n"
            )


def read_manifest(path: Path) -> list[DatasetRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        records.append(
            DatasetRecord(
                scene=_scene_from_json(obj["scene"]),
                caption_long=obj["caption_long"],
                caption_short=obj["caption_short"],
                image_path=obj["image"],
            )
        )
    return records


def write_pairs(pairs: list[PreferencePair], path: Path) -> None:
    with open(path, "w") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "prompt": p.prompt,
                        "short_prompt": p.short_prompt,
                        "scene_win": _scene_to_json(p.scene_win),
                        "scene_lose": _scene_to_json(p.scene_lose),
                        "corruption": p.corruption,
                    }
                )
                + "\n"
            )


def read_pairs(path: Path) -> list[PreferencePair]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        pairs.append(
            PreferencePair(
                prompt=obj["prompt"],
                short_prompt=obj["short_prompt"],
                scene_win=_scene_from_json(obj["scene_win"]),
                scene_lose=_scene_from_json(obj["scene_lose"]),
                corruption=obj["corruption"],
            )
        )
    return pairs
