"""Synthetic compositional scenes with exact oracles.

A scene is 1-3 coloured shapes on a 3x3 grid. Everything downstream (latents,
captions, visual features, edits) is a deterministic function of the scene,
so generation and retrieval quality can be graded exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .errors import CaptionParseError, CorruptionError, EditError
from .numerics import Rng, Tensor

FORMAT_VERSION = 1

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
POSITIONS = (
    "top_left", "top", "top_right",
    "left", "center", "right",
    "bottom_left", "bottom", "bottom_right",
)
COUNT_WORDS = ("one", "two", "three")
N_CELLS = 9
N_CHANNELS = 7  # shape one-hot (3), color one-hot (3), occupancy (1)
LATENT_DIM = N_CELLS * N_CHANNELS
OCC = 6
D_VIS = 16
MAX_OBJECTS = 3

SPECIAL = ("<pad>", "<bos>", "<eos>", "<img>", "</img>", "<sep>", "<caption>", "<edit>", "<gen>")
WORDS = ("a", "the", "and", "at", "to", "object", "objects", "recolor", "move", "remove", "add")
VOCAB: tuple[str, ...] = SPECIAL + WORDS + COLORS + SHAPES + POSITIONS + COUNT_WORDS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD, BOS, EOS = TOKEN_ID["<pad>"], TOKEN_ID["<bos>"], TOKEN_ID["<eos>"]
IMG_OPEN, IMG_CLOSE, SEP = TOKEN_ID["<img>"], TOKEN_ID["</img>"], TOKEN_ID["<sep>"]
TASK_CAPTION, TASK_EDIT, TASK_GEN = TOKEN_ID["<caption>"], TOKEN_ID["<edit>"], TOKEN_ID["<gen>"]
NON_CONTENT = frozenset(TOKEN_ID[t] for t in SPECIAL)

SHORT_LIMIT = 8  # captions with fewer content tokens get expanded
LONG_LIMIT = 24  # captions with more content tokens get compressed
# canonical cell order used when a short caption has to be given positions
PLACEMENT_ORDER = (4, 0, 2, 6, 8, 1, 3, 5, 7)


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: int
    shape: str
    color: str

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or not 0 <= self.cell < N_CELLS:
            raise ValueError(f"invalid object {self}")


@dataclass(frozen=True)
class Scene:
    """Objects are kept sorted by cell, so equality ignores construction order."""

    objects: tuple[SceneObject, ...]
    id: int = field(default=0, compare=False)

    def __post_init__(self):
        objs = tuple(sorted(self.objects))
        object.__setattr__(self, "objects", objs)
        if not 1 <= len(objs) <= MAX_OBJECTS:
            raise ValueError(f"scene needs 1..{MAX_OBJECTS} objects, got {len(objs)}")
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise ValueError(f"two objects share a cell: {cells}")
        object.__setattr__(self, "id", scene_code(objs))

    @classmethod
    def of(cls, *triples) -> "Scene":
        """Scene.of(("circle", "red", 0), ...) convenience constructor."""
        return cls(tuple(SceneObject(cell, shape, color) for shape, color, cell in triples))

    def to_json(self) -> list:
        return [[o.shape, o.color, o.cell] for o in self.objects]

    @classmethod
    def from_json(cls, data) -> "Scene":
        return cls.of(*[tuple(t) for t in data])

    def cell_map(self) -> dict[int, SceneObject]:
        return {o.cell: o for o in self.objects}


def scene_code(objects: Iterable[SceneObject]) -> int:
    """Bijective base-28 code: per cell 0 = empty, 1..27 = (shape, color) pair + 1."""
    digits = [0] * N_CELLS
    for o in objects:
        digits[o.cell] = 1 + SHAPES.index(o.shape) * 3 + COLORS.index(o.color)
    code = 0
    for d in reversed(digits):
        code = code * 28 + d
    return code


def make_scene(rng: Rng) -> Scene:
    n = rng.integers(1, MAX_OBJECTS + 1)
    cells = rng.permutation(N_CELLS)[:n]
    objs = []
    for cell in cells:
        shape = SHAPES[rng.integers(0, 3)]
        color = COLORS[rng.integers(0, 3)]
        objs.append(SceneObject(int(cell), shape, color))
    return Scene(tuple(objs))


def enumerate_scenes(n_objects: int) -> Iterator[Scene]:
    attrs = list(itertools.product(SHAPES, COLORS))
    for cells in itertools.combinations(range(N_CELLS), n_objects):
        for combo in itertools.product(attrs, repeat=n_objects):
            yield Scene(tuple(SceneObject(c, s, col) for c, (s, col) in zip(cells, combo)))


# latents -------------------------------------------------------------------

def cell_code(obj: SceneObject | None) -> np.ndarray:
    code = np.zeros(N_CHANNELS, dtype=np.float32)
    if obj is not None:
        code[SHAPES.index(obj.shape)] = 1.0
        code[3 + COLORS.index(obj.color)] = 1.0
        code[OCC] = 1.0
    return code


def render_latent(scene: Scene) -> np.ndarray:
    grid = np.zeros((N_CELLS, N_CHANNELS), dtype=np.float32)
    for o in scene.objects:
        grid[o.cell] = cell_code(o)
    return grid.reshape(LATENT_DIM)


@dataclass
class Detection:
    scene: Scene | None
    objects: tuple[SceneObject, ...]
    occupancy_conf: np.ndarray
    shape_conf: np.ndarray
    color_conf: np.ndarray

    @property
    def count(self) -> int:
        return len(self.objects)


def classify_latent(z) -> Detection:
    """Threshold occupancy at 0.5 and argmax the shape/color channels of occupied cells.

    Works on any length-63 vector. ``scene`` is None when the detection is not a
    valid Scene (no objects, or more than three).
    """
    grid = np.asarray(z, dtype=np.float64).reshape(N_CELLS, N_CHANNELS)
    objs = []
    shape_conf = np.zeros(N_CELLS)
    color_conf = np.zeros(N_CELLS)
    for cell in range(N_CELLS):
        if grid[cell, OCC] > 0.5:
            s = int(np.argmax(grid[cell, 0:3]))
            c = int(np.argmax(grid[cell, 3:6]))
            shape_conf[cell] = grid[cell, s] - np.sort(grid[cell, 0:3])[-2]
            color_conf[cell] = grid[cell, 3 + c] - np.sort(grid[cell, 3:6])[-2]
            objs.append(SceneObject(cell, SHAPES[s], COLORS[c]))
    scene = Scene(tuple(objs)) if 1 <= len(objs) <= MAX_OBJECTS else None
    return Detection(scene, tuple(objs), np.abs(grid[:, OCC] - 0.5), shape_conf, color_conf)


# visual features ------------------------------------------------------------

class Featurizer:
    """Stand-in visual encoder: one fixed seeded affine map per-cell 7-channel code -> D_VIS."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = Rng(seed).child("featurizer")
        self.weight = rng.normal((N_CHANNELS, D_VIS)).numpy()
        self.empty = rng.normal((D_VIS,)).numpy()

    def __call__(self, scene: Scene) -> Tensor:
        codes = render_latent(scene).reshape(N_CELLS, N_CHANNELS)
        feats = codes @ self.weight + self.empty
        return torch.from_numpy(feats.astype(np.float32))


def scene_features(scene: Scene, seed: int = 0) -> Tensor:
    return _featurizer(seed)(scene)


_FEATURIZERS: dict[int, Featurizer] = {}


def _featurizer(seed: int) -> Featurizer:
    if seed not in _FEATURIZERS:
        _FEATURIZERS[seed] = Featurizer(seed)
    return _FEATURIZERS[seed]


# captions -------------------------------------------------------------------

def encode(words: Sequence[str]) -> list[int]:
    return [TOKEN_ID[w] for w in words]


def decode(ids: Sequence[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def content_length(ids: Sequence[int]) -> int:
    return sum(1 for i in ids if i not in NON_CONTENT)


def _clause(o: SceneObject, with_position: bool) -> list[str]:
    words = ["a", o.color, o.shape]
    if with_position:
        words += ["at", POSITIONS[o.cell]]
    return words


def caption_of(scene: Scene, style: str = "long") -> list[int]:
    """Token ids, objects in cell order. short: 'a red circle and ...';
    long: 'two objects a red circle at top_left and ...'."""
    if style not in ("short", "long"):
        raise ValueError(f"unknown caption style {style!r}")
    long = style == "long"
    words: list[str] = []
    if long:
        n = len(scene.objects)
        words += [COUNT_WORDS[n - 1], "object" if n == 1 else "objects"]
    for i, o in enumerate(scene.objects):
        if i:
            words.append("and")
        words += _clause(o, long)
    return encode(words)


@dataclass(frozen=True)
class ParsedCaption:
    """What a caption states: (shape, color, cell-or-None) per distinct clause."""

    objects: tuple[tuple[str, str, int | None], ...]
    count: int | None
    style: str

    def scene(self) -> Scene:
        if any(cell is None for _, _, cell in self.objects):
            raise CaptionParseError("caption has no positions; scene is underdetermined")
        return Scene.of(*self.objects)

    def consistent_with(self, scene: Scene) -> bool:
        if self.count is not None and self.count != len(scene.objects):
            return False
        if len(self.objects) != len(scene.objects):
            return False
        remaining = list(scene.objects)
        for shape, color, cell in self.objects:
            for o in remaining:
                if o.shape == shape and o.color == color and (cell is None or o.cell == cell):
                    remaining.remove(o)
                    break
            else:
                return False
        return True


def parse_caption(ids: Sequence[int]) -> ParsedCaption:
    """Inverse of caption_of. Special tokens are skipped; repeated positioned clauses collapse."""
    words = [VOCAB[i] if 0 <= i < len(VOCAB) else None for i in ids]
    words = [w for w in words if w not in SPECIAL]
    if any(w is None for w in words):
        raise CaptionParseError(f"token id out of vocabulary in {list(ids)}")
    pos = 0
    count = None
    if words and words[0] in COUNT_WORDS:
        count = COUNT_WORDS.index(words[0]) + 1
        if len(words) < 2 or words[1] not in ("object", "objects"):
            raise CaptionParseError(f"count word not followed by 'object(s)': {words[:3]}")
        pos = 2
    clauses: list[tuple[str, str, int | None]] = []
    has_pos = None
    while True:
        if words[pos:pos + 1] != ["a"] or len(words) < pos + 3:
            raise CaptionParseError(f"expected 'a <color> <shape>' at word {pos} of {words}")
        color, shape = words[pos + 1], words[pos + 2]
        if color not in COLORS or shape not in SHAPES:
            raise CaptionParseError(f"bad clause {words[pos:pos + 3]}")
        pos += 3
        cell = None
        if words[pos:pos + 1] == ["at"]:
            if pos + 1 >= len(words) or words[pos + 1] not in POSITIONS:
                raise CaptionParseError(f"'at' without a position at word {pos}")
            cell = POSITIONS.index(words[pos + 1])
            pos += 2
        if has_pos is None:
            has_pos = cell is not None
        elif has_pos != (cell is not None):
            raise CaptionParseError("clauses mix positioned and unpositioned styles")
        if cell is None or (shape, color, cell) not in clauses:
            clauses.append((shape, color, cell))
        if pos == len(words):
            break
        if words[pos] != "and":
            raise CaptionParseError(f"expected 'and' at word {pos}, got {words[pos]!r}")
        pos += 1
    if not 1 <= len(clauses) <= MAX_OBJECTS:
        raise CaptionParseError(f"caption describes {len(clauses)} objects")
    cells = [c for _, _, c in clauses if c is not None]
    if len(set(cells)) != len(cells):
        raise CaptionParseError("two clauses place objects in the same cell")
    if count is not None and count != len(clauses):
        raise CaptionParseError(f"count word says {count}, clauses say {len(clauses)}")
    return ParsedCaption(tuple(clauses), count, "long" if has_pos else "short")


def _place(parsed: ParsedCaption, scene: Scene | None) -> Scene:
    if parsed.objects[0][2] is not None:
        return parsed.scene()
    if scene is not None and parsed.consistent_with(scene):
        return scene
    free = iter(PLACEMENT_ORDER)
    return Scene.of(*[(shape, color, next(free)) for shape, color, _ in parsed.objects])


def rewrite_caption(ids: Sequence[int], scene: Scene | None = None) -> list[int]:
    """Normalise caption length: expand short ones, compress overlong ones.

    Expanding a caption without positions needs cells; they come from ``scene``
    when it matches the caption, otherwise from a fixed placement order.
    Applied until the length lands in [SHORT_LIMIT, LONG_LIMIT] or the caption
    is already in long style, so the result is a fixed point.
    """
    resolved = _place(parse_caption(ids), scene)
    out = list(ids)
    for _ in range(3):
        n = content_length(out)
        if n < SHORT_LIMIT:
            new = caption_of(resolved, "long")
        elif n > LONG_LIMIT:
            new = caption_of(resolved, "short")
        else:
            new = out
        if new == out:
            break
        out = new
    return [i for i in out if i not in NON_CONTENT]


# edits ----------------------------------------------------------------------

@dataclass(frozen=True)
class Edit:
    op: str  # recolor | move | remove | add
    k: int | None = None
    color: str | None = None
    cell: int | None = None
    obj: SceneObject | None = None

    def to_json(self) -> dict:
        d = {"op": self.op}
        if self.k is not None:
            d["k"] = self.k
        if self.color is not None:
            d["color"] = self.color
        if self.cell is not None:
            d["cell"] = self.cell
        if self.obj is not None:
            d["obj"] = [self.obj.shape, self.obj.color, self.obj.cell]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Edit":
        obj = d.get("obj")
        return cls(d["op"], d.get("k"), d.get("color"), d.get("cell"),
                   SceneObject(obj[2], obj[0], obj[1]) if obj else None)


def apply_edit(scene: Scene, edit: Edit) -> Scene:
    objs = list(scene.objects)
    occupied = {o.cell for o in objs}
    if edit.op in ("recolor", "move", "remove"):
        if edit.k is None or not 0 <= edit.k < len(objs):
            raise EditError(f"object index {edit.k} out of range for {len(objs)} objects")
        target = objs[edit.k]
    if edit.op == "recolor":
        if edit.color not in COLORS:
            raise EditError(f"unknown color {edit.color!r}")
        objs[edit.k] = SceneObject(target.cell, target.shape, edit.color)
    elif edit.op == "move":
        if edit.cell is None or not 0 <= edit.cell < N_CELLS:
            raise EditError(f"bad target cell {edit.cell}")
        if edit.cell in occupied and edit.cell != target.cell:
            raise EditError(f"target cell {edit.cell} is occupied")
        objs[edit.k] = SceneObject(edit.cell, target.shape, target.color)
    elif edit.op == "remove":
        if len(objs) == 1:
            raise EditError("cannot remove the only object of a scene")
        del objs[edit.k]
    elif edit.op == "add":
        if edit.obj is None:
            raise EditError("add needs an object")
        if edit.obj.cell in occupied:
            raise EditError(f"target cell {edit.obj.cell} is occupied")
        if len(objs) == MAX_OBJECTS:
            raise EditError(f"scene already has {MAX_OBJECTS} objects")
        objs.append(edit.obj)
    else:
        raise EditError(f"unknown edit op {edit.op!r}")
    return Scene(tuple(objs))


def edit_instruction(scene: Scene, edit: Edit) -> list[int]:
    """Objects are referred to by position, which is unambiguous."""
    if edit.op == "add":
        o = edit.obj
        words = ["add", "a", o.color, o.shape, "at", POSITIONS[o.cell]]
    else:
        where = POSITIONS[scene.objects[edit.k].cell]
        words = [edit.op, "the", "object", "at", where]
        if edit.op == "recolor":
            words += ["to", edit.color]
        elif edit.op == "move":
            words += ["to", POSITIONS[edit.cell]]
    return encode(words)


def random_edit(scene: Scene, rng: Rng) -> Edit:
    n = len(scene.objects)
    free = [c for c in range(N_CELLS) if c not in {o.cell for o in scene.objects}]
    ops = ["recolor", "move"]
    if n > 1:
        ops.append("remove")
    if n < MAX_OBJECTS:
        ops.append("add")
    op = ops[rng.integers(0, len(ops))]
    k = rng.integers(0, n)
    if op == "recolor":
        others = [c for c in COLORS if c != scene.objects[k].color]
        return Edit("recolor", k=k, color=others[rng.integers(0, 2)])
    if op == "move":
        return Edit("move", k=k, cell=free[rng.integers(0, len(free))])
    if op == "remove":
        return Edit("remove", k=k)
    obj = SceneObject(free[rng.integers(0, len(free))], SHAPES[rng.integers(0, 3)], COLORS[rng.integers(0, 3)])
    return Edit("add", obj=obj)


# corpus ---------------------------------------------------------------------

@dataclass
class Record:
    scene: Scene
    edit: Edit | None = None

    @property
    def caption_short(self) -> list[int]:
        return caption_of(self.scene, "short")

    @property
    def caption_long(self) -> list[int]:
        return caption_of(self.scene, "long")

    @property
    def edited(self) -> Scene | None:
        return None if self.edit is None else apply_edit(self.scene, self.edit)


def make_corpus(rng: Rng, n: int, exclude: set[int] | None = None, distinct: bool = False,
                edit_prob: float = 0.5) -> list[Record]:
    """Sample n records. ``exclude`` holds scene ids to reject (held-out splits);
    ``distinct`` also rejects repeats within the split."""
    seen = set(exclude or ())
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * max(n, 1) + 10_000:
            raise RuntimeError(f"could not draw {n} admissible scenes")
        scene = make_scene(rng)
        if scene.id in seen:
            continue
        if distinct:
            seen.add(scene.id)
        edit = random_edit(scene, rng) if rng.random() < edit_prob else None
        out.append(Record(scene, edit))
    return out


def latent_hex(z: np.ndarray) -> str:
    return np.asarray(z, dtype="<f4").tobytes().hex()


def latent_from_hex(s: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f4").copy()


def header(featurizer_seed: int) -> dict:
    return {"format_version": FORMAT_VERSION, "vocab": list(VOCAB), "featurizer_seed": featurizer_seed}


def write_corpus(path: str | Path, records: Sequence[Record], featurizer_seed: int = 0) -> str:
    """Write JSON lines (header first) and return the sha256 of the file bytes."""
    lines = [json.dumps(header(featurizer_seed), sort_keys=True)]
    for i, r in enumerate(records):
        rec = {
            "id": r.scene.id,
            "scene": r.scene.to_json(),
            "caption_short": r.caption_short,
            "caption_long": r.caption_long,
            "latent": latent_hex(render_latent(r.scene)),
        }
        if r.edit is not None:
            rec["edit"] = r.edit.to_json()
        lines.append(json.dumps(rec, sort_keys=True))
    data = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_corpus(path: str | Path) -> tuple[dict, list[Record]]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise CorruptionError(f"{path}: empty corpus file (no header)")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: bad header: {exc}") from exc
    if head.get("format_version") != FORMAT_VERSION or head.get("vocab") != list(VOCAB):
        raise CorruptionError(f"{path}: incompatible corpus header")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            scene = Scene.from_json(d["scene"])
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise CorruptionError(f"{path}:{n}: {exc}") from exc
        if d["id"] != scene.id:
            raise CorruptionError(f"{path}:{n}: id does not match scene")
        edit = Edit.from_json(d["edit"]) if "edit" in d else None
        records.append(Record(scene, edit))
    return head, records


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

