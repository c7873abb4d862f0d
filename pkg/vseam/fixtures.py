"""The colour-probe toy model and the synthetic benchmark built against it.

The colour-probe model answers "Is the <noun> red?" by comparing how many
red and blue patches the image holds. One head (layer 1, head 2) carries
that evidence to the answer position; another (layer 3, head 3) reads green
distractor patches and pushes the answer towards "no". Every other head
writes nothing, so masking it changes no logit.
"""

import dataclasses
import pathlib
import typing

import numpy as np
import torch

from vseam import clients, dataset, editing, images, utils
from vseam import model as _model

SIGNAL_HEAD = (1, 2)
NOISE_HEAD = (3, 3)

IMAGE_SIZE = 32
NOUNS = ("object", "block", "tile", "shirt")

RED = clients.COLOR_RGB["red"]
BLUE = clients.COLOR_RGB["blue"]
GRAY = clients.COLOR_RGB["gray"]
GREEN = clients.COLOR_RGB["green"]

# Residual dimensions the probe uses.
_BASE_POS, _BASE_NEG = 2, 5
_EVIDENCE_POS, _EVIDENCE_NEG = 0, 1
_ANSWER_YES, _ANSWER_NO = 3, 4
_DISTRACTOR_POS, _DISTRACTOR_NEG = 6, 7


def _evidence(levels: typing.Tuple[int, int, int]) -> int:
    r, _, b = levels
    if max(r, b) < 2 or r == b:
        return 0
    return 1 if r > b else -1


def _is_distractor(levels: typing.Tuple[int, int, int]) -> bool:
    r, g, b = levels
    return g >= 3 and r <= 1 and b <= 1


def build_color_probe_vlm(
    alpha: float = 4.0, beta: float = 8.0, kappa: float = 1.0
) -> _model.ModelHandle:
    config = _model.ToyVLMConfig()
    backend = _model.ToyVLM(config)
    vocabulary = _model.Vocabulary.default(config.vocab_size)
    yes, no = vocabulary.tokens.index("yes"), vocabulary.tokens.index("no")

    with torch.no_grad():
        for block in backend.blocks:
            for linear in (block.mlp_in, block.mlp_out):
                linear.weight.zero_()
                linear.bias.zero_()

        backend.embed[:, _BASE_POS] = 1.0
        backend.embed[:, _BASE_NEG] = -1.0
        for token in range(config.vocab_size):
            levels = images.token_levels(token)
            row = backend.image_embed[token]
            row[_BASE_POS], row[_BASE_NEG] = 1.0, -1.0
            s = _evidence(levels)
            row[_EVIDENCE_POS], row[_EVIDENCE_NEG] = s, -s
            if _is_distractor(levels):
                row[_DISTRACTOR_POS], row[_DISTRACTOR_NEG] = 1.0, -1.0

        layer, head = SIGNAL_HEAD
        attn = backend.blocks[layer].attn
        attn.W_V[head, _EVIDENCE_POS, 0] = 1.0
        attn.W_O[head, 0, _ANSWER_YES] = alpha
        attn.W_O[head, 0, _ANSWER_NO] = -alpha

        layer, head = NOISE_HEAD
        attn = backend.blocks[layer].attn
        attn.W_V[head, _DISTRACTOR_POS, 0] = 1.0
        attn.W_O[head, 0, _ANSWER_YES] = -beta
        attn.W_O[head, 0, _ANSWER_NO] = beta

        backend.unembed[_ANSWER_YES, yes] = kappa
        backend.unembed[_ANSWER_NO, yes] = -kappa
        backend.unembed[_ANSWER_NO, no] = kappa
        backend.unembed[_ANSWER_YES, no] = -kappa

    return _model.ModelHandle(backend, vocabulary)


def paint_grid(cells: typing.Sequence[typing.Tuple[int, int, int]]) -> np.ndarray:
    """32×32 image from 16 row-major patch colours."""
    grid = int(len(cells) ** 0.5)
    size = IMAGE_SIZE // grid
    image = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for index, color in enumerate(cells):
        row, col = divmod(index, grid)
        image[row * size : (row + 1) * size, col * size : (col + 1) * size] = color
    return image


@dataclasses.dataclass(frozen=True)
class ProbeLayout:
    cells: typing.Tuple[typing.Tuple[int, int, int], ...]
    box: images.Box


def _layout(
    rng: np.random.Generator,
    noun: str,
    majority: typing.Tuple[int, int, int],
    minority: typing.Tuple[int, int, int],
    greens: int,
) -> ProbeLayout:
    """5 majority, 3 minority, `greens` green, the rest gray.

    Two horizontally adjacent majority patches sit under the box.
    """
    row = int(rng.integers(0, 4))
    col = int(rng.integers(0, 3))
    boxed = {row * 4 + col, row * 4 + col + 1}
    rest = [majority] * 3 + [minority] * 3 + [GREEN] * greens + [GRAY] * (8 - greens)
    order = rng.permutation(len(rest))
    free = [i for i in range(16) if i not in boxed]
    cells: typing.List[typing.Tuple[int, int, int]] = [GRAY] * 16
    for i in boxed:
        cells[i] = majority
    for i, j in zip(free, order):
        cells[i] = rest[j]
    size = IMAGE_SIZE // 4
    box = images.Box(noun, col * size, row * size, (col + 2) * size, (row + 1) * size)
    return ProbeLayout(tuple(cells), box)


@dataclasses.dataclass(frozen=True)
class SyntheticBenchmark:
    directory: pathlib.Path
    triples_path: pathlib.Path
    config_path: pathlib.Path
    triples: typing.Tuple[dataset.VQATriple, ...]
    yes_incorrect: typing.Tuple[str, ...]


RUN_TOML = """\
[run]
output_dir = "runs"
seed = {seed}

[dataset]
path = "triples.jsonl"
name = "synthetic-color"

[model]
preset = "color-probe"

[edit]
enabled = true

[patch]
modules = ["att", "mlp"]
strategy = "bbox-patches"
grouping = "question-tokens"

[heads]
k = 10

[rescale]
fractions = [0.5]
repeats = 2

[significance]
folds = 1000
fold_size = 40
baseline = "original"
"""


def write_synthetic_benchmark(
    directory: pathlib.Path,
    seed: int = 0,
    n_yes: int = 20,
    n_no: int = 20,
    n_yes_incorrect: int = 6,
    model: typing.Optional[_model.ModelHandle] = None,
) -> SyntheticBenchmark:
    """Write images, edited images, triples.jsonl and run.toml.

    Every clean and edited prediction is checked against the colour-probe
    model before anything is returned.
    """
    model = model or build_color_probe_vlm()
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    image_dir = directory / "images"
    segmenter, inpainter = clients.StubSegmenter(), clients.StubInpainter()

    specs: typing.List[typing.Tuple[str, str, int]] = []
    for i in range(n_yes):
        kind = "yes-incorrect" if i >= n_yes - n_yes_incorrect else "yes-correct"
        specs.append((f"color-{len(specs):03d}", kind, i))
    for i in range(n_no):
        specs.append((f"color-{len(specs):03d}", "no-correct", i))

    triples = []
    yes_incorrect = []
    for triple_id, kind, i in specs:
        noun = NOUNS[i % len(NOUNS)]
        question = f"Is the {noun} red?"
        answer = "no" if kind == "no-correct" else "yes"
        majority, minority = (BLUE, RED) if answer == "no" else (RED, BLUE)
        expected = "no" if kind == "yes-incorrect" else answer

        greens = 2 if kind == "yes-incorrect" else 0
        while True:
            layout = _layout(rng, noun, majority, minority, greens)
            clean = paint_grid(layout.cells)
            ids = images.image_token_ids(clean, model.image_grid, model.vocab_size)
            predicted = _model.predict_answer(model, model.sequence(ids, question))
            if predicted == expected or greens >= 8 or kind != "yes-incorrect":
                break
            greens += 1
        if predicted != expected:
            raise utils.VSeamError(
                f"Colour probe answers `{predicted}` for {triple_id}, "
                f"expected `{expected}`"
            )

        # The edit paints the boxed majority patches in the minority colour.
        paint = "blue" if answer == "yes" else "red"
        edit = editing.edit_region(clean, layout.box, paint, segmenter, inpainter)
        ids = images.image_token_ids(edit.image, model.image_grid, model.vocab_size)
        flipped = _model.predict_answer(model, model.sequence(ids, question))
        if kind != "yes-incorrect" and flipped == answer:
            raise utils.VSeamError(f"Edit of {triple_id} does not flip the answer")

        image_path = image_dir / f"{triple_id}.png"
        edited_path = image_dir / f"{triple_id}-edited.png"
        images.save_image(image_path, clean)
        images.save_image(edited_path, edit.image)
        if kind == "yes-incorrect":
            yes_incorrect.append(triple_id)
        triples.append(
            dataset.VQATriple(
                id=triple_id,
                question=question,
                image=image_path,
                answer=answer,
                level="attribute",
                category="color",
                boxes=(layout.box,),
                edited_image=edited_path,
                full_answer=f"The {noun} is {'red' if answer == 'yes' else 'blue'}.",
                counterfactual=f"Is the {noun} blue?",
                source="synthetic",
            )
        )

    triples_path = directory / "triples.jsonl"
    dataset.write_triples(triples_path, triples)
    config_path = directory / "run.toml"
    utils.atomic_write_text(config_path, RUN_TOML.format(seed=seed))
    return SyntheticBenchmark(
        directory=directory,
        triples_path=triples_path,
        config_path=config_path,
        triples=tuple(triples),
        yes_incorrect=tuple(yes_incorrect),
    )
