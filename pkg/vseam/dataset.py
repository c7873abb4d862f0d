import collections
import dataclasses
import json
import math
import os
import pathlib
import re
import typing
import warnings

import numpy as np

from vseam import images, interventions, utils, workers
from vseam import model as _model

LevelT = typing.Literal["attribute", "object", "relation"]
CategoryT = typing.Literal[
    "material", "color", "animal", "vehicle", "indoor", "spatial", "action"
]
MembershipT = typing.Literal["correct", "incorrect"]

CATEGORY_LEVELS: typing.Dict[str, LevelT] = {
    "material": "attribute",
    "color": "attribute",
    "animal": "object",
    "vehicle": "object",
    "indoor": "object",
    "spatial": "relation",
    "action": "relation",
}
LEVELS: typing.Tuple[LevelT, ...] = ("attribute", "object", "relation")

# Reference benchmark size per category.
REFERENCE_CATEGORY_SIZES = {
    "material": 1300,
    "color": 1500,
    "animal": 1070,
    "vehicle": 1740,
    "indoor": 2092,
    "spatial": 1950,
    "action": 2995,
}

EVALUATION_TEMPLATES = {
    "llava": (
        "USER:\n<Image>\n{role}\nQuestion: {question}\n"
        "Please answer the question using Yes or No.\nASSISTANT:"
    ),
    "instructblip": (
        "<Image>\n{role}\nQuestion: {question}\n"
        "Please answer the question using yes or no."
    ),
}

_REQUIRED_KEYS = {
    "id": str,
    "question": str,
    "image": str,
    "answer": str,
    "level": str,
    "category": str,
    "boxes": list,
}
_OPTIONAL_KEYS = {
    "edited_image": (str, type(None)),
    "relations": (list, type(None)),
    "full_answer": (str, type(None)),
    "counterfactual": (str, type(None)),
    "source": (str, type(None)),
}


class SchemaError(utils.ValidationError):
    def __init__(self, path: pathlib.Path, line: int, field: str, problem: str) -> None:
        super().__init__(f"{path}:{line}: field `{field}`: {problem}")
        self.line = line
        self.field = field


class DuplicateTripleError(utils.ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class VQATriple:
    id: str
    question: str
    image: pathlib.Path
    answer: str
    level: LevelT
    category: CategoryT
    boxes: typing.Tuple[images.Box, ...] = ()
    edited_image: typing.Optional[pathlib.Path] = None
    relations: typing.Optional[typing.Tuple[typing.Tuple[str, str, str], ...]] = None
    full_answer: typing.Optional[str] = None
    counterfactual: typing.Optional[str] = None
    source: typing.Optional[str] = None
    answer_id: typing.Optional[int] = dataclasses.field(default=None, compare=False)

    def target_box(self) -> typing.Optional[images.Box]:
        """The box whose label occurs in the question, else the first box."""
        words = set(re.findall(r"[a-z0-9]+", self.question.lower()))
        for box in self.boxes:
            if box.label.lower() in words:
                return box
        return self.boxes[0] if self.boxes else None

    def to_json(
        self, base: typing.Optional[pathlib.Path] = None
    ) -> typing.Dict[str, typing.Any]:
        def ref(path: typing.Optional[pathlib.Path]) -> typing.Optional[str]:
            if path is None:
                return None
            if base is not None:
                return os.path.relpath(path, base)
            return str(path)

        record: typing.Dict[str, typing.Any] = {
            "id": self.id,
            "question": self.question,
            "image": ref(self.image),
            "edited_image": ref(self.edited_image),
            "answer": self.answer,
            "level": self.level,
            "category": self.category,
            "boxes": [box.to_json() for box in self.boxes],
            "relations": [list(r) for r in self.relations]
            if self.relations is not None
            else None,
        }
        for key in ("full_answer", "counterfactual", "source"):
            if getattr(self, key) is not None:
                record[key] = getattr(self, key)
        return record


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    triples: typing.Tuple[VQATriple, ...]
    membership: typing.Mapping[str, MembershipT]

    def __post_init__(self) -> None:
        ids = [t.id for t in self.triples]
        if set(ids) != set(self.membership) or len(ids) != len(self.membership):
            raise utils.ValidationError(
                "Correctness membership must cover every triple exactly once"
            )

    @property
    def correct(self) -> typing.List[VQATriple]:
        return [t for t in self.triples if self.membership[t.id] == "correct"]

    @property
    def incorrect(self) -> typing.List[VQATriple]:
        return [t for t in self.triples if self.membership[t.id] == "incorrect"]


def _parse_record(
    record: typing.Any,
    path: pathlib.Path,
    line: int,
    vocabulary: _model.Vocabulary,
) -> VQATriple:
    if not isinstance(record, dict):
        raise SchemaError(path, line, "<record>", "expected a JSON object")
    for key, kind in _REQUIRED_KEYS.items():
        if key not in record:
            raise SchemaError(path, line, key, "missing")
        if not isinstance(record[key], kind):
            raise SchemaError(path, line, key, f"expected {kind.__name__}")
    for key, kinds in _OPTIONAL_KEYS.items():
        if key in record and not isinstance(record[key], kinds):
            raise SchemaError(path, line, key, "wrong type")
    unknown = set(record) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
    if unknown:
        raise SchemaError(path, line, sorted(unknown)[0], "unknown field")

    category = record["category"]
    if category not in CATEGORY_LEVELS:
        raise SchemaError(path, line, "category", f"unknown category `{category}`")
    if CATEGORY_LEVELS[category] != record["level"]:
        raise SchemaError(
            path,
            line,
            "level",
            f"category `{category}` belongs to `{CATEGORY_LEVELS[category]}`, "
            f"not `{record['level']}`",
        )

    answer = record["answer"].strip().lower()
    answer_id = vocabulary.token_id(answer)
    if answer_id is None:
        raise SchemaError(path, line, "answer", f"`{answer}` is not a single token")

    base = path.parent
    image = base / record["image"]
    if not image.is_file():
        raise SchemaError(path, line, "image", f"{image} not found")
    width, height = images.image_size(image)
    edited = record.get("edited_image")
    edited_image = base / edited if edited else None

    boxes = []
    for raw in record["boxes"]:
        try:
            label = raw["label"]
            x0, y0, x1, y1 = (int(v) for v in raw["bbox"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(
                path, line, "boxes", "expected {label, bbox: [x0,y0,x1,y1]}"
            )
        try:
            box = images.Box(str(label), x0, y0, x1, y1)
        except utils.ValidationError as e:
            raise SchemaError(path, line, "boxes", str(e))
        if not box.fits(width, height):
            raise SchemaError(
                path,
                line,
                "boxes",
                f"box `{label}` exceeds image size {width}x{height}",
            )
        boxes.append(box)

    relations = None
    if record.get("relations") is not None:
        try:
            relations = tuple(
                (str(s), str(p), str(o)) for s, p, o in record["relations"]
            )
        except (TypeError, ValueError):
            raise SchemaError(
                path, line, "relations", "expected [subject, predicate, object]"
            )

    return VQATriple(
        id=record["id"],
        question=record["question"],
        image=image,
        answer=answer,
        level=record["level"],
        category=category,
        boxes=tuple(boxes),
        edited_image=edited_image,
        relations=relations,
        full_answer=record.get("full_answer"),
        counterfactual=record.get("counterfactual"),
        source=record.get("source"),
        answer_id=answer_id,
    )


def load_triples(
    source: pathlib.Path,
    vocabulary: typing.Optional[_model.Vocabulary] = None,
) -> typing.List[VQATriple]:
    vocabulary = vocabulary or _model.Vocabulary.default()
    triples: typing.List[VQATriple] = []
    seen: typing.Dict[str, int] = {}
    with source.open(encoding="utf-8") as f:
        for line, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as e:
                raise SchemaError(source, line, "<record>", f"invalid JSON: {e.msg}")
            triple = _parse_record(record, source, line, vocabulary)
            if triple.id in seen:
                raise DuplicateTripleError(
                    f"{source}:{line}: duplicate id `{triple.id}` "
                    f"(first seen on line {seen[triple.id]})"
                )
            seen[triple.id] = line
            triples.append(triple)
    return triples


def write_triples(path: pathlib.Path, triples: typing.Iterable[VQATriple]) -> None:
    lines = [
        json.dumps(t.to_json(base=path.parent), sort_keys=True) + "\n" for t in triples
    ]
    utils.atomic_write_text(path, "".join(lines))


def encode_triple(
    model: _model.ModelHandle, triple: VQATriple, edited: bool = False
) -> _model.TokenSequence:
    path = triple.edited_image if edited else triple.image
    if path is None:
        raise utils.ValidationError(f"Triple `{triple.id}` has no edited image")
    image = images.load_image(path)
    ids = images.image_token_ids(image, model.image_grid, model.vocab_size)
    return model.sequence(ids, triple.question)


def answer_token(model: _model.ModelHandle, triple: VQATriple) -> int:
    return model.answer_id(triple.answer)


def predict(
    model: _model.ModelHandle,
    triple: VQATriple,
    edited: bool = False,
    plan: interventions.InterventionPlan = interventions.EMPTY_PLAN,
) -> _model.AnswerT:
    return _model.predict_answer(model, encode_triple(model, triple, edited), plan)


@dataclasses.dataclass(frozen=True)
class CausalPairVerdict:
    triple: VQATriple
    clean: _model.AnswerT
    edited: _model.AnswerT

    @property
    def retained(self) -> bool:
        return self.clean == self.triple.answer and self.edited != self.triple.answer


def causal_pair_verdicts(
    model: _model.ModelHandle,
    triples: typing.Sequence[VQATriple],
    n_workers: typing.Optional[int] = None,
) -> typing.List[CausalPairVerdict]:
    for triple in triples:
        if triple.edited_image is None:
            raise utils.ValidationError(f"Triple `{triple.id}` has no edited image")
        answer_token(model, triple)

    def check(handle: _model.ModelHandle, triple: VQATriple) -> CausalPairVerdict:
        return CausalPairVerdict(
            triple=triple,
            clean=predict(handle, triple),
            edited=predict(handle, triple, edited=True),
        )

    return workers.map_ordered(check, triples, model, n_workers)


def filter_causal_pairs(
    model: _model.ModelHandle,
    triples: typing.Sequence[VQATriple],
    n_workers: typing.Optional[int] = None,
) -> typing.List[VQATriple]:
    """Keep triples answered correctly on the clean image and not on the edit."""
    return [
        v.triple for v in causal_pair_verdicts(model, triples, n_workers) if v.retained
    ]


def split_by_correctness(
    model: _model.ModelHandle,
    triples: typing.Sequence[VQATriple],
    n_workers: typing.Optional[int] = None,
) -> DatasetSplit:
    predictions = workers.map_ordered(predict, triples, model, n_workers)
    return DatasetSplit(
        triples=tuple(triples),
        membership={
            t.id: "correct" if p == t.answer else "incorrect"
            for t, p in zip(triples, predictions)
        },
    )


@dataclasses.dataclass(frozen=True)
class CategoryCounts:
    yes: int
    no: int
    kept_yes: int
    kept_no: int

    @property
    def total(self) -> int:
        return self.yes + self.no

    @property
    def kept(self) -> int:
        return self.kept_yes + self.kept_no

    @property
    def yes_ratio(self) -> float:
        return self.kept_yes / self.kept if self.kept else 0.0


@dataclasses.dataclass(frozen=True)
class BalanceResult:
    triples: typing.List[VQATriple]
    counts: typing.Dict[str, CategoryCounts]
    seed: int

    @property
    def yes_ratios(self) -> typing.Dict[str, float]:
        return {category: c.yes_ratio for category, c in self.counts.items()}

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            "schema": "vseam.balance/1",
            "seed": self.seed,
            "total": sum(c.kept for c in self.counts.values()),
            "categories": {
                category: {
                    "level": CATEGORY_LEVELS[category],
                    "yes": c.yes,
                    "no": c.no,
                    "kept_yes": c.kept_yes,
                    "kept_no": c.kept_no,
                    "yes_ratio": c.yes_ratio,
                }
                for category, c in sorted(self.counts.items())
            },
        }

    def make_report(self) -> str:
        return format_category_table({k: c.kept for k, c in self.counts.items()})


def balance_and_stats(
    triples: typing.Sequence[VQATriple], seed: int = 0
) -> BalanceResult:
    for triple in triples:
        if triple.answer not in ("yes", "no"):
            raise utils.ValidationError(
                f"Triple `{triple.id}` has non-binary answer `{triple.answer}`"
            )

    rng = np.random.default_rng(seed)
    by_category: typing.Dict[str, typing.List[VQATriple]] = (
        collections.defaultdict(list)
    )
    for triple in triples:
        by_category[triple.category].append(triple)

    dropped: typing.Set[str] = set()
    counts = {}
    for category in sorted(by_category):
        members = by_category[category]
        yes = [t for t in members if t.answer == "yes"]
        no = [t for t in members if t.answer == "no"]
        kept_yes, kept_no = len(yes), len(no)
        if abs(len(yes) - len(no)) > 1:
            majority, keep = (yes, len(no)) if len(yes) > len(no) else (no, len(yes))
            order = rng.permutation(len(majority))
            dropped.update(majority[i].id for i in order[keep:])
            kept_yes = kept_no = keep
        counts[category] = CategoryCounts(len(yes), len(no), kept_yes, kept_no)

    return BalanceResult(
        triples=[t for t in triples if t.id not in dropped],
        counts=counts,
        seed=seed,
    )


def format_category_table(counts: typing.Mapping[str, int]) -> str:
    rows = [f"{'Concept-Level':<14}{'Category':<10}{'Size':>7}"]
    for level in LEVELS:
        for category, category_level in CATEGORY_LEVELS.items():
            if category_level == level and category in counts:
                name = f"{level.capitalize():<14}{category.capitalize():<10}"
                rows.append(f"{name}{counts[category]:>7,}")
    rows.append(f"{'Total':<24}{sum(counts.values()):>7,}")
    return os.linesep.join(rows)


def stratified_subsample(
    triples: typing.Sequence[VQATriple],
    fraction: float,
    rng: np.random.Generator,
) -> typing.List[VQATriple]:
    """Draw ceil(fraction·n) per category, keeping input order."""
    if not 0 < fraction <= 1:
        raise utils.ValidationError(f"Fraction must lie in (0, 1], got {fraction}")
    by_category: typing.Dict[str, typing.List[int]] = collections.defaultdict(list)
    for index, triple in enumerate(triples):
        by_category[triple.category].append(index)
    chosen: typing.Set[int] = set()
    for category in sorted(by_category):
        indices = by_category[category]
        if len(indices) < 2:
            warnings.warn(
                f"Category `{category}` has {len(indices)} example; "
                "its subsample is the whole category",
                utils.VSeamWarning,
                stacklevel=2,
            )
        take = max(1, math.ceil(fraction * len(indices)))
        order = rng.permutation(len(indices))
        chosen.update(indices[i] for i in order[:take])
    return [t for i, t in enumerate(triples) if i in chosen]


@dataclasses.dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    yes_ratio: float

    def to_json(self) -> typing.Dict[str, float]:
        return dataclasses.asdict(self)


def binary_metrics(
    predictions: typing.Sequence[str], answers: typing.Sequence[str]
) -> BinaryMetrics:
    """Accuracy, precision, recall and F1 with "yes" as the positive class."""
    if len(predictions) != len(answers) or not answers:
        raise utils.ValidationError(
            "Predictions and answers must be aligned and non-empty"
        )
    pairs = list(zip(predictions, answers))
    tp = sum(p == "yes" and a == "yes" for p, a in pairs)
    fp = sum(p == "yes" and a != "yes" for p, a in pairs)
    fn = sum(p != "yes" and a == "yes" for p, a in pairs)
    correct = sum(p == a for p, a in pairs)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryMetrics(
        accuracy=correct / len(pairs),
        precision=precision,
        recall=recall,
        f1=f1,
        yes_ratio=sum(p == "yes" for p in predictions) / len(pairs),
    )
