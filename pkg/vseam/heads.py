import csv
import dataclasses
import io
import os
import re
import typing
import warnings

import numpy as np
import torch

from vseam import dataset, images, interventions, utils, workers
from vseam import model as _model

DEFAULT_K = 10

HeadT = typing.Tuple[int, int]

# Shared heads and attention overlaps reported for 7B models; documentation
# fixtures only, not reproducible on the toy backend.
REFERENCE_SHARED_HEADS = {
    "llava-attribute-positive": ("L16.H1", "L15.H7", "L22.H11"),
}
REFERENCE_OVERLAP = {"llava-animal": {"positive": 0.838, "negative": 0.071}}

_HEAD_RE = re.compile(r"^L(\d+)\.H(\d+)$")


def format_head(head: HeadT) -> str:
    return f"L{head[0]}.H{head[1]}"


def parse_head(text: str) -> HeadT:
    match = _HEAD_RE.match(text.strip())
    if match is None:
        raise utils.ValidationError(f"`{text}` is not in L<layer>.H<head> form")
    return int(match.group(1)), int(match.group(2))


def mask_head_output(
    cache: _model.ActivationCache, layer: int, head: int
) -> torch.Tensor:
    """T×d_h replacement for head `head`: the mean of the other heads."""
    return interventions.mean_of_other_heads(cache.head_out[layer], head)


def _answer_prob(
    model: _model.ModelHandle,
    sequence: _model.TokenSequence,
    token: int,
    plan: interventions.InterventionPlan = interventions.EMPTY_PLAN,
) -> float:
    logits, _ = _model.forward(model, sequence, plan)
    return _model.readout(logits[-1], token)[1]


def head_prob_delta(
    model: _model.ModelHandle,
    triple: dataset.VQATriple,
    layer: int,
    head: int,
    baseline_prob: typing.Optional[float] = None,
    sequence: typing.Optional[_model.TokenSequence] = None,
) -> float:
    """p(y | x, z; head masked) − p(y | x, z) on the clean image."""
    sequence = sequence or dataset.encode_triple(model, triple)
    token = dataset.answer_token(model, triple)
    if baseline_prob is None:
        baseline_prob = _answer_prob(model, sequence, token)
    plan = interventions.InterventionPlan((interventions.HeadMaskAction(layer, head),))
    return _answer_prob(model, sequence, token, plan) - baseline_prob


def triple_head_deltas(
    model: _model.ModelHandle, triple: dataset.VQATriple
) -> np.ndarray:
    """L×H matrix of Δp, reusing one unmasked forward."""
    sequence = dataset.encode_triple(model, triple)
    baseline = _answer_prob(model, sequence, dataset.answer_token(model, triple))
    deltas = np.zeros((model.num_layers, model.num_heads), dtype=np.float64)
    for layer in range(model.num_layers):
        for head in range(model.num_heads):
            deltas[layer, head] = head_prob_delta(
                model, triple, layer, head, baseline_prob=baseline, sequence=sequence
            )
    return deltas


@dataclasses.dataclass(frozen=True)
class HeadScore:
    layer: int
    head: int
    c_correct: typing.Optional[float]
    c_incorrect: typing.Optional[float]
    n_correct: int
    n_incorrect: int

    @property
    def name(self) -> str:
        return format_head((self.layer, self.head))

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return dataclasses.asdict(self)


def head_causal_scores(
    model: _model.ModelHandle,
    split: dataset.DatasetSplit,
    n_workers: typing.Optional[int] = None,
) -> typing.List[HeadScore]:
    if not split.triples:
        raise utils.ValidationError("Cannot score heads on an empty split")

    buckets = {"correct": split.correct, "incorrect": split.incorrect}
    means: typing.Dict[str, typing.Optional[np.ndarray]] = {}
    for bucket, triples in buckets.items():
        if not triples:
            warnings.warn(
                f"The {bucket} bucket is empty; its head scores are absent",
                utils.VSeamWarning,
                stacklevel=2,
            )
            means[bucket] = None
            continue
        per_triple = workers.map_ordered(triple_head_deltas, triples, model, n_workers)
        total = np.zeros((model.num_layers, model.num_heads), dtype=np.float64)
        for deltas in per_triple:
            total += deltas
        means[bucket] = total / len(triples)

    def cell(bucket: str, layer: int, head: int) -> typing.Optional[float]:
        values = means[bucket]
        return None if values is None else float(values[layer, head])

    return [
        HeadScore(
            layer=layer,
            head=head,
            c_correct=cell("correct", layer, head),
            c_incorrect=cell("incorrect", layer, head),
            n_correct=len(buckets["correct"]),
            n_incorrect=len(buckets["incorrect"]),
        )
        for layer in range(model.num_layers)
        for head in range(model.num_heads)
    ]


@dataclasses.dataclass(frozen=True)
class HeadSetSelection:
    k: int
    positive: typing.Tuple[typing.Tuple[HeadT, float], ...]
    negative: typing.Tuple[typing.Tuple[HeadT, float], ...]
    dropped_overlap: typing.Tuple[HeadT, ...] = ()

    @property
    def positive_heads(self) -> typing.List[HeadT]:
        return [head for head, _ in self.positive]

    @property
    def negative_heads(self) -> typing.List[HeadT]:
        return [head for head, _ in self.negative]

    @property
    def is_empty(self) -> bool:
        return not (self.positive or self.negative)

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            "schema": "vseam.heads/1",
            "k": self.k,
            "positive": [
                {"head": format_head(h), "score": s} for h, s in self.positive
            ],
            "negative": [
                {"head": format_head(h), "score": s} for h, s in self.negative
            ],
            "dropped_overlap": [format_head(h) for h in self.dropped_overlap],
        }

    @classmethod
    def from_json(cls, data: typing.Mapping[str, typing.Any]) -> "HeadSetSelection":
        return cls(
            k=int(data["k"]),
            positive=tuple(
                (parse_head(e["head"]), float(e["score"])) for e in data["positive"]
            ),
            negative=tuple(
                (parse_head(e["head"]), float(e["score"])) for e in data["negative"]
            ),
            dropped_overlap=tuple(parse_head(h) for h in data["dropped_overlap"]),
        )

    def make_report(self) -> str:
        lines = [f"🎯 Key heads (K={self.k})"]
        lines.append(
            "- Positive: "
            + (", ".join(format_head(h) for h in self.positive_heads) or "none")
        )
        lines.append(
            "- Negative: "
            + (", ".join(format_head(h) for h in self.negative_heads) or "none")
        )
        if self.dropped_overlap:
            lines.append(
                "- Dropped (in both sets): "
                + ", ".join(format_head(h) for h in self.dropped_overlap)
            )
        return os.linesep.join(lines)


def select_key_heads(
    scores: typing.Sequence[HeadScore], k: int = DEFAULT_K
) -> HeadSetSelection:
    """Top-K by −c_correct and by c_incorrect, heads in both sets dropped."""
    if k < 1:
        raise utils.ValidationError(f"K must be at least 1, got {k}")

    def top(
        key: typing.Callable[[HeadScore], typing.Optional[float]],
    ) -> typing.List[typing.Tuple[HeadT, float]]:
        ranked = sorted(
            ((s, key(s)) for s in scores if key(s) is not None),
            key=lambda pair: (
                -typing.cast(float, pair[1]),
                pair[0].layer,
                pair[0].head,
            ),
        )
        return [((s.layer, s.head), typing.cast(float, v)) for s, v in ranked[:k]]

    positive = top(lambda s: None if s.c_correct is None else -s.c_correct)
    negative = top(lambda s: s.c_incorrect)
    overlap = {h for h, _ in positive} & {h for h, _ in negative}
    return HeadSetSelection(
        k=k,
        positive=tuple((h, -v) for h, v in positive if h not in overlap),
        negative=tuple((h, v) for h, v in negative if h not in overlap),
        dropped_overlap=tuple(sorted(overlap)),
    )


def bbox_attention_overlap(
    attention: torch.Tensor,
    image_positions: typing.Sequence[int],
    box: images.Box,
    geometry: images.PatchGeometry,
) -> float:
    """Share of the final position's image-directed attention that lands in `box`."""
    row = attention[-1].to(torch.float64)
    image_positions = list(image_positions)
    if len(image_positions) != geometry.grid * geometry.grid:
        raise utils.ValidationError(
            f"{len(image_positions)} image positions for a "
            f"{geometry.grid}×{geometry.grid} patch grid"
        )
    total = float(row[image_positions].sum())
    if total <= 0.0:
        raise utils.ValidationError("Head puts no attention mass on image tokens")
    inside = [image_positions[p] for p in geometry.patches_intersecting(box)]
    ratio = float(row[inside].sum()) / total if inside else 0.0
    return min(max(ratio, 0.0), 1.0)


def overlap_by_polarity(
    model: _model.ModelHandle,
    triples: typing.Sequence[dataset.VQATriple],
    selection: HeadSetSelection,
    n_workers: typing.Optional[int] = None,
) -> typing.Dict[str, typing.Optional[float]]:
    """Mean in-box attention share over examples, per head set."""
    annotated = [t for t in triples if t.boxes]

    def measure(
        handle: _model.ModelHandle, triple: dataset.VQATriple
    ) -> typing.Dict[str, typing.List[float]]:
        sequence = dataset.encode_triple(handle, triple)
        _, cache = _model.forward(handle, sequence, capture_attention=True)
        width, height = images.image_size(triple.image)
        geometry = images.PatchGeometry(width, height, handle.image_grid)
        box = typing.cast(images.Box, triple.target_box())
        return {
            polarity: [
                bbox_attention_overlap(
                    cache.attention(layer, head),
                    sequence.image_positions,
                    box,
                    geometry,
                )
                for layer, head in heads
            ]
            for polarity, heads in (
                ("positive", selection.positive_heads),
                ("negative", selection.negative_heads),
            )
        }

    measured = workers.map_ordered(measure, annotated, model, n_workers)
    result: typing.Dict[str, typing.Optional[float]] = {}
    for polarity in ("positive", "negative"):
        values = [v for m in measured for v in m[polarity]]
        result[polarity] = sum(values) / len(values) if values else None
    return result


def scores_to_csv(scores: typing.Sequence[HeadScore]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["layer", "head", "c_correct", "c_incorrect", "n_correct", "n_incorrect"]
    )
    for s in scores:
        writer.writerow(
            [
                s.layer,
                s.head,
                "" if s.c_correct is None else repr(s.c_correct),
                "" if s.c_incorrect is None else repr(s.c_incorrect),
                s.n_correct,
                s.n_incorrect,
            ]
        )
    return buffer.getvalue()


def scores_from_csv(text: str) -> typing.List[HeadScore]:
    def number(value: str) -> typing.Optional[float]:
        return float(value) if value else None

    return [
        HeadScore(
            layer=int(row["layer"]),
            head=int(row["head"]),
            c_correct=number(row["c_correct"]),
            c_incorrect=number(row["c_incorrect"]),
            n_correct=int(row["n_correct"]),
            n_incorrect=int(row["n_incorrect"]),
        )
        for row in csv.DictReader(io.StringIO(text))
    ]


def scores_to_json(scores: typing.Sequence[HeadScore]) -> typing.Dict[str, typing.Any]:
    return {"schema": "vseam.head-scores/1", "scores": [s.to_json() for s in scores]}
