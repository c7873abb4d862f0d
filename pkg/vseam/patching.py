import csv
import dataclasses
import difflib
import io
import os
import typing

import numpy as np

from vseam import dataset, images, interventions, utils, workers
from vseam import model as _model

StrategyT = typing.Literal["all-image", "bbox-patches", "text-span", "all-positions"]
GroupingT = typing.Literal["modality", "question-tokens", "image-tokens"]
STRATEGIES: typing.Tuple[StrategyT, ...] = (
    "all-image",
    "bbox-patches",
    "text-span",
    "all-positions",
)
GROUPINGS: typing.Tuple[GroupingT, ...] = (
    "modality",
    "question-tokens",
    "image-tokens",
)

_CORRUPTED_GROUP_LABEL = {
    "all-image": "image",
    "bbox-patches": "image",
    "text-span": "span",
    "all-positions": "all",
}


@dataclasses.dataclass(frozen=True)
class CorruptionIndex:
    triple_id: str
    positions: typing.Tuple[int, ...]
    strategy: StrategyT

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", tuple(sorted(set(self.positions))))


def corrupted_sequence(
    model: _model.ModelHandle, triple: dataset.VQATriple, strategy: StrategyT
) -> _model.TokenSequence:
    """(x, z̃) for image strategies, the counterfactual question on z for text-span."""
    if strategy == "text-span":
        if triple.counterfactual is None:
            raise utils.ValidationError(
                f"Triple `{triple.id}` has no counterfactual question for text-span"
            )
        clean = dataset.encode_triple(model, triple)
        image_ids = [clean.ids[i] for i in clean.image_positions]
        sequence = model.sequence(image_ids, triple.counterfactual)
        if sequence.length != clean.length:
            raise utils.ValidationError(
                f"Counterfactual of `{triple.id}` changes the question length"
            )
        return sequence
    return dataset.encode_triple(model, triple, edited=True)


def corrupted_indices(
    triple: dataset.VQATriple,
    model: _model.ModelHandle,
    strategy: StrategyT,
    sequence: typing.Optional[_model.TokenSequence] = None,
) -> CorruptionIndex:
    if strategy not in STRATEGIES:
        raise utils.ValidationError(f"Unknown corruption strategy `{strategy}`")
    sequence = sequence or dataset.encode_triple(model, triple)
    image_positions = sequence.image_positions

    positions: typing.List[int]
    if strategy == "all-image":
        positions = list(image_positions)
    elif strategy == "all-positions":
        positions = list(range(sequence.length))
    elif strategy == "bbox-patches":
        if not triple.boxes:
            raise utils.ValidationError(
                f"Triple `{triple.id}` has no boxes for bbox-patches"
            )
        width, height = images.image_size(triple.image)
        geometry = images.PatchGeometry(width, height, model.image_grid)
        patches = sorted(
            {p for box in triple.boxes for p in geometry.patches_intersecting(box)}
        )
        positions = [image_positions[p] for p in patches]
    else:
        if triple.counterfactual is None:
            raise utils.ValidationError(
                f"Triple `{triple.id}` has no counterfactual question for text-span"
            )
        before = model.vocabulary.split(triple.question)
        after = model.vocabulary.split(triple.counterfactual)
        text_positions = sequence.text_positions
        positions = [
            text_positions[i]
            for tag, i1, i2, _, _ in difflib.SequenceMatcher(
                a=before, b=after, autojunk=False
            ).get_opcodes()
            if tag != "equal"
            for i in range(i1, i2)
        ]

    if not positions:
        raise utils.ValidationError(
            f"Strategy `{strategy}` selects no positions for `{triple.id}`"
        )
    return CorruptionIndex(triple.id, tuple(positions), strategy)


def patched_logit_delta(
    model: _model.ModelHandle,
    clean_cache: _model.ActivationCache,
    corrupted: _model.TokenSequence,
    answer_token: int,
    layer: int,
    module: interventions.ModuleT,
    positions: typing.Iterable[int],
    baseline_logit: typing.Optional[float] = None,
) -> float:
    """ℓ̂ − ℓ(x, z̃, y) for one patched site."""
    positions = tuple(positions)
    if baseline_logit is None:
        logits, _ = _model.forward(model, corrupted)
        baseline_logit, _ = _model.readout(logits[-1], answer_token)
    if not positions:
        return 0.0
    plan = interventions.InterventionPlan(
        (interventions.PatchAction(layer, module, positions, clean_cache),)
    )
    logits, _ = _model.forward(model, corrupted, plan)
    patched, _ = _model.readout(logits[-1], answer_token)
    return patched - baseline_logit


@dataclasses.dataclass
class CausalTracer:
    """Patched deltas with per-triple clean caches and baselines memoised."""

    model: _model.ModelHandle
    strategy: StrategyT = "bbox-patches"
    _clean: typing.Dict[
        str, typing.Tuple[_model.TokenSequence, _model.ActivationCache]
    ] = dataclasses.field(init=False, default_factory=dict)
    _corrupted: typing.Dict[str, typing.Tuple[_model.TokenSequence, float]] = (
        dataclasses.field(init=False, default_factory=dict)
    )

    def clean(
        self, triple: dataset.VQATriple
    ) -> typing.Tuple[_model.TokenSequence, _model.ActivationCache]:
        if triple.id not in self._clean:
            sequence = dataset.encode_triple(self.model, triple)
            _, cache = _model.forward(self.model, sequence)
            self._clean[triple.id] = (sequence, cache)
        return self._clean[triple.id]

    def corrupted(
        self, triple: dataset.VQATriple
    ) -> typing.Tuple[_model.TokenSequence, float]:
        if triple.id not in self._corrupted:
            sequence = corrupted_sequence(self.model, triple, self.strategy)
            logits, _ = _model.forward(self.model, sequence)
            baseline, _ = _model.readout(
                logits[-1], dataset.answer_token(self.model, triple)
            )
            self._corrupted[triple.id] = (sequence, baseline)
        return self._corrupted[triple.id]

    def delta(
        self,
        triple: dataset.VQATriple,
        layer: int,
        module: interventions.ModuleT,
        positions: typing.Iterable[int],
    ) -> float:
        _, cache = self.clean(triple)
        sequence, baseline = self.corrupted(triple)
        return patched_logit_delta(
            self.model,
            cache,
            sequence,
            dataset.answer_token(self.model, triple),
            layer,
            module,
            positions,
            baseline_logit=baseline,
        )

    def groups(
        self, triple: dataset.VQATriple, grouping: GroupingT
    ) -> typing.List[typing.Tuple[str, typing.Tuple[int, ...]]]:
        sequence, _ = self.clean(triple)
        if grouping == "image-tokens":
            return [
                (f"img{i}", (position,))
                for i, position in enumerate(sequence.image_positions)
            ]
        corrupted = corrupted_indices(triple, self.model, self.strategy, sequence)
        pooled = (_CORRUPTED_GROUP_LABEL[self.strategy], corrupted.positions)
        if grouping == "modality":
            return [pooled, ("question", sequence.text_positions)]
        return [pooled] + [
            (self.model.vocabulary.text(sequence.ids[p]), (p,))
            for p in sequence.text_positions
        ]


@dataclasses.dataclass(frozen=True)
class CausalGrid:
    module: interventions.ModuleT
    values: typing.Tuple[typing.Tuple[float, ...], ...]
    groups: typing.Tuple[str, ...]
    n: int
    strategy: StrategyT = "bbox-patches"
    grouping: GroupingT = "question-tokens"

    @property
    def layers(self) -> typing.Tuple[int, ...]:
        return tuple(range(len(self.values)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            "schema": "vseam.causal-grid/1",
            "tau": self.module,
            "layers": list(self.layers),
            "groups": list(self.groups),
            "values": [list(row) for row in self.values],
            "n": self.n,
            "strategy": self.strategy,
            "grouping": self.grouping,
        }

    @classmethod
    def from_json(cls, data: typing.Mapping[str, typing.Any]) -> "CausalGrid":
        return cls(
            module=data["tau"],
            values=tuple(tuple(float(v) for v in row) for row in data["values"]),
            groups=tuple(data["groups"]),
            n=int(data["n"]),
            strategy=data.get("strategy", "bbox-patches"),
            grouping=data.get("grouping", "question-tokens"),
        )

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["layer", *self.groups])
        for layer, row in zip(self.layers, self.values):
            writer.writerow([layer, *(repr(v) for v in row)])
        return buffer.getvalue()

    def make_report(self) -> str:
        array = self.as_array()
        layer, group = np.unravel_index(int(np.argmax(array)), array.shape)
        return os.linesep.join(
            [
                f"🧪 Causal patching ({self.module}, {self.strategy}, N={self.n})",
                f"- Peak Δlogit {array[layer, group]:+.4f} "
                f"at layer {layer}, group `{self.groups[group]}`",
            ]
        )


def _triple_cells(
    model: _model.ModelHandle,
    triple: dataset.VQATriple,
    module: interventions.ModuleT,
    strategy: StrategyT,
    grouping: GroupingT,
) -> typing.Tuple[typing.List[str], np.ndarray]:
    tracer = CausalTracer(model, strategy)
    groups = tracer.groups(triple, grouping)
    cells = np.zeros((model.num_layers, len(groups)), dtype=np.float64)
    for layer in range(model.num_layers):
        for g, (_, positions) in enumerate(groups):
            cells[layer, g] = tracer.delta(triple, layer, module, positions)
    return [label for label, _ in groups], cells


def causal_score_grid(
    model: _model.ModelHandle,
    triples: typing.Sequence[dataset.VQATriple],
    module: interventions.ModuleT,
    strategy: StrategyT = "bbox-patches",
    grouping: GroupingT = "question-tokens",
    n_workers: typing.Optional[int] = None,
) -> CausalGrid:
    if not triples:
        raise utils.ValidationError("Causal grid needs at least one triple")
    if grouping not in GROUPINGS:
        raise utils.ValidationError(f"Unknown grouping `{grouping}`")

    per_triple = workers.map_ordered(
        lambda handle, triple: _triple_cells(
            handle, triple, module, strategy, grouping
        ),
        triples,
        model,
        n_workers,
    )
    labels = per_triple[0][0]
    total = np.zeros_like(per_triple[0][1])
    for triple, (triple_labels, cells) in zip(triples, per_triple):
        if len(triple_labels) != len(labels):
            raise utils.ValidationError(
                f"Triple `{triple.id}` has {len(triple_labels)} token groups, "
                f"expected {len(labels)}; per-token grids need equal-length questions"
            )
        total += cells
    mean = total / len(triples)
    return CausalGrid(
        module=module,
        values=tuple(tuple(float(v) for v in row) for row in mean),
        groups=tuple(labels),
        n=len(triples),
        strategy=strategy,
        grouping=grouping,
    )


def merge_grids(grids: typing.Sequence[CausalGrid]) -> CausalGrid:
    """Sample-weighted mean of grids sharing the same axes."""
    if not grids:
        raise utils.ValidationError("Nothing to merge")
    first = grids[0]
    for grid in grids[1:]:
        if (grid.module, grid.groups, grid.layers) != (
            first.module,
            first.groups,
            first.layers,
        ):
            raise utils.ValidationError("Grids must share module, layers and groups")
    n = sum(g.n for g in grids)
    total = sum((g.as_array() * g.n for g in grids), np.zeros_like(first.as_array()))
    return dataclasses.replace(
        first,
        values=tuple(tuple(float(v) for v in row) for row in total / n),
        n=n,
    )
