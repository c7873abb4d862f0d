import dataclasses
import typing

import torch

from vseam import interventions, utils
from vseam import model as _model

DEFAULT_K = 5

SourceT = typing.Literal["residual", "module"]
PositionT = typing.Union[int, typing.Literal["last", "all"]]


@dataclasses.dataclass(frozen=True)
class LensEntry:
    token: int
    text: str
    logit: float

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {"token": self.token, "text": self.text, "logit": self.logit}


@dataclasses.dataclass(frozen=True)
class LensGrid:
    module: interventions.ModuleT
    position: int
    k: int
    layers: typing.Tuple[typing.Tuple[LensEntry, ...], ...]
    source: SourceT = "residual"

    def top1(self) -> typing.List[int]:
        return [row[0].token for row in self.layers]

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            "schema": "vseam.lens/1",
            "tau": self.module,
            "position": self.position,
            "k": self.k,
            "source": self.source,
            "layers": [[entry.to_json() for entry in row] for row in self.layers],
        }

    @classmethod
    def from_json(cls, data: typing.Mapping[str, typing.Any]) -> "LensGrid":
        return cls(
            module=data["tau"],
            position=int(data["position"]),
            k=int(data["k"]),
            layers=tuple(
                tuple(
                    LensEntry(int(e["token"]), e["text"], float(e["logit"]))
                    for e in row
                )
                for row in data["layers"]
            ),
            source=data.get("source", "residual"),
        )


def _resolve_positions(position: PositionT, length: int) -> typing.List[int]:
    if position == "last":
        return [length - 1]
    if position == "all":
        return list(range(length))
    if isinstance(position, bool) or not isinstance(position, int):
        raise utils.ValidationError(f"Unknown lens position `{position}`")
    if not 0 <= position < length:
        raise utils.ValidationError(f"Position {position} out of range [0, {length})")
    return [position]


def lens_from_cache(
    model: _model.ModelHandle,
    cache: _model.ActivationCache,
    module: interventions.ModuleT,
    position: int,
    k: int = DEFAULT_K,
    source: SourceT = "residual",
) -> LensGrid:
    """Final norm then unembedding applied to each layer's state at `position`."""
    if k < 1:
        raise utils.ValidationError(f"k must be at least 1, got {k}")
    if not 0 <= position < cache.length:
        raise utils.ValidationError(
            f"Position {position} out of range [0, {cache.length})"
        )
    rows = []
    with torch.no_grad():
        for layer in range(cache.num_layers):
            if source == "residual":
                state = cache.hidden(layer, module)
            else:
                state = cache.output(layer, module)
            logits = model.backend.project(state[position : position + 1])[0]
            values, tokens = torch.sort(logits, descending=True, stable=True)
            rows.append(
                tuple(
                    LensEntry(int(t), model.vocabulary.text(int(t)), float(v))
                    for v, t in zip(values[:k], tokens[:k])
                )
            )
    return LensGrid(module, position, min(k, model.vocab_size), tuple(rows), source)


def lens_grid(
    model: _model.ModelHandle,
    sequence: _model.TokenSequence,
    module: interventions.ModuleT,
    position: PositionT = "last",
    k: int = DEFAULT_K,
    raw: bool = False,
    plan: interventions.InterventionPlan = interventions.EMPTY_PLAN,
) -> typing.List[LensGrid]:
    """One LensGrid per requested position (a single one unless position="all")."""
    positions = _resolve_positions(position, sequence.length)
    _, cache = _model.forward(model, sequence, plan)
    source: SourceT = "module" if raw else "residual"
    return [lens_from_cache(model, cache, module, p, k, source) for p in positions]
