import json
import pathlib
import typing

import pytest

from vseam import dataset, fixtures, images

pytest_plugins = ["pytester"]


@pytest.fixture(autouse=True)
def isolate_env(monkeypatch: pytest.MonkeyPatch) -> None:
    # Spans go to memory, never to a collector configured on the host.
    monkeypatch.setenv("_VSEAM_TEST", "true")
    for env in (
        "VSEAM_DEBUG",
        "VSEAM_OTLP_ENDPOINT",
        "VSEAM_OTLP_TOKEN",
        "VSEAM_RUN_LABEL",
        "VSEAM_WORKERS",
    ):
        monkeypatch.delenv(env, raising=False)


@pytest.fixture(scope="session")
def benchmark(
    tmp_path_factory: pytest.TempPathFactory,
) -> fixtures.SyntheticBenchmark:
    """Shared, read-only synthetic colour benchmark."""
    return fixtures.write_synthetic_benchmark(tmp_path_factory.mktemp("synthetic"))


class TripleFileT(typing.Protocol):
    def __call__(
        self, records: typing.Sequence[typing.Dict[str, typing.Any]]
    ) -> pathlib.Path: ...


def make_record(**overrides: typing.Any) -> typing.Dict[str, typing.Any]:
    record: typing.Dict[str, typing.Any] = {
        "id": "t-0",
        "question": "Is the object red?",
        "image": "images/red.png",
        "answer": "yes",
        "level": "attribute",
        "category": "color",
        "boxes": [{"label": "object", "bbox": [0, 0, 16, 8]}],
    }
    record.update(overrides)
    return record


@pytest.fixture
def triple_file(tmp_path: pathlib.Path) -> TripleFileT:
    """Write JSONL records next to a solid red 32×32 image."""
    images.save_image(
        tmp_path / "images" / "red.png",
        fixtures.paint_grid([fixtures.RED] * 16),
    )

    def _write(records: typing.Sequence[typing.Dict[str, typing.Any]]) -> pathlib.Path:
        path = tmp_path / "triples.jsonl"
        path.write_text(
            "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
        )
        return path

    return _write


def by_kind(
    bench: fixtures.SyntheticBenchmark,
) -> typing.Dict[str, typing.List[dataset.VQATriple]]:
    groups: typing.Dict[str, typing.List[dataset.VQATriple]] = {
        "yes-correct": [],
        "yes-incorrect": [],
        "no-correct": [],
    }
    for triple in bench.triples:
        if triple.id in bench.yes_incorrect:
            groups["yes-incorrect"].append(triple)
        elif triple.answer == "yes":
            groups["yes-correct"].append(triple)
        else:
            groups["no-correct"].append(triple)
    return groups
