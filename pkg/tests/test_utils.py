import datetime
import json
import pathlib
import threading
import typing

import freezegun
import pytest

from vseam import utils, workers
from vseam import model as _model


@pytest.mark.parametrize(
    argnames=("value", "expected"),
    argvalues=[
        pytest.param("true", True, id="boolean-true"),
        pytest.param("1", True, id="boolean-one"),
        pytest.param("on", True, id="on"),
        pytest.param("false", False, id="boolean-false"),
        pytest.param("0", False, id="boolean-zero"),
        pytest.param("", False, id="empty"),
        pytest.param("   ", False, id="blank"),
        pytest.param("maybe", False, id="unrecognised"),
        # A YAML block scalar keeps the newline its author did not intend.
        pytest.param("true\n", True, id="boolean-true-with-newline"),
    ],
)
def test_is_env_true(
    monkeypatch: pytest.MonkeyPatch, value: str, expected: bool
) -> None:
    monkeypatch.setenv("VSEAM_DEBUG", value)
    assert utils.is_env_true("VSEAM_DEBUG") is expected


def test_is_env_true_when_unset() -> None:
    assert utils.is_env_true("VSEAM_DEBUG") is False


def test_strtobool() -> None:
    assert utils.strtobool("YES") is True
    assert utils.strtobool("Off") is False
    with pytest.raises(ValueError, match="'perhaps'"):
        utils.strtobool("perhaps")


@freezegun.freeze_time("2026-03-01T12:00:00Z")
def test_structured_log() -> None:
    log = utils.StructuredLog.make("Stage finished", stage="patch", seconds=1.5)

    assert log.timestamp == datetime.datetime(
        2026, 3, 1, 12, tzinfo=datetime.timezone.utc
    )
    assert json.loads(log.to_json()) == {
        "timestamp": "2026-03-01T12:00:00+00:00",
        "message": "Stage finished",
        "stage": "patch",
        "seconds": 1.5,
    }


def test_canonical_json_is_stable() -> None:
    assert utils.canonical_json({"b": 1, "a": [1, 2]}) == utils.canonical_json(
        {"a": [1, 2], "b": 1}
    )
    assert utils.canonical_json({}).endswith("\n")


def test_hashes(tmp_path: pathlib.Path) -> None:
    path = tmp_path / "data.bin"
    path.write_bytes(b"vseam" * 100_000)
    assert utils.sha256_file(path) == utils.sha256_bytes(b"vseam" * 100_000)
    assert utils.sha256_bytes(b"") == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )


def test_atomic_writes(tmp_path: pathlib.Path) -> None:
    path = tmp_path / "nested" / "report.json"

    utils.write_json(path, {"b": 2, "a": 1})
    utils.atomic_write_text(tmp_path / "note.txt", "hello")

    assert path.read_text() == utils.canonical_json({"a": 1, "b": 2})
    assert (tmp_path / "note.txt").read_text() == "hello"
    assert sorted(p.name for p in path.parent.iterdir()) == ["report.json"]


def test_atomic_write_leaves_nothing_on_failure(tmp_path: pathlib.Path) -> None:
    with pytest.raises(TypeError):
        utils.write_json(tmp_path / "bad.json", {"value": object()})
    assert list(tmp_path.iterdir()) == []


@pytest.mark.parametrize(
    "value,expected",
    [
        pytest.param(None, 1, id="unset"),
        pytest.param("", 1, id="empty"),
        pytest.param("4", 4, id="four"),
        pytest.param(" 2 ", 2, id="padded"),
    ],
)
def test_worker_count(
    monkeypatch: pytest.MonkeyPatch, value: typing.Optional[str], expected: int
) -> None:
    if value is not None:
        monkeypatch.setenv("VSEAM_WORKERS", value)
    assert utils.worker_count() == expected


@pytest.mark.parametrize("value", ["many", "0", "-3"])
def test_worker_count_errors(monkeypatch: pytest.MonkeyPatch, value: str) -> None:
    monkeypatch.setenv("VSEAM_WORKERS", value)
    with pytest.raises(utils.ValidationError, match="VSEAM_WORKERS"):
        utils.worker_count()


def test_get_attributes(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("VSEAM_RUN_LABEL", "nightly")
    monkeypatch.delenv("VSEAM_MISSING", raising=False)

    attributes = utils.get_attributes(
        {
            "label": (str, "VSEAM_RUN_LABEL"),
            "missing": (str, "VSEAM_MISSING"),
            "answer": (int, lambda: "42"),
            "nothing": (str, lambda: None),
        }
    )

    assert attributes == {"label": "nightly", "answer": 42}


def test_git_outside_a_repository(
    monkeypatch: pytest.MonkeyPatch, tmp_path: pathlib.Path
) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("GIT_CEILING_DIRECTORIES", str(tmp_path.parent))
    assert utils.git("rev-parse", "HEAD") is None


def test_git_without_a_git_binary(
    monkeypatch: pytest.MonkeyPatch, tmp_path: pathlib.Path
) -> None:
    # Slim and distroless images ship no git at all.
    monkeypatch.setenv("PATH", str(tmp_path))
    assert utils.git("rev-parse", "HEAD") is None


def test_stage_error_message(tmp_path: pathlib.Path) -> None:
    error = utils.StageError("heads", tmp_path / "manifest.json", "boom")
    assert error.stage == "heads"
    assert str(error) == f"Stage `heads` failed ({tmp_path / 'manifest.json'}): boom"
    assert isinstance(error, utils.VSeamError)


def test_map_ordered_keeps_order_and_clones(
    vseam_toy_model: _model.ModelHandle,
) -> None:
    seen: typing.Dict[int, typing.Set[int]] = {}
    lock = threading.Lock()

    def record(handle: _model.ModelHandle, item: int) -> int:
        with lock:
            seen.setdefault(threading.get_ident(), set()).add(id(handle))
        return item * item

    results = workers.map_ordered(record, list(range(20)), vseam_toy_model, 4)

    assert results == [i * i for i in range(20)]
    handles = set().union(*seen.values())
    assert id(vseam_toy_model) not in handles
    # One clone per thread.
    assert all(len(ids) == 1 for ids in seen.values())
    assert len(handles) == len(seen)


def test_map_ordered_serial(vseam_toy_model: _model.ModelHandle) -> None:
    handles = workers.map_ordered(
        lambda handle, item: handle, [1, 2, 3], vseam_toy_model, 1
    )
    assert all(h is vseam_toy_model for h in handles)
