import json
import pathlib
import typing

import pytest
from opentelemetry.sdk.trace import ReadableSpan
from opentelemetry.sdk.trace.export.in_memory_span_exporter import InMemorySpanExporter

from vseam import config, fixtures, pipeline, reporting, utils

pytestmark = pytest.mark.vseam_slow


def _read(path: pathlib.Path) -> typing.Dict[str, typing.Any]:
    return typing.cast(typing.Dict[str, typing.Any], json.loads(path.read_text()))


def _skipped(span: ReadableSpan) -> typing.Any:
    return (span.attributes or {}).get("vseam.stage.skipped")


@pytest.fixture(scope="module")
def settings(tmp_path_factory: pytest.TempPathFactory) -> config.RunConfig:
    bench = fixtures.write_synthetic_benchmark(tmp_path_factory.mktemp("bench"))
    loaded = config.load_config(bench.config_path)
    return config.replace_section(
        loaded, "run", output_dir=tmp_path_factory.mktemp("runs")
    )


@pytest.fixture(scope="module")
def first_run(settings: config.RunConfig) -> pipeline.Pipeline:
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("_VSEAM_TEST", "true")
        run = pipeline.Pipeline(settings)
        run.run()
    return run


def test_run_layout(first_run: pipeline.Pipeline, settings: config.RunConfig) -> None:
    run_dir = first_run.run_dir

    assert run_dir == settings.run.output_dir / settings.hash[:12]
    assert sorted(p.name for p in run_dir.iterdir() if p.is_dir()) == [
        "00-validate",
        "01-edit",
        "02-filter",
        "03-patch",
        "04-heads",
        "05-select",
        "06-plan",
        "07-evaluate",
        "08-proportion",
        "10-significance",
        "11-report",
    ]
    summary = _read(run_dir / "run.json")
    assert reporting.validate_report(summary) == "run"
    assert summary["config_hash"] == settings.hash
    for name, stage in summary["stages"].items():
        manifest = _read(first_run.stage_dir(name) / "manifest.json")
        assert manifest["input_hash"] == stage["input_hash"]
        assert manifest["outputs"] == stage["outputs"]
        assert manifest["seed"] == 0
        for output, digest in manifest["outputs"].items():
            assert utils.sha256_file(first_run.stage_dir(name) / output) == digest
        logs = (first_run.stage_dir(name) / "logs.jsonl").read_text().splitlines()
        assert json.loads(logs[0])["message"] == "Stage started"
        assert json.loads(logs[-1])["message"] == "Stage finished"


def test_stage_results(first_run: pipeline.Pipeline) -> None:
    edit = _read(first_run.stage_dir("edit") / "edit.json")
    filtered = _read(first_run.stage_dir("filter") / "filter.json")
    assert len(filtered["kept"]) + len(filtered["excluded"]) == edit["accepted"]

    selection = _read(first_run.stage_dir("select") / "selection.json")
    assert [h["head"] for h in selection["positive"]] == ["L1.H2"]
    assert [h["head"] for h in selection["negative"]] == ["L3.H3"]

    evaluation = _read(first_run.stage_dir("evaluate") / "eval.json")
    averages = {s["strategy"]: s["average"] for s in evaluation["strategies"]}
    assert averages["original"] == pytest.approx(85.0)
    assert averages["wo-positive"] == pytest.approx(50.0)
    assert averages["wo-negative"] == pytest.approx(100.0)
    assert averages["rescaling"] == pytest.approx(100.0)

    significance = _read(
        first_run.stage_dir("significance") / "significance-rescaling.json"
    )
    assert significance["mean_delta_pp"] == pytest.approx(15.0, abs=2.0)
    assert significance["fold_size"] == 40

    report_dir = first_run.stage_dir("report")
    assert (report_dir / "grid-att.png").is_file()
    assert (report_dir / "lens-mlp.json").is_file()
    summary = (report_dir / "summary.txt").read_text()
    assert "- rescaling: 100.00%" in summary


def test_rerun_skips_every_stage(
    monkeypatch: pytest.MonkeyPatch,
    first_run: pipeline.Pipeline,
    settings: config.RunConfig,
) -> None:
    monkeypatch.setenv("_VSEAM_TEST", "true")
    before = (first_run.run_dir / "run.json").read_bytes()

    again = pipeline.Pipeline(settings)
    again.run()

    assert all(outcome.skipped for outcome in again.outcomes.values())
    assert set(again.outcomes) == set(first_run.outcomes)
    assert (again.run_dir / "run.json").read_bytes() == before
    exporter = again.tracer.exporter
    assert isinstance(exporter, InMemorySpanExporter)
    assert all(_skipped(span) is True for span in exporter.get_finished_spans())


def test_tampered_output_reruns_its_stage(
    first_run: pipeline.Pipeline, settings: config.RunConfig
) -> None:
    selection = first_run.stage_dir("select") / "selection.json"
    original = selection.read_bytes()
    selection.write_text("{}")

    again = pipeline.Pipeline(settings)
    again.run()

    assert again.outcomes["heads"].skipped
    assert not again.outcomes["select"].skipped
    assert selection.read_bytes() == original
    # Same selection, same digests: downstream stages stay cached.
    assert again.outcomes["plan"].skipped


def test_failing_stage(
    monkeypatch: pytest.MonkeyPatch,
    settings: config.RunConfig,
    tmp_path: pathlib.Path,
) -> None:
    def broken(
        self: pipeline.Pipeline, directory: pathlib.Path, logs: pipeline.LogsT
    ) -> typing.List[str]:
        raise RuntimeError("dataset vanished")

    monkeypatch.setattr(pipeline.Pipeline, "_validate", broken)
    run = pipeline.Pipeline(
        config.replace_section(settings, "run", output_dir=tmp_path)
    )

    with pytest.raises(utils.StageError) as excinfo:
        run.run()

    assert excinfo.value.stage == "validate"
    assert excinfo.value.manifest_path == run.stage_dir("validate") / "manifest.json"
    assert not excinfo.value.manifest_path.exists()
    logs = (run.stage_dir("validate") / "logs.jsonl").read_text().splitlines()
    failed = json.loads(logs[-1])
    assert failed["message"] == "Stage failed"
    assert failed["error"] == "dataset vanished"
    assert not (run.run_dir / "run.json").exists()


def test_stage_spans(first_run: pipeline.Pipeline) -> None:
    exporter = first_run.tracer.exporter
    assert isinstance(exporter, InMemorySpanExporter)

    spans = exporter.get_finished_spans()

    assert [span.name for span in spans] == [
        f"vseam.stage.{name}" for name in first_run.outcomes
    ]
    assert all(_skipped(span) is False for span in spans)
    resource = spans[0].resource.attributes
    assert resource["vseam.run.id"] == first_run.run_id
    assert resource["vseam.config.hash"] == first_run.config.hash
