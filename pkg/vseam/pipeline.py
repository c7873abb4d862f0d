"""End-to-end runs as a chain of resumable stages.

Each stage writes into its own directory under the run directory together
with `manifest.json` (input hash, output digests, seed) and `logs.jsonl`.
A stage whose input hash is unchanged and whose outputs still match their
digests is skipped on the next run.
"""

import dataclasses
import json
import os
import pathlib
import typing
import warnings

from vseam import (
    clients,
    dataset,
    editing,
    fixtures,
    heads,
    interventions,
    lens,
    patching,
    reporting,
    rescaling,
    significance,
    tracing,
    utils,
)
from vseam import config as _config
from vseam import model as _model

STAGES = (
    "validate",
    "edit",
    "filter",
    "patch",
    "heads",
    "select",
    "plan",
    "evaluate",
    "proportion",
    "transfer",
    "significance",
    "report",
)

LogsT = typing.List[utils.StructuredLog]
StageFnT = typing.Callable[[pathlib.Path, LogsT], typing.Iterable[str]]


def build_model(settings: _config.ModelSection) -> _model.ModelHandle:
    if settings.path is not None:
        return _model.load_toy_vlm(settings.path)
    if settings.preset == "color-probe":
        return fixtures.build_color_probe_vlm()
    return _model.build_toy_vlm(seed=settings.seed)


def _read_json(path: pathlib.Path) -> typing.Dict[str, typing.Any]:
    return typing.cast(
        typing.Dict[str, typing.Any], json.loads(path.read_text(encoding="utf-8"))
    )


def _write_logs(
    directory: pathlib.Path, logs: typing.Sequence[utils.StructuredLog]
) -> None:
    text = "".join(log.to_json() + "\n" for log in logs)
    utils.atomic_write_text(directory / "logs.jsonl", text)


def _log(logs: LogsT, message: str, **kwargs: typing.Any) -> None:
    logs.append(utils.StructuredLog.make(message, **kwargs))


@dataclasses.dataclass(frozen=True)
class StageOutcome:
    name: str
    input_hash: str
    skipped: bool
    outputs: typing.Mapping[str, str]


@dataclasses.dataclass
class Pipeline:
    config: _config.RunConfig
    model: _model.ModelHandle = dataclasses.field(init=False)
    tracer: tracing.RunTracer = dataclasses.field(init=False)
    outcomes: typing.Dict[str, StageOutcome] = dataclasses.field(
        init=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        self.model = build_model(self.config.model)
        self.tracer = tracing.RunTracer(
            run_id=self.run_id,
            backend=self.model.backend_tag,
            config_hash=self.config.hash,
            seed=self.config.run.seed,
        )

    @property
    def run_id(self) -> str:
        return self.config.hash[:12]

    @property
    def run_dir(self) -> pathlib.Path:
        return self.config.run.output_dir / self.run_id

    @property
    def seed(self) -> int:
        return self.config.run.seed

    @property
    def workers(self) -> typing.Optional[int]:
        return self.config.run.workers

    def stage_dir(self, name: str) -> pathlib.Path:
        return self.run_dir / f"{STAGES.index(name):02d}-{name}"

    def input_hash(self, name: str, inputs: typing.Mapping[str, typing.Any]) -> str:
        payload = {
            "stage": name,
            "model": self.config.to_json()["model"],
            "seed": self.seed,
            "inputs": inputs,
            "upstream": {
                stage: dict(outcome.outputs)
                for stage, outcome in self.outcomes.items()
            },
        }
        return utils.sha256_bytes(utils.canonical_json(payload).encode("utf-8"))

    def completed_outputs(
        self, directory: pathlib.Path, input_hash: str
    ) -> typing.Optional[typing.Dict[str, str]]:
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            return None
        try:
            manifest = _read_json(manifest_path)
        except (OSError, ValueError):
            return None
        if manifest.get("input_hash") != input_hash:
            return None
        outputs: typing.Dict[str, str] = manifest.get("outputs", {})
        for name, digest in outputs.items():
            path = directory / name
            if not path.is_file() or utils.sha256_file(path) != digest:
                return None
        return outputs

    def stage(
        self, name: str, inputs: typing.Mapping[str, typing.Any], fn: StageFnT
    ) -> StageOutcome:
        directory = self.stage_dir(name)
        manifest_path = directory / "manifest.json"
        input_hash = self.input_hash(name, inputs)
        attributes = {"vseam.stage.input_hash": input_hash}
        with self.tracer.stage(name, **attributes) as span:
            previous = self.completed_outputs(directory, input_hash)
            if previous is not None:
                if span is not None:
                    span.set_attribute("vseam.stage.skipped", True)
                outcome = StageOutcome(name, input_hash, True, previous)
                self.outcomes[name] = outcome
                return outcome

            logs: LogsT = []
            _log(logs, "Stage started", stage=name)
            try:
                directory.mkdir(parents=True, exist_ok=True)
                if manifest_path.exists():
                    manifest_path.unlink()
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", utils.VSeamWarning)
                    files = sorted(fn(directory, logs))
                for warning in caught:
                    _log(logs, "Warning", stage=name, warning=str(warning.message))
                outputs = {f: utils.sha256_file(directory / f) for f in files}
            except utils.StageError:
                raise
            except Exception as e:
                _log(logs, "Stage failed", stage=name, error=str(e))
                _write_logs(directory, logs)
                raise utils.StageError(name, manifest_path, str(e)) from e

            _log(logs, "Stage finished", stage=name, outputs=len(outputs))
            _write_logs(directory, logs)
            reporting.write_report(
                manifest_path,
                {
                    "schema": "vseam.manifest/1",
                    "stage": name,
                    "input_hash": input_hash,
                    "outputs": outputs,
                    "seed": self.seed,
                },
            )
            if span is not None:
                span.set_attribute("vseam.stage.skipped", False)
                span.set_attribute("vseam.stage.outputs", len(outputs))
        outcome = StageOutcome(name, input_hash, False, outputs)
        self.outcomes[name] = outcome
        return outcome

    def run(self) -> pathlib.Path:
        try:
            self._run()
        finally:
            self.tracer.shutdown()
        return self.run_dir

    def _run(self) -> None:
        cfg = self.config
        settings = cfg.to_json()

        self.stage(
            "validate",
            {
                "dataset": utils.sha256_file(cfg.dataset.path),
                "balance": cfg.dataset.balance,
            },
            self._validate,
        )
        source = "validate"
        if cfg.edit.enabled:
            inputs = {"edit": settings["edit"], "clients": settings["clients"]}
            self.stage("edit", inputs, self._edit)
            source = "edit"
        self.stage(
            "filter",
            {"source": source},
            lambda directory, logs: self._filter(directory, logs, source),
        )
        self.stage("patch", settings["patch"], self._patch)
        self.stage("heads", {}, self._heads)
        self.stage("select", settings["heads"], self._select)
        self.stage("plan", {"source": cfg.dataset.name}, self._plan)
        self.stage("evaluate", settings["rescale"], self._evaluate)
        if cfg.rescale.fractions:
            self.stage("proportion", settings["rescale"], self._proportion)
        if cfg.dataset.transfer_path is not None:
            inputs = {
                "dataset": utils.sha256_file(cfg.dataset.transfer_path),
                "name": cfg.dataset.transfer_name,
            }
            self.stage("transfer", inputs, self._transfer)
        self.stage("significance", settings["significance"], self._significance)
        self.stage("report", settings["report"], self._report)

        reporting.write_report(
            self.run_dir / "run.json",
            {
                "schema": "vseam.run/1",
                "run_id": self.run_id,
                "config_hash": cfg.hash,
                "stages": {
                    name: {"input_hash": o.input_hash, "outputs": dict(o.outputs)}
                    for name, o in self.outcomes.items()
                },
            },
        )

    def _triples(self, stage: str) -> typing.List[dataset.VQATriple]:
        return dataset.load_triples(
            self.stage_dir(stage) / "triples.jsonl", self.model.vocabulary
        )

    def _scores(self) -> typing.List[heads.HeadScore]:
        path = self.stage_dir("heads") / "scores.csv"
        return heads.scores_from_csv(path.read_text(encoding="utf-8"))

    def _selection(self) -> heads.HeadSetSelection:
        return heads.HeadSetSelection.from_json(
            _read_json(self.stage_dir("select") / "selection.json")
        )

    def _rescale_plan(self) -> rescaling.RescalePlan:
        return rescaling.RescalePlan.from_json(
            _read_json(self.stage_dir("plan") / "plan.json")
        )

    def _validate(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.dataset
        triples = dataset.load_triples(settings.path, self.model.vocabulary)
        balance = dataset.balance_and_stats(triples, seed=self.seed)
        if settings.balance:
            triples = balance.triples
        _log(logs, "Dataset validated", triples=len(triples))
        dataset.write_triples(directory / "triples.jsonl", triples)
        reporting.write_report(directory / "balance.json", balance.to_json())
        return ["triples.jsonl", "balance.json"]

    def _edit(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        manifest = directory / "edits.jsonl"
        if manifest.exists():
            manifest.unlink()
        image_dir = directory / "images"
        edited, results = editing.run_edits(
            self._triples("validate"),
            clients.make_clients(self.config.clients),
            image_dir,
            manifest,
            threshold=self.config.edit.threshold,
            dilation=self.config.edit.dilation,
            workers=self.workers,
        )
        for result in results:
            if result.status != "accepted":
                _log(
                    logs, "Edit rejected", triple=result.triple_id, reason=result.reason
                )
        accepted = sum(r.status == "accepted" for r in results)
        dataset.write_triples(directory / "triples.jsonl", edited)
        reporting.write_report(
            directory / "edit.json",
            {
                "schema": "vseam.edit/1",
                "results": [
                    {
                        "triple_id": r.triple_id,
                        "status": r.status,
                        "qc_cosine": r.qc_cosine,
                        "reason": r.reason,
                    }
                    for r in results
                ],
                "accepted": accepted,
                "rejected": len(results) - accepted,
            },
        )
        edited_images = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
        return ["triples.jsonl", "edit.json", "edits.jsonl"] + [
            os.path.relpath(path, directory) for path in edited_images
        ]

    def _filter(
        self, directory: pathlib.Path, logs: LogsT, source: str
    ) -> typing.List[str]:
        verdicts = dataset.causal_pair_verdicts(
            self.model, self._triples(source), self.workers
        )
        kept = [v.triple for v in verdicts if v.retained]
        _log(logs, "Causal pairs filtered", kept=len(kept), total=len(verdicts))
        dataset.write_triples(directory / "triples.jsonl", kept)
        reporting.write_report(
            directory / "filter.json",
            {
                "schema": "vseam.filter/1",
                "kept": [t.id for t in kept],
                "excluded": [
                    {
                        "id": v.triple.id,
                        "answer": v.triple.answer,
                        "clean": v.clean,
                        "edited": v.edited,
                    }
                    for v in verdicts
                    if not v.retained
                ],
            },
        )
        return ["triples.jsonl", "filter.json"]

    def _patch(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.patch
        triples = self._triples("filter")
        files = []
        for module in settings.modules:
            grid = patching.causal_score_grid(
                self.model,
                triples,
                typing.cast(interventions.ModuleT, module),
                typing.cast(patching.StrategyT, settings.strategy),
                typing.cast(patching.GroupingT, settings.grouping),
                self.workers,
            )
            _log(logs, "Causal grid computed", tau=module, n=grid.n)
            reporting.write_report(directory / f"grid-{module}.json", grid.to_json())
            utils.atomic_write_text(directory / f"grid-{module}.csv", grid.to_csv())
            files += [f"grid-{module}.json", f"grid-{module}.csv"]
        return files

    def _heads(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        split = dataset.split_by_correctness(
            self.model, self._triples("validate"), self.workers
        )
        scores = heads.head_causal_scores(self.model, split, self.workers)
        _log(
            logs,
            "Heads scored",
            correct=len(split.correct),
            incorrect=len(split.incorrect),
        )
        utils.atomic_write_text(directory / "scores.csv", heads.scores_to_csv(scores))
        reporting.write_report(directory / "scores.json", heads.scores_to_json(scores))
        return ["scores.csv", "scores.json"]

    def _select(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        selection = heads.select_key_heads(self._scores(), self.config.heads.k)
        _log(
            logs,
            "Key heads selected",
            positive=[heads.format_head(h) for h in selection.positive_heads],
            negative=[heads.format_head(h) for h in selection.negative_heads],
        )
        reporting.write_report(directory / "selection.json", selection.to_json())
        return ["selection.json"]

    def _plan(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        plan = rescaling.build_rescale_plan(
            self._selection(),
            self._scores(),
            source=self.config.dataset.name,
            seed=self.seed,
        )
        reporting.write_report(directory / "plan.json", plan.to_json())
        return ["plan.json"]

    def _evaluate(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.rescale
        report = rescaling.evaluate_strategies(
            self.model,
            self._triples("validate"),
            self._rescale_plan(),
            typing.cast(typing.Sequence[rescaling.StrategyT], settings.strategies),
            seed=self.seed,
            k=self.config.heads.k,
            random_count=settings.random_count,
            with_metrics=True,
            n_workers=self.workers,
        )
        for name, result in report.results.items():
            _log(logs, "Strategy evaluated", strategy=name, average=result.average)
        reporting.write_report(directory / "eval.json", report.to_json())
        utils.atomic_write_text(directory / "eval.csv", report.to_csv())
        return ["eval.json", "eval.csv"]

    def _proportion(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.rescale
        report = rescaling.data_proportion_study(
            self.model,
            self._triples("validate"),
            settings.fractions,
            repeats=settings.repeats,
            seed=self.seed,
            k=self.config.heads.k,
            n_workers=self.workers,
        )
        reporting.write_report(directory / "proportion.json", report.to_json())
        utils.atomic_write_text(directory / "proportion.csv", report.to_csv())
        return ["proportion.json", "proportion.csv"]

    def _transfer(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.dataset
        target = dataset.load_triples(
            typing.cast(pathlib.Path, settings.transfer_path), self.model.vocabulary
        )
        report = rescaling.transfer_study(
            self.model,
            self._rescale_plan(),
            target,
            settings.name,
            settings.transfer_name,
            seed=self.seed,
            n_workers=self.workers,
        )
        reporting.write_report(directory / "transfer.json", report.to_json())
        utils.atomic_write_text(directory / "transfer.csv", report.report.to_csv())
        return ["transfer.json", "transfer.csv"]

    def _significance(
        self, directory: pathlib.Path, logs: LogsT
    ) -> typing.List[str]:
        settings = self.config.significance
        evaluation = _read_json(self.stage_dir("evaluate") / "eval.json")
        correct = {s["strategy"]: s["correct"] for s in evaluation["strategies"]}
        if settings.baseline not in correct:
            raise utils.ValidationError(
                f"Baseline `{settings.baseline}` was not evaluated"
            )
        files = []
        for strategy, results in correct.items():
            if strategy == settings.baseline:
                continue
            report = significance.bootstrap_compare(
                results,
                correct[settings.baseline],
                folds=settings.folds,
                fold_size=settings.fold_size,
                seed=self.seed,
                baseline=settings.baseline,
                replace=settings.replace,
            )
            _log(
                logs,
                "Significance computed",
                strategy=strategy,
                mean_delta_pp=report.mean_delta_pp,
                p_value=report.p_value,
            )
            name = f"significance-{strategy}.json"
            reporting.write_report(directory / name, report.to_json())
            files.append(name)
        return files

    def _report(self, directory: pathlib.Path, logs: LogsT) -> typing.List[str]:
        settings = self.config.report
        formats = settings.formats if settings.heatmaps else ()
        files: typing.List[str] = []
        sections = []
        triples = self._triples("filter")

        for module in self.config.patch.modules:
            grid = patching.CausalGrid.from_json(
                _read_json(self.stage_dir("patch") / f"grid-{module}.json")
            )
            sections.append(grid.make_report())
            for fmt in formats:
                reporting.render_heatmap(grid, directory / f"grid-{module}.{fmt}")
                files.append(f"grid-{module}.{fmt}")

            if not triples:
                continue
            sequence = dataset.encode_triple(self.model, triples[0])
            top = lens.lens_grid(
                self.model, sequence, typing.cast(interventions.ModuleT, module)
            )[0]
            reporting.write_report(directory / f"lens-{module}.json", top.to_json())
            files.append(f"lens-{module}.json")
            for fmt in formats:
                reporting.render_heatmap(top, directory / f"lens-{module}.{fmt}")
                files.append(f"lens-{module}.{fmt}")

        selection = self._selection()
        sections.append(selection.make_report())
        annotated = [t for t in self._triples("validate") if t.boxes]
        overlap = heads.overlap_by_polarity(
            self.model, annotated, selection, self.workers
        )
        reporting.write_report(
            directory / "overlap.json",
            {"schema": "vseam.overlap/1", "n": len(annotated), **overlap},
        )
        files.append("overlap.json")

        evaluation = _read_json(self.stage_dir("evaluate") / "eval.json")
        lines = [f"⚖️ Rescaling (seed {evaluation['seed']})"]
        for result in evaluation["strategies"]:
            lines.append(f"- {result['strategy']}: {result['average']:.2f}%")
        sections.append(os.linesep.join(lines))

        reports = sorted(self.stage_dir("significance").glob("significance-*.json"))
        for path in reports:
            data = _read_json(path)
            data.pop("schema")
            data["t_statistic"] = float(data["t_statistic"])
            sections.append(significance.SignificanceReport(**data).make_report())

        summary = (os.linesep * 2).join(sections) + os.linesep
        utils.atomic_write_text(directory / "summary.txt", summary)
        files.append("summary.txt")
        return files


def run_pipeline(config: _config.RunConfig) -> pathlib.Path:
    """Run every configured stage and return the run directory."""
    return Pipeline(config).run()
