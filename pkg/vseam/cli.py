"""Command-line entry point: `vseam <command> ...`.

Exit codes: 0 on success, 2 when an input, config or plan fails
validation, 3 when a computation or pipeline stage fails.
"""

import argparse
import json
import pathlib
import sys
import typing

from vseam import (
    clients,
    config,
    dataset,
    editing,
    fixtures,
    heads,
    interventions,
    lens,
    patching,
    pipeline,
    reporting,
    rescaling,
    significance,
    utils,
)
from vseam import model as _model

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3

HandlerT = typing.Callable[[argparse.Namespace], None]


def _read_json(path: pathlib.Path) -> typing.Dict[str, typing.Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise utils.ValidationError(f"Cannot read {path}: {e}")
    except ValueError as e:
        raise utils.ValidationError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise utils.ValidationError(f"{path} does not hold a JSON object")
    return data


def _read_report(path: pathlib.Path, kind: str) -> typing.Dict[str, typing.Any]:
    data = _read_json(path)
    found = reporting.validate_report(data)
    if found != kind:
        raise utils.ValidationError(f"{path} holds a `{found}` report, not `{kind}`")
    return data


def _model_handle(args: argparse.Namespace) -> _model.ModelHandle:
    return pipeline.build_model(
        config.ModelSection(
            preset=args.model_preset, path=args.model_path, seed=args.model_seed
        )
    )


def _load(
    args: argparse.Namespace, model: _model.ModelHandle
) -> typing.List[dataset.VQATriple]:
    return dataset.load_triples(args.dataset, model.vocabulary)


def _pick(
    triples: typing.Sequence[dataset.VQATriple], triple_id: typing.Optional[str]
) -> dataset.VQATriple:
    if not triples:
        raise utils.ValidationError("The dataset is empty")
    if triple_id is None:
        return triples[0]
    for triple in triples:
        if triple.id == triple_id:
            return triple
    raise utils.ValidationError(f"No triple with id `{triple_id}`")


def _position(value: str) -> lens.PositionT:
    if value in ("last", "all"):
        return typing.cast(lens.PositionT, value)
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"`{value}` is not last, all or an index")


def _emit(text: str) -> None:
    sys.stdout.write(text + "\n")


def cmd_dataset_validate(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    triples = _load(args, model)
    if args.out is not None:
        dataset.write_triples(args.out, triples)
    counts: typing.Dict[str, int] = {}
    for triple in triples:
        counts[triple.category] = counts.get(triple.category, 0) + 1
    _emit(f"✅ {len(triples)} triples validated")
    _emit(dataset.format_category_table(counts))


def cmd_dataset_filter(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    verdicts = dataset.causal_pair_verdicts(model, _load(args, model), args.workers)
    kept = [v.triple for v in verdicts if v.retained]
    dataset.write_triples(args.out, kept)
    if args.report is not None:
        reporting.write_report(
            args.report,
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
    _emit(f"🔎 Kept {len(kept)} of {len(verdicts)} causal pairs")


def cmd_dataset_balance(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    result = dataset.balance_and_stats(_load(args, model), seed=args.seed)
    dataset.write_triples(args.out, result.triples)
    if args.report is not None:
        reporting.write_report(args.report, result.to_json())
    _emit(result.make_report())


def cmd_dataset_synth(args: argparse.Namespace) -> None:
    benchmark = fixtures.write_synthetic_benchmark(args.out, seed=args.seed)
    _emit(
        f"🧩 Wrote {len(benchmark.triples)} triples to {benchmark.triples_path}"
        f" and {benchmark.config_path}"
    )


def cmd_edit(args: argparse.Namespace) -> None:
    settings: typing.Mapping[str, config.ClientSettingT] = {}
    if args.clients is not None:
        try:
            table = config.tomllib.loads(args.clients.read_text(encoding="utf-8"))
        except (OSError, config.tomllib.TOMLDecodeError) as e:
            raise config.ConfigError("clients", f"cannot load {args.clients}: {e}")
        settings = config.parse_clients(table.get("clients", {}))
    model = _model_handle(args)
    edited, results = editing.run_edits(
        _load(args, model),
        clients.make_clients(settings),
        args.out / "images",
        args.out / "edits.jsonl",
        threshold=args.qc_threshold,
        dilation=args.dilation,
        workers=args.workers,
    )
    dataset.write_triples(args.out / "triples.jsonl", edited)
    _emit(editing.make_report(results))


def cmd_patch(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    grid = patching.causal_score_grid(
        model,
        _load(args, model),
        args.tau,
        args.strategy,
        args.grouping,
        args.workers,
    )
    reporting.write_report(args.out, grid.to_json())
    if args.csv is not None:
        utils.atomic_write_text(args.csv, grid.to_csv())
    if args.heatmap is not None:
        reporting.render_heatmap(grid, args.heatmap)
    _emit(grid.make_report())


def cmd_heads_score(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    split = dataset.split_by_correctness(model, _load(args, model), args.workers)
    scores = heads.head_causal_scores(model, split, args.workers)
    utils.atomic_write_text(args.out, heads.scores_to_csv(scores))
    if args.json is not None:
        reporting.write_report(args.json, heads.scores_to_json(scores))
    _emit(
        f"🧠 Scored {len(scores)} heads on {len(split.correct)} correct"
        f" and {len(split.incorrect)} incorrect triples"
    )


def cmd_heads_select(args: argparse.Namespace) -> None:
    scores = heads.scores_from_csv(args.scores.read_text(encoding="utf-8"))
    selection = heads.select_key_heads(scores, args.k)
    reporting.write_report(args.out, selection.to_json())
    _emit(selection.make_report())


def cmd_heads_overlap(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    selection = heads.HeadSetSelection.from_json(_read_report(args.selection, "heads"))
    triples = [t for t in _load(args, model) if t.boxes]
    overlap = heads.overlap_by_polarity(model, triples, selection, args.workers)
    report = {"schema": "vseam.overlap/1", "n": len(triples), **overlap}
    if args.out is not None:
        reporting.write_report(args.out, report)
    for polarity, value in overlap.items():
        shown = "n/a" if value is None else f"{value:.4f}"
        _emit(f"- {polarity}: {shown}")


def cmd_rescale_build(args: argparse.Namespace) -> None:
    selection = heads.HeadSetSelection.from_json(_read_report(args.selection, "heads"))
    scores = None
    if args.scores is not None:
        scores = heads.scores_from_csv(args.scores.read_text(encoding="utf-8"))
    plan = rescaling.build_rescale_plan(
        selection, scores, source=args.source, seed=args.seed
    )
    reporting.write_report(args.out, plan.to_json())
    _emit(f"📐 Plan with {len(plan.entries)} heads written to {args.out}")


def _plan(path: pathlib.Path) -> rescaling.RescalePlan:
    return rescaling.RescalePlan.from_json(_read_report(path, "rescale-plan"))


def cmd_rescale_apply(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    plan = rescaling.plan_to_interventions(
        _plan(args.plan),
        args.strategy,
        model.num_layers,
        model.num_heads,
        seed=args.seed,
        random_count=args.random_count,
    )
    result = rescaling.evaluate_plan(
        model, _load(args, model), plan, args.strategy, True, args.workers
    )
    if args.out is not None:
        reporting.write_report(
            args.out,
            rescaling.EvalReport({args.strategy: result}, seed=args.seed).to_json(),
        )
    _emit(f"- {args.strategy}: {result.average:.2f}%")


def cmd_rescale_eval(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    report = rescaling.evaluate_strategies(
        model,
        _load(args, model),
        _plan(args.plan) if args.plan is not None else None,
        args.strategy or rescaling.STRATEGIES,
        sample_fraction=args.fraction,
        repeats=args.repeats,
        seed=args.seed,
        k=args.k,
        random_count=args.random_count,
        with_metrics=True,
        n_workers=args.workers,
    )
    reporting.write_report(args.out, report.to_json())
    if args.csv is not None:
        utils.atomic_write_text(args.csv, report.to_csv())
    _emit(report.make_report())


def cmd_rescale_proportion(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    report = rescaling.data_proportion_study(
        model,
        _load(args, model),
        args.fractions,
        repeats=args.repeats,
        seed=args.seed,
        k=args.k,
        n_workers=args.workers,
    )
    reporting.write_report(args.out, report.to_json())
    _emit(report.to_csv().rstrip("\n"))


def cmd_rescale_transfer(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    report = rescaling.transfer_study(
        model,
        _plan(args.plan),
        _load(args, model),
        args.source_name,
        args.target_name,
        seed=args.seed,
        n_workers=args.workers,
    )
    reporting.write_report(args.out, report.to_json())
    _emit(report.report.make_report())


def cmd_lens(args: argparse.Namespace) -> None:
    model = _model_handle(args)
    triple = _pick(_load(args, model), args.id)
    grids = lens.lens_grid(
        model,
        dataset.encode_triple(model, triple),
        args.tau,
        position=args.position,
        k=args.k,
        raw=args.raw,
    )
    if len(grids) == 1:
        reporting.write_report(args.out, grids[0].to_json())
    else:
        args.out.mkdir(parents=True, exist_ok=True)
        for grid in grids:
            path = args.out / f"lens-{grid.position}.json"
            reporting.write_report(path, grid.to_json())
    if args.heatmap is not None:
        reporting.render_heatmap(grids[-1], args.heatmap)
    for layer, row in enumerate(grids[-1].layers):
        _emit(f"L{layer}: " + ", ".join(entry.text for entry in row))


def cmd_report_significance(args: argparse.Namespace) -> None:
    evaluation = _read_report(args.eval, "eval")
    baseline_eval = (
        _read_report(args.baseline_eval, "eval")
        if args.baseline_eval is not None
        else evaluation
    )

    def correct(report: typing.Mapping[str, typing.Any], name: str) -> typing.Any:
        for result in report["strategies"]:
            if result["strategy"] == name:
                return result["correct"]
        raise utils.ValidationError(f"Strategy `{name}` is not in the evaluation")

    report = significance.bootstrap_compare(
        correct(evaluation, args.strategy),
        correct(baseline_eval, args.baseline),
        folds=args.folds,
        fold_size=args.fold_size,
        seed=args.seed,
        baseline=args.baseline,
        replace=not args.without_replacement,
    )
    if args.out is not None:
        reporting.write_report(args.out, report.to_json())
    _emit(report.make_report())


def cmd_report_heatmap(args: argparse.Namespace) -> None:
    data = _read_json(args.grid)
    kind = reporting.validate_report(data)
    grid: typing.Union[patching.CausalGrid, lens.LensGrid]
    if kind == "causal-grid":
        grid = patching.CausalGrid.from_json(data)
    elif kind == "lens":
        grid = lens.LensGrid.from_json(data)
    else:
        raise utils.ValidationError(f"Cannot draw a heatmap of a `{kind}` report")
    style = reporting.HeatmapStyle(title=args.title, dpi=args.dpi)
    layout = reporting.render_heatmap(grid, args.out, style)
    _emit(f"🖼️ {layout.width}×{layout.height} heatmap written to {layout.path}")


def cmd_run(args: argparse.Namespace) -> None:
    settings = config.load_config(args.config)
    if args.output_dir is not None:
        settings = config.replace_section(settings, "run", output_dir=args.output_dir)
    run_dir = pipeline.run_pipeline(settings)
    summary = run_dir / f"{pipeline.STAGES.index('report'):02d}-report" / "summary.txt"
    _emit(summary.read_text(encoding="utf-8").rstrip())
    _emit(f"📁 Run directory: {run_dir}")


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument(
        "--model-preset",
        choices=typing.get_args(config.ModelPresetT),
        default="color-probe",
        help="Bundled toy model to build",
    )
    group.add_argument(
        "--model-seed", type=int, default=0, help="Seed of the random preset"
    )
    group.add_argument(
        "--model-path", type=pathlib.Path, help="Load a saved toy model instead"
    )
    group.add_argument(
        "--workers", type=int, help="Worker threads (default: VSEAM_WORKERS or 1)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vseam",
        description="Causal patching, key-head discovery and head rescaling "
        "for vision-language models.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        subparsers: typing.Any, name: str, handler: HandlerT, summary: str
    ) -> argparse.ArgumentParser:
        sub: argparse.ArgumentParser = subparsers.add_parser(name, help=summary)
        sub.set_defaults(handler=handler)
        return sub

    def dataset_arg(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--dataset", "--in", dest="dataset", type=pathlib.Path, required=True
        )

    ds = commands.add_parser("dataset", help="Validate, filter and balance triples")
    ds_commands = ds.add_subparsers(dest="dataset_command", required=True)

    sub = command(ds_commands, "validate", cmd_dataset_validate, "Check a JSONL file")
    dataset_arg(sub)
    sub.add_argument("--out", type=pathlib.Path)
    _add_model_args(sub)

    sub = command(ds_commands, "filter", cmd_dataset_filter, "Keep causal pairs")
    dataset_arg(sub)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--report", type=pathlib.Path)
    _add_model_args(sub)

    sub = command(ds_commands, "balance", cmd_dataset_balance, "Balance yes/no")
    dataset_arg(sub)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--report", type=pathlib.Path)
    sub.add_argument("--seed", type=int, default=0)
    _add_model_args(sub)

    sub = command(ds_commands, "synth", cmd_dataset_synth, "Write the toy benchmark")
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--seed", type=int, default=0)

    sub = command(commands, "edit", cmd_edit, "Edit target regions of images")
    dataset_arg(sub)
    sub.add_argument("--clients", type=pathlib.Path, help="TOML with a [clients] table")
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--qc-threshold", type=float, default=editing.DEFAULT_QC_THRESHOLD)
    sub.add_argument("--dilation", type=int, default=editing.DEFAULT_DILATION)
    _add_model_args(sub)

    sub = command(commands, "patch", cmd_patch, "Layer × token causal grid")
    dataset_arg(sub)
    sub.add_argument("--tau", choices=interventions.MODULES, default="att")
    sub.add_argument(
        "--strategy",
        choices=typing.get_args(patching.StrategyT),
        default="bbox-patches",
    )
    sub.add_argument(
        "--grouping",
        choices=typing.get_args(patching.GroupingT),
        default="question-tokens",
    )
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--csv", type=pathlib.Path)
    sub.add_argument("--heatmap", type=pathlib.Path)
    _add_model_args(sub)

    hd = commands.add_parser("heads", help="Score, select and inspect heads")
    hd_commands = hd.add_subparsers(dest="heads_command", required=True)

    sub = command(hd_commands, "score", cmd_heads_score, "Causal score per head")
    dataset_arg(sub)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--json", type=pathlib.Path)
    _add_model_args(sub)

    sub = command(hd_commands, "select", cmd_heads_select, "Top-K key heads")
    sub.add_argument("--scores", type=pathlib.Path, required=True)
    sub.add_argument("--k", type=int, default=heads.DEFAULT_K)
    sub.add_argument("--out", type=pathlib.Path, required=True)

    sub = command(hd_commands, "overlap", cmd_heads_overlap, "In-box attention share")
    dataset_arg(sub)
    sub.add_argument("--selection", type=pathlib.Path, required=True)
    sub.add_argument("--out", type=pathlib.Path)
    _add_model_args(sub)

    rs = commands.add_parser("rescale", help="Build and evaluate rescaling plans")
    rs_commands = rs.add_subparsers(dest="rescale_command", required=True)

    sub = command(rs_commands, "build", cmd_rescale_build, "Selection → plan")
    sub.add_argument("--selection", type=pathlib.Path, required=True)
    sub.add_argument("--scores", type=pathlib.Path)
    sub.add_argument("--source")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", type=pathlib.Path, required=True)

    strategies = typing.get_args(rescaling.StrategyT)

    sub = command(rs_commands, "apply", cmd_rescale_apply, "Evaluate one strategy")
    dataset_arg(sub)
    sub.add_argument("--plan", type=pathlib.Path, required=True)
    sub.add_argument("--strategy", choices=strategies, default="rescaling")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument(
        "--random-count", type=int, default=rescaling.DEFAULT_RANDOM_COUNT
    )
    sub.add_argument("--out", type=pathlib.Path)
    _add_model_args(sub)

    sub = command(rs_commands, "eval", cmd_rescale_eval, "Compare strategies")
    dataset_arg(sub)
    sub.add_argument("--plan", type=pathlib.Path)
    sub.add_argument("--strategy", choices=strategies, action="append")
    sub.add_argument("--fraction", type=float, default=1.0)
    sub.add_argument("--repeats", type=int, default=rescaling.DEFAULT_REPEATS)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--k", type=int, default=heads.DEFAULT_K)
    sub.add_argument(
        "--random-count", type=int, default=rescaling.DEFAULT_RANDOM_COUNT
    )
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--csv", type=pathlib.Path)
    _add_model_args(sub)

    sub = command(
        rs_commands, "proportion", cmd_rescale_proportion, "Accuracy per data share"
    )
    dataset_arg(sub)
    sub.add_argument("--fractions", type=float, nargs="+", required=True)
    sub.add_argument("--repeats", type=int, default=rescaling.DEFAULT_REPEATS)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--k", type=int, default=heads.DEFAULT_K)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    _add_model_args(sub)

    sub = command(
        rs_commands, "transfer", cmd_rescale_transfer, "Apply a plan elsewhere"
    )
    dataset_arg(sub)
    sub.add_argument("--plan", type=pathlib.Path, required=True)
    sub.add_argument("--source-name", required=True)
    sub.add_argument("--target-name", required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    _add_model_args(sub)

    sub = command(commands, "lens", cmd_lens, "Top-k tokens per layer")
    dataset_arg(sub)
    sub.add_argument("--id", help="Triple id (default: first)")
    sub.add_argument("--tau", choices=interventions.MODULES, default="att")
    sub.add_argument("--position", type=_position, default="last")
    sub.add_argument("--k", type=int, default=lens.DEFAULT_K)
    sub.add_argument(
        "--raw", action="store_true", help="Project module outputs, not the stream"
    )
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--heatmap", type=pathlib.Path)
    _add_model_args(sub)

    rp = commands.add_parser("report", help="Significance tests and heatmaps")
    rp_commands = rp.add_subparsers(dest="report_command", required=True)

    sub = command(
        rp_commands, "significance", cmd_report_significance, "Bootstrap paired t"
    )
    sub.add_argument("--eval", type=pathlib.Path, required=True)
    sub.add_argument("--baseline-eval", type=pathlib.Path)
    sub.add_argument("--strategy", default="rescaling")
    sub.add_argument("--baseline", default="original")
    sub.add_argument("--folds", type=int, default=significance.DEFAULT_FOLDS)
    sub.add_argument("--fold-size", type=int, default=significance.DEFAULT_FOLD_SIZE)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--without-replacement", action="store_true")
    sub.add_argument("--out", type=pathlib.Path)

    sub = command(rp_commands, "heatmap", cmd_report_heatmap, "Render a grid")
    sub.add_argument("--grid", type=pathlib.Path, required=True)
    sub.add_argument("--out", type=pathlib.Path, required=True)
    sub.add_argument("--title")
    sub.add_argument("--dpi", type=int, default=reporting.HeatmapStyle.dpi)

    sub = command(commands, "run", cmd_run, "Run the whole pipeline")
    sub.add_argument("--config", type=pathlib.Path, required=True)
    sub.add_argument("--output-dir", type=pathlib.Path)

    return parser


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except utils.StageError as e:
        sys.stderr.write(f"❌ {e}\n")
        return EXIT_STAGE
    except utils.ValidationError as e:
        sys.stderr.write(f"⚠️ {e}\n")
        return EXIT_VALIDATION
    except OSError as e:
        sys.stderr.write(f"⚠️ {e}\n")
        return EXIT_VALIDATION
    except utils.VSeamError as e:
        sys.stderr.write(f"❌ {e}\n")
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
