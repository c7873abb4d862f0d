"""Heatmap rendering and report schema checks."""

import dataclasses
import pathlib
import re
import typing

import matplotlib

matplotlib.use("Agg")

import matplotlib.colors  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from vseam import lens, patching, utils  # noqa: E402

FormatT = typing.Literal["png", "svg"]
# Values, column labels, row labels, cell labels and whether the scale diverges.
PayloadT = typing.Tuple[
    np.ndarray, typing.List[str], typing.List[str], typing.List[typing.List[str]], bool
]

_SCHEMA_RE = re.compile(r"^vseam\.([a-z-]+)/(\d+)$")

REPORT_SCHEMAS: typing.Dict[str, typing.Tuple[str, ...]] = {
    "balance": ("seed", "total", "categories"),
    "causal-grid": ("tau", "layers", "groups", "values", "n"),
    "edit": ("results", "accepted", "rejected"),
    "eval": ("sample_fraction", "seed", "strategies"),
    "filter": ("kept", "excluded"),
    "head-scores": ("scores",),
    "heads": ("k", "positive", "negative", "dropped_overlap"),
    "lens": ("tau", "position", "k", "source", "layers"),
    "manifest": ("stage", "input_hash", "outputs", "seed"),
    "overlap": ("positive", "negative", "n"),
    "proportion": ("rows", "repeats", "seed"),
    "rescale-plan": ("entries", "meta"),
    "run": ("run_id", "stages", "config_hash"),
    "significance": (
        "baseline",
        "mean_delta_pp",
        "sd",
        "t_statistic",
        "p_value",
        "folds",
        "fold_size",
        "seed",
    ),
    "transfer": ("source", "target", "evaluation"),
}


def validate_report(obj: typing.Any) -> str:
    """Check a JSON report against its declared schema; return its kind."""
    if not isinstance(obj, dict):
        raise utils.ValidationError("A report must be a JSON object")
    match = _SCHEMA_RE.match(str(obj.get("schema", "")))
    if match is None:
        raise utils.ValidationError(
            f"Missing or malformed schema tag: {obj.get('schema')!r}"
        )
    kind, version = match.group(1), int(match.group(2))
    if kind not in REPORT_SCHEMAS or version != 1:
        raise utils.ValidationError(f"Unknown report schema `{obj['schema']}`")
    missing = [key for key in REPORT_SCHEMAS[kind] if key not in obj]
    if missing:
        raise utils.ValidationError(f"`{kind}` report lacks {', '.join(missing)}")
    if kind == "causal-grid":
        rows = obj["values"]
        if len(rows) != len(obj["layers"]) or any(
            len(row) != len(obj["groups"]) for row in rows
        ):
            raise utils.ValidationError(
                "Grid values do not match its layer and group axes"
            )
    if kind == "lens" and any(len(row) > obj["k"] for row in obj["layers"]):
        raise utils.ValidationError("Lens rows hold more than k entries")
    return kind


def write_report(path: pathlib.Path, obj: typing.Dict[str, typing.Any]) -> None:
    validate_report(obj)
    utils.write_json(path, obj)


@dataclasses.dataclass(frozen=True)
class HeatmapStyle:
    cmap: str = "RdBu_r"
    lens_cmap: str = "viridis"
    dpi: int = 100
    cell_inches: float = 0.6
    annotate: bool = True
    title: typing.Optional[str] = None


@dataclasses.dataclass(frozen=True)
class HeatmapLayout:
    path: pathlib.Path
    width: int
    height: int
    # (row, col) → pixel centre, origin top-left.
    centers: typing.Mapping[typing.Tuple[int, int], typing.Tuple[int, int]]


def _payload(
    grid: typing.Union[patching.CausalGrid, lens.LensGrid],
) -> PayloadT:
    if isinstance(grid, patching.CausalGrid):
        values = grid.as_array()
        labels = [[f"{v:+.2f}" for v in row] for row in values]
        rows = [f"L{layer}" for layer in grid.layers]
        return values, list(grid.groups), rows, labels, True
    values = np.array([[e.logit for e in row] for row in grid.layers], dtype=np.float64)
    labels = [[e.text for e in row] for row in grid.layers]
    columns = [f"#{i + 1}" for i in range(values.shape[1])]
    rows = [f"L{layer}" for layer in range(len(grid.layers))]
    return values, columns, rows, labels, False


def render_heatmap(
    grid: typing.Union[patching.CausalGrid, lens.LensGrid],
    path: pathlib.Path,
    style: HeatmapStyle = HeatmapStyle(),
) -> HeatmapLayout:
    """Layers on rows; Δlogit grids use a diverging map centred at zero."""
    values, columns, rows, labels, diverging = _payload(grid)
    if values.size == 0:
        raise utils.ValidationError("Cannot render an empty grid")
    fmt: FormatT = "svg" if path.suffix.lower() == ".svg" else "png"

    if diverging:
        bound = float(np.max(np.abs(values))) or 1.0
        norm = matplotlib.colors.Normalize(vmin=-bound, vmax=bound)
        cmap = style.cmap
    else:
        norm = matplotlib.colors.Normalize(
            vmin=float(values.min()), vmax=float(values.max()) or 1.0
        )
        cmap = style.lens_cmap

    height, width = values.shape
    with matplotlib.rc_context({"svg.hashsalt": "vseam", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(
            figsize=(
                max(2.0, style.cell_inches * width + 1.5),
                max(1.5, style.cell_inches * height + 1.0),
            ),
            dpi=style.dpi,
        )
        try:
            ax.imshow(
                values, cmap=cmap, norm=norm, aspect="auto", interpolation="nearest"
            )
            ax.set_xticks(range(width), labels=columns, rotation=45, ha="right")
            ax.set_yticks(range(height), labels=rows)
            if style.title:
                ax.set_title(style.title)
            if style.annotate:
                for r in range(height):
                    for c in range(width):
                        ax.text(
                            c, r, labels[r][c], ha="center", va="center", fontsize=7
                        )
            fig.tight_layout()
            fig.canvas.draw()
            pixel_width, pixel_height = fig.canvas.get_width_height()
            centers = {}
            for r in range(height):
                for c in range(width):
                    x, y = ax.transData.transform((c, r))
                    centers[(r, c)] = (int(round(x)), int(round(pixel_height - y)))

            path.parent.mkdir(parents=True, exist_ok=True)
            metadata: typing.Dict[str, typing.Optional[str]]
            if fmt == "svg":
                metadata = {"Date": None, "Creator": None}
            else:
                metadata = {"Software": None}
            tmp = path.with_name(f".{path.name}.tmp")
            fig.savefig(tmp, format=fmt, dpi=style.dpi, metadata=metadata)
            tmp.replace(path)
        finally:
            plt.close(fig)
    return HeatmapLayout(path, pixel_width, pixel_height, centers)
