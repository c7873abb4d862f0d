"""TOML run configuration."""

import dataclasses
import pathlib
import sys
import typing

from vseam import utils

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ModelPresetT = typing.Literal["random", "color-probe"]


class ConfigError(utils.ValidationError):
    def __init__(self, field: str, problem: str) -> None:
        super().__init__(f"{field}: {problem}")
        self.field = field


@dataclasses.dataclass(frozen=True)
class RunSection:
    output_dir: pathlib.Path = pathlib.Path("runs")
    seed: int = 0
    workers: typing.Optional[int] = None


@dataclasses.dataclass(frozen=True)
class DatasetSection:
    path: pathlib.Path
    name: str = "dataset"
    balance: bool = False
    transfer_path: typing.Optional[pathlib.Path] = None
    transfer_name: str = "transfer"


@dataclasses.dataclass(frozen=True)
class ModelSection:
    backend: str = "toy"
    preset: ModelPresetT = "color-probe"
    path: typing.Optional[pathlib.Path] = None
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class EditSection:
    enabled: bool = False
    threshold: float = 0.85
    dilation: int = 2


@dataclasses.dataclass(frozen=True)
class PatchSection:
    modules: typing.Tuple[str, ...] = ("att", "mlp")
    strategy: str = "bbox-patches"
    grouping: str = "question-tokens"


@dataclasses.dataclass(frozen=True)
class HeadsSection:
    k: int = 10


@dataclasses.dataclass(frozen=True)
class RescaleSection:
    strategies: typing.Tuple[str, ...] = (
        "original",
        "wo-positive",
        "wo-negative",
        "random-remove",
        "rescaling",
    )
    fractions: typing.Tuple[float, ...] = ()
    repeats: int = 10
    random_count: int = 10


@dataclasses.dataclass(frozen=True)
class SignificanceSection:
    folds: int = 1000
    fold_size: int = 100
    baseline: str = "original"
    replace: bool = True


@dataclasses.dataclass(frozen=True)
class ReportSection:
    heatmaps: bool = True
    formats: typing.Tuple[str, ...] = ("png",)


ClientSettingT = typing.Union[str, typing.Mapping[str, typing.Any]]


@dataclasses.dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection
    run: RunSection = RunSection()
    model: ModelSection = ModelSection()
    edit: EditSection = EditSection()
    clients: typing.Mapping[str, ClientSettingT] = dataclasses.field(
        default_factory=dict
    )
    patch: PatchSection = PatchSection()
    heads: HeadsSection = HeadsSection()
    rescale: RescaleSection = RescaleSection()
    significance: SignificanceSection = SignificanceSection()
    report: ReportSection = ReportSection()
    source: typing.Optional[pathlib.Path] = dataclasses.field(
        default=None, compare=False
    )

    def to_json(self) -> typing.Dict[str, typing.Any]:
        def plain(value: typing.Any) -> typing.Any:
            if isinstance(value, pathlib.Path):
                return str(value)
            if isinstance(value, (tuple, list)):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        data = plain(dataclasses.asdict(self))
        data.pop("source")
        return typing.cast(typing.Dict[str, typing.Any], data)

    @property
    def hash(self) -> str:
        return utils.sha256_bytes(utils.canonical_json(self.to_json()).encode("utf-8"))


_SECTIONS: typing.Dict[str, typing.Type[typing.Any]] = {
    "run": RunSection,
    "dataset": DatasetSection,
    "model": ModelSection,
    "edit": EditSection,
    "patch": PatchSection,
    "heads": HeadsSection,
    "rescale": RescaleSection,
    "significance": SignificanceSection,
    "report": ReportSection,
}

_CLIENT_ROLES = ("segmenter", "inpainter", "language_model", "encoder")
_CLIENT_KEYS = {"url": str, "timeout": float, "retries": int, "backoff": float}


def _convert(
    value: typing.Any, hint: typing.Any, field: str, base: pathlib.Path
) -> typing.Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return _convert(value, inner, field, base)
    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(field, f"must be one of {', '.join(map(repr, args))}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(field, "must be an array")
        return tuple(
            _convert(v, args[0], f"{field}[{i}]", base) for i, v in enumerate(value)
        )
    if hint is pathlib.Path:
        if not isinstance(value, str):
            raise ConfigError(field, "must be a path string")
        path = pathlib.Path(value)
        return path if path.is_absolute() else base / path
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(field, "must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(field, "must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(field, "must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(field, "must be a string")
        return value
    raise ConfigError(field, f"unsupported type {hint}")


def _section(
    name: str, cls: typing.Type[typing.Any], table: typing.Any, base: pathlib.Path
) -> typing.Any:
    if not isinstance(table, dict):
        raise ConfigError(name, "must be a table")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in table:
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {}
    for key, field in fields.items():
        if key in table:
            kwargs[key] = _convert(table[key], hints[key], f"{name}.{key}", base)
        elif (
            field.default is dataclasses.MISSING
            and field.default_factory is dataclasses.MISSING
        ):
            raise ConfigError(f"{name}.{key}", "is required")
    return cls(**kwargs)


def parse_clients(table: typing.Any) -> typing.Dict[str, ClientSettingT]:
    if not isinstance(table, dict):
        raise ConfigError("clients", "must be a table")
    result: typing.Dict[str, ClientSettingT] = {}
    for role, setting in table.items():
        field = f"clients.{role}"
        if role not in _CLIENT_ROLES:
            raise ConfigError(field, "unknown client role")
        if setting == "stub":
            result[role] = "stub"
            continue
        if not isinstance(setting, dict) or "url" not in setting:
            raise ConfigError(field, 'must be "stub" or a table with a url')
        for key, value in setting.items():
            if key not in _CLIENT_KEYS:
                raise ConfigError(f"{field}.{key}", "unknown key")
            _convert(value, _CLIENT_KEYS[key], f"{field}.{key}", pathlib.Path("."))
        result[role] = dict(setting)
    return result


def _check(config: RunConfig) -> None:
    paths = {
        "dataset.path": config.dataset.path,
        "dataset.transfer_path": config.dataset.transfer_path,
        "model.path": config.model.path,
    }
    for field, path in paths.items():
        if path is not None and not path.exists():
            raise ConfigError(field, f"{path} does not exist")
    positive = {
        "run.workers": config.run.workers,
        "heads.k": config.heads.k,
        "rescale.repeats": config.rescale.repeats,
        "significance.folds": config.significance.folds,
        "significance.fold_size": config.significance.fold_size,
    }
    for field, value in positive.items():
        if value is not None and value < 1:
            raise ConfigError(field, "must be positive")
    for i, fraction in enumerate(config.rescale.fractions):
        if not 0 < fraction <= 1:
            raise ConfigError(f"rescale.fractions[{i}]", "must lie in (0, 1]")
    if not 0 <= config.edit.threshold <= 1:
        raise ConfigError("edit.threshold", "must lie in [0, 1]")
    if config.model.backend != "toy":
        raise ConfigError("model.backend", "only the toy backend is bundled")
    for i, module in enumerate(config.patch.modules):
        if module not in ("att", "mlp"):
            raise ConfigError(f"patch.modules[{i}]", "must be att or mlp")
    for i, fmt in enumerate(config.report.formats):
        if fmt not in ("png", "svg"):
            raise ConfigError(f"report.formats[{i}]", "must be png or svg")


def parse_config(
    data: typing.Mapping[str, typing.Any], base: pathlib.Path
) -> RunConfig:
    for key in data:
        if key not in _SECTIONS and key != "clients":
            raise ConfigError(key, "unknown section")
    if "dataset" not in data:
        raise ConfigError("dataset", "section is required")
    sections = {
        name: _section(name, cls, data[name], base)
        for name, cls in _SECTIONS.items()
        if name in data
    }
    config = RunConfig(clients=parse_clients(data.get("clients", {})), **sections)
    _check(config)
    return config


def replace_section(config: RunConfig, name: str, **changes: typing.Any) -> RunConfig:
    if name not in _SECTIONS:
        raise ConfigError(name, "unknown section")
    section = dataclasses.replace(getattr(config, name), **changes)
    return dataclasses.replace(config, **{name: section})


def load_config(path: pathlib.Path) -> RunConfig:
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("<file>", f"invalid TOML in {path}: {e}")
    config = parse_config(data, path.parent.resolve())
    return dataclasses.replace(config, source=path)
