import dataclasses
import datetime
import hashlib
import json
import os
import pathlib
import subprocess
import tempfile
import typing


class VSeamError(Exception):
    pass


class ValidationError(VSeamError):
    """Raised when an input, a plan or a configuration is not acceptable."""


class StageError(VSeamError):
    def __init__(self, stage: str, manifest_path: pathlib.Path, cause: str) -> None:
        super().__init__(f"Stage `{stage}` failed ({manifest_path}): {cause}")
        self.stage = stage
        self.manifest_path = manifest_path


class VSeamWarning(UserWarning):
    pass


@dataclasses.dataclass
class StructuredLog:
    message: str
    timestamp: datetime.datetime
    attributes: typing.Dict[str, typing.Any]

    @classmethod
    def make(cls, message: str, **kwargs: typing.Any) -> "StructuredLog":
        return cls(
            message=message,
            timestamp=datetime.datetime.now(datetime.timezone.utc),
            attributes=kwargs,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "timestamp": self.timestamp.isoformat(),
                "message": self.message,
                **self.attributes,
            },
            sort_keys=True,
        )


def is_env_true(env: str) -> bool:
    """
    Whether the user turned on a flag documented as a boolean.

    Anything unrecognised is off.
    """
    try:
        return strtobool(os.environ.get(env, "").strip())
    except ValueError:
        return False


def strtobool(string: str) -> bool:
    if string.lower() in {"y", "yes", "t", "true", "on", "1"}:
        return True

    if string.lower() in {"n", "no", "f", "false", "off", "0"}:
        return False

    raise ValueError(f"Could not convert '{string}' to boolean")


def get_attributes(
    mapping: typing.Dict[str, typing.Any],
) -> typing.Dict[str, typing.Union[str, int]]:
    attributes = {}
    for attr, (cast, env_or_callable) in mapping.items():
        value: typing.Optional[str]
        if callable(env_or_callable):
            value = env_or_callable()
        else:
            value = os.getenv(env_or_callable)
        if value is not None:
            attributes[attr] = cast(value)
    return attributes


def git(*args: str) -> typing.Optional[str]:
    try:
        return subprocess.check_output(
            ["git", *args],
            text=True,
            stderr=subprocess.DEVNULL,
        ).strip()
    except (subprocess.CalledProcessError, OSError):
        # OSError covers a machine with no git binary at all.
        return None


def canonical_json(obj: typing.Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: pathlib.Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(path: pathlib.Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        pathlib.Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path: pathlib.Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: pathlib.Path, obj: typing.Any) -> None:
    atomic_write_text(path, canonical_json(obj))


def worker_count() -> int:
    raw = os.environ.get("VSEAM_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"VSEAM_WORKERS must be an integer, got '{raw}'")
    if value < 1:
        raise ValidationError(f"VSEAM_WORKERS must be positive, got {value}")
    return value
