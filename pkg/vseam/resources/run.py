import dataclasses
import typing

from opentelemetry.sdk.resources import Resource, ResourceDetector

from vseam import utils


@dataclasses.dataclass
class RunResourceDetector(ResourceDetector):
    """Identity of one pipeline run."""

    run_id: str
    backend: str
    config_hash: str
    seed: typing.Optional[int] = None

    OPENTELEMETRY_RUN_MAPPING = {
        "vseam.run.label": (str, "VSEAM_RUN_LABEL"),
    }

    def __post_init__(self) -> None:
        super().__init__()

    def detect(self) -> Resource:
        attributes: typing.Dict[str, typing.Union[str, int]] = {
            "vseam.run.id": self.run_id,
            "vseam.model.backend": self.backend,
            "vseam.config.hash": self.config_hash,
        }
        if self.seed is not None:
            attributes["vseam.model.seed"] = self.seed
        attributes.update(utils.get_attributes(self.OPENTELEMETRY_RUN_MAPPING))
        return Resource(attributes)
