import typing

from opentelemetry.sdk.resources import Resource, ResourceDetector
from opentelemetry.semconv._incubating.attributes import vcs_attributes

from vseam import utils


def _get_git_commit() -> typing.Optional[str]:
    return utils.git("rev-parse", "HEAD")


def _get_git_branch() -> typing.Optional[str]:
    return utils.git("rev-parse", "--abbrev-ref", "HEAD")


class GitResourceDetector(ResourceDetector):
    """Revision of the checkout a run was started from, if any."""

    OPENTELEMETRY_GIT_MAPPING = {
        vcs_attributes.VCS_REF_HEAD_NAME: (str, _get_git_branch),
        vcs_attributes.VCS_REF_HEAD_REVISION: (str, _get_git_commit),
    }

    def detect(self) -> Resource:
        return Resource(utils.get_attributes(self.OPENTELEMETRY_GIT_MAPPING))
