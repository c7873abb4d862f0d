import numpy as np
import torch
from opentelemetry.sdk.resources import Resource, ResourceDetector


class FrameworkResourceDetector(ResourceDetector):
    """Numerical framework versions, which bound bitwise reproducibility."""

    def detect(self) -> Resource:
        return Resource(
            {
                "vseam.framework.torch.version": torch.__version__,
                "vseam.framework.numpy.version": np.__version__,
            }
        )
