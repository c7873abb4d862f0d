"""Interfaces to the external editing tools, with deterministic stubs."""

import base64
import dataclasses
import re
import typing

import numpy as np
import requests
import requests.adapters
from urllib3.util.retry import Retry

from vseam import images, utils

COLOR_RGB: typing.Dict[str, typing.Tuple[int, int, int]] = {
    "red": (200, 30, 30),
    "blue": (30, 30, 200),
    "green": (30, 220, 30),
    "black": (20, 20, 20),
    "white": (235, 235, 235),
    "gray": (128, 128, 128),
}

# Word swaps the stub language model applies to the queried question.
COUNTERFACTUAL_SWAPS = {
    "red": "blue",
    "blue": "red",
    "green": "red",
    "black": "white",
    "white": "black",
    "wood": "metal",
    "metal": "wood",
    "cat": "dog",
    "dog": "cat",
    "car": "bus",
    "bus": "car",
    "chair": "table",
    "table": "chair",
    "left": "right",
    "right": "left",
    "under": "above",
    "above": "under",
    "riding": "feeding",
    "holding": "throwing",
}


class ClientError(utils.VSeamError):
    def __init__(self, client: str, message: str) -> None:
        super().__init__(f"{client}: {message}")
        self.client = client


class Segmenter(typing.Protocol):
    name: str

    def segment(self, image: np.ndarray, box: images.Box) -> np.ndarray: ...


class Inpainter(typing.Protocol):
    name: str

    def inpaint(
        self, image: np.ndarray, mask: np.ndarray, prompt: str
    ) -> np.ndarray: ...


class LanguageModel(typing.Protocol):
    name: str

    def complete(self, prompt: str) -> str: ...


class FeatureEncoder(typing.Protocol):
    name: str

    def encode(self, image: np.ndarray) -> np.ndarray: ...


@dataclasses.dataclass
class StubSegmenter:
    name: str = "stub-segmenter"

    def segment(self, image: np.ndarray, box: images.Box) -> np.ndarray:
        mask = np.zeros(image.shape[:2], dtype=bool)
        mask[box.y0 : box.y1, box.x0 : box.x1] = True
        return mask


@dataclasses.dataclass
class StubInpainter:
    name: str = "stub-inpainter"

    def inpaint(self, image: np.ndarray, mask: np.ndarray, prompt: str) -> np.ndarray:
        words = re.findall(r"[a-z]+", prompt.lower())
        color = next((COLOR_RGB[w] for w in words if w in COLOR_RGB), COLOR_RGB["gray"])
        edited = image.copy()
        edited[mask] = color
        return edited


@dataclasses.dataclass
class StubLanguageModel:
    name: str = "stub-language-model"
    swaps: typing.Mapping[str, str] = dataclasses.field(
        default_factory=lambda: dict(COUNTERFACTUAL_SWAPS)
    )

    def complete(self, prompt: str) -> str:
        queries = re.findall(r"Original Question:\s*(.*?)\s*Answer:", prompt)
        if not queries:
            return ""
        question = queries[-1]
        words = question.split(" ")
        for i, word in enumerate(words):
            bare = word.strip("?.,").lower()
            if bare in self.swaps:
                words[i] = word.lower().replace(bare, self.swaps[bare])
                break
        return " ".join(words)


@dataclasses.dataclass
class StubEncoder:
    name: str = "stub-encoder"
    grid: int = 4

    def encode(self, image: np.ndarray) -> np.ndarray:
        return images.patch_means(image, self.grid).ravel()


def _b64png(array: np.ndarray) -> str:
    return base64.b64encode(images.encode_png(array)).decode("ascii")


def _from_b64png(data: str) -> np.ndarray:
    return images.decode_png(base64.b64decode(data))


@dataclasses.dataclass
class HTTPToolClient:
    name: str
    url: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    session: requests.Session = dataclasses.field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.session = requests.Session()
        retry = Retry(
            total=self.retries,
            backoff_factor=self.backoff,
            status_forcelist=(429, 500, 502, 503, 504),
            allowed_methods=frozenset({"POST"}),
            raise_on_status=False,
        )
        self.session.mount(self.url, requests.adapters.HTTPAdapter(max_retries=retry))

    def _post(self, endpoint: str, payload: typing.Dict[str, typing.Any]) -> typing.Any:
        try:
            response = self.session.post(
                f"{self.url.rstrip('/')}/{endpoint}",
                json=payload,
                timeout=self.timeout,
            )
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            raise ClientError(self.name, f"request to `{endpoint}` failed: {e}")
        except ValueError as e:
            raise ClientError(self.name, f"invalid response from `{endpoint}`: {e}")

    def _field(self, body: typing.Any, key: str) -> typing.Any:
        try:
            return body[key]
        except (KeyError, TypeError):
            raise ClientError(self.name, f"response has no `{key}`")

    def provenance(self) -> typing.Dict[str, typing.Any]:
        return {"name": self.name, "url": self.url, "timeout": self.timeout}


class HTTPSegmenter(HTTPToolClient):
    def segment(self, image: np.ndarray, box: images.Box) -> np.ndarray:
        body = self._post(
            "segment",
            {"image": _b64png(image), "box": [box.x0, box.y0, box.x1, box.y1]},
        )
        mask = _from_b64png(self._field(body, "mask"))
        if mask.ndim == 3:
            mask = mask[..., 0]
        return mask > 0


class HTTPInpainter(HTTPToolClient):
    def inpaint(self, image: np.ndarray, mask: np.ndarray, prompt: str) -> np.ndarray:
        body = self._post(
            "inpaint",
            {
                "image": _b64png(image),
                "mask": _b64png(mask.astype(np.uint8) * 255),
                "prompt": prompt,
            },
        )
        edited = _from_b64png(self._field(body, "image"))
        if edited.shape != image.shape:
            raise ClientError(
                self.name, f"returned shape {edited.shape}, expected {image.shape}"
            )
        return edited.astype(np.uint8)


class HTTPLanguageModel(HTTPToolClient):
    def complete(self, prompt: str) -> str:
        return str(self._field(self._post("complete", {"prompt": prompt}), "text"))


class HTTPEncoder(HTTPToolClient):
    def encode(self, image: np.ndarray) -> np.ndarray:
        body = self._post("encode", {"image": _b64png(image)})
        try:
            return np.asarray(self._field(body, "features"), dtype=np.float64)
        except (TypeError, ValueError):
            raise ClientError(self.name, "features are not a numeric vector")


@dataclasses.dataclass
class ClientSet:
    segmenter: Segmenter = dataclasses.field(default_factory=StubSegmenter)
    inpainter: Inpainter = dataclasses.field(default_factory=StubInpainter)
    language_model: LanguageModel = dataclasses.field(default_factory=StubLanguageModel)
    encoder: FeatureEncoder = dataclasses.field(default_factory=StubEncoder)

    def provenance(self) -> typing.Dict[str, typing.Any]:
        result = {}
        for role in ("segmenter", "inpainter", "language_model", "encoder"):
            client = getattr(self, role)
            if isinstance(client, HTTPToolClient):
                result[role] = client.provenance()
            else:
                result[role] = {"name": client.name}
        return result


_HTTP_CLIENTS: typing.Dict[str, typing.Type[HTTPToolClient]] = {
    "segmenter": HTTPSegmenter,
    "inpainter": HTTPInpainter,
    "language_model": HTTPLanguageModel,
    "encoder": HTTPEncoder,
}


def make_clients(
    settings: typing.Mapping[str, typing.Union[str, typing.Mapping[str, typing.Any]]],
) -> ClientSet:
    """Build a ClientSet from `"stub"` or a `{url, timeout, ...}` table per role."""
    clients = ClientSet()
    for role, setting in settings.items():
        if role not in _HTTP_CLIENTS:
            raise utils.ValidationError(f"Unknown client role `{role}`")
        if setting == "stub":
            continue
        if not isinstance(setting, typing.Mapping) or "url" not in setting:
            raise utils.ValidationError(
                f"Client `{role}` must be \"stub\" or a table with a `url`"
            )
        client = _HTTP_CLIENTS[role](
            name=f"http-{role.replace('_', '-')}",
            url=str(setting["url"]),
            timeout=float(setting.get("timeout", 30.0)),
            retries=int(setting.get("retries", 3)),
            backoff=float(setting.get("backoff", 0.5)),
        )
        setattr(clients, role, client)
    return clients
