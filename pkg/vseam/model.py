"""Intervention-capable model abstraction and the bundled toy VLM."""

import copy
import dataclasses
import json
import math
import pathlib
import re
import struct
import threading
import typing

import numpy as np
import torch

from vseam import interventions, utils

ModalityT = typing.Literal["image", "text"]
BackendT = typing.Literal["toy", "external-adapter"]
AnswerT = typing.Literal["yes", "no"]

DTYPE = torch.float64

TOY_MAGIC = b"VSEAMTOY"
TOY_CONTAINER_VERSION = 1

# The toy word list; words outside it encode to `<unk>`.
DEFAULT_WORDS = (
    "<unk>", "yes", "no", ".", "?", ",", "is", "are", "there", "the", "a",
    "an", "this", "picture", "image", "of", "in", "on", "to", "made", "left",
    "right", "under", "above", "top", "next", "behind", "object", "block",
    "tile", "shirt", "person", "cat", "dog", "horse", "car", "bus", "bicycle",
    "chair", "table", "sofa", "cup", "book", "ball", "red", "blue", "green",
    "black", "white", "gray", "wood", "metal", "riding", "holding", "feeding",
    "throwing", "tennis", "racket", "answer", "question", "please", "using",
    "or", "and",
)  # fmt: skip

_WORD_RE = re.compile(r"[a-z0-9<>]+|[^\sa-z0-9]")


class InvalidDimensionError(utils.ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class ToyVLMConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 32
    head_dim: int = 8
    vocab_size: int = 64
    image_token_count: int = 16
    max_context: int = 64
    mlp_ratio: int = 4
    identical_heads: bool = False

    def __post_init__(self) -> None:
        if self.num_heads * self.head_dim != self.hidden_dim:
            raise InvalidDimensionError(
                f"num_heads·head_dim must equal hidden_dim: "
                f"{self.num_heads}·{self.head_dim} != {self.hidden_dim}"
            )
        for name in ("num_layers", "num_heads", "hidden_dim", "head_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise InvalidDimensionError(f"{name} must be positive")
        grid = math.isqrt(self.image_token_count)
        if grid * grid != self.image_token_count:
            raise InvalidDimensionError(
                f"image_token_count must be a square, got {self.image_token_count}"
            )
        if self.image_token_count >= self.max_context:
            raise InvalidDimensionError("image block does not fit in max_context")

    @property
    def image_grid(self) -> int:
        return math.isqrt(self.image_token_count)


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    tokens: typing.Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise utils.ValidationError("Vocabulary tokens must be unique")

    @classmethod
    def default(cls, size: int = 64) -> "Vocabulary":
        words = DEFAULT_WORDS[:size]
        padding = tuple(f"<tok{i}>" for i in range(len(words), size))
        return cls(words + padding)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.tokens.index("<unk>")

    def split(self, text: str) -> typing.List[str]:
        return _WORD_RE.findall(text.lower())

    def encode(self, text: str) -> typing.List[int]:
        index = {token: i for i, token in enumerate(self.tokens)}
        return [index.get(word, self.unk_id) for word in self.split(text)]

    def token_id(self, word: str) -> typing.Optional[int]:
        """The id of `word` if it is a single known token."""
        words = self.split(word)
        if len(words) != 1 or words[0] not in self.tokens:
            return None
        return self.tokens.index(words[0])

    def text(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclasses.dataclass(frozen=True)
class TokenSequence:
    ids: typing.Tuple[int, ...]
    modalities: typing.Tuple[ModalityT, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.ids:
            raise utils.ValidationError("Token sequence is empty")
        if len(self.ids) != len(self.modalities):
            raise utils.ValidationError(
                f"{len(self.ids)} token ids but {len(self.modalities)} modality tags"
            )
        image = self.image_positions
        if image and image != tuple(range(image[0], image[-1] + 1)):
            raise utils.ValidationError(
                "Image positions must form one contiguous block"
            )

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def image_positions(self) -> typing.Tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.modalities) if m == "image")

    @property
    def text_positions(self) -> typing.Tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.modalities) if m == "text")


@dataclasses.dataclass(frozen=True)
class ActivationCache:
    """Activations captured by one forward pass, per layer.

    `resid_mid` is H_att (state after the attention sublayer) and
    `resid_post` is H_mlp (block output). `head_out` holds the per-head
    context vectors before the output projection, shape T×H×d_h.
    """

    resid_pre: typing.Tuple[torch.Tensor, ...]
    head_out: typing.Tuple[torch.Tensor, ...]
    attn_out: typing.Tuple[torch.Tensor, ...]
    resid_mid: typing.Tuple[torch.Tensor, ...]
    mlp_out: typing.Tuple[torch.Tensor, ...]
    resid_post: typing.Tuple[torch.Tensor, ...]
    pattern: typing.Optional[typing.Tuple[torch.Tensor, ...]] = None

    @property
    def num_layers(self) -> int:
        return len(self.resid_post)

    @property
    def length(self) -> int:
        return int(self.resid_post[0].shape[0])

    def hidden(self, layer: int, module: interventions.ModuleT) -> torch.Tensor:
        return self.resid_mid[layer] if module == "att" else self.resid_post[layer]

    def output(self, layer: int, module: interventions.ModuleT) -> torch.Tensor:
        return self.attn_out[layer] if module == "att" else self.mlp_out[layer]

    def head(self, layer: int, head: int) -> torch.Tensor:
        return self.head_out[layer][:, head]

    def attention(self, layer: int, head: int) -> torch.Tensor:
        if self.pattern is None:
            raise utils.ValidationError("Attention weights were not captured")
        return self.pattern[layer][head]

    def with_hidden(
        self, layer: int, module: interventions.ModuleT, value: torch.Tensor
    ) -> "ActivationCache":
        field = "resid_mid" if module == "att" else "resid_post"
        tensors = list(getattr(self, field))
        tensors[layer] = value.detach().clone()
        return dataclasses.replace(self, **{field: tuple(tensors)})


class HookPoint(torch.nn.Module):
    """Identity module that forward hooks attach to."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class ToyAttention(torch.nn.Module):
    def __init__(self, config: ToyVLMConfig) -> None:
        super().__init__()
        shape_in = (config.num_heads, config.hidden_dim, config.head_dim)
        self.W_Q = torch.nn.Parameter(torch.zeros(shape_in, dtype=DTYPE))
        self.W_K = torch.nn.Parameter(torch.zeros(shape_in, dtype=DTYPE))
        self.W_V = torch.nn.Parameter(torch.zeros(shape_in, dtype=DTYPE))
        self.W_O = torch.nn.Parameter(
            torch.zeros(
                (config.num_heads, config.head_dim, config.hidden_dim), dtype=DTYPE
            )
        )
        self.scale = 1.0 / math.sqrt(config.head_dim)
        self.hook_pattern = HookPoint()
        self.hook_head_out = HookPoint()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q = torch.einsum("td,hde->hte", x, self.W_Q)
        k = torch.einsum("td,hde->hte", x, self.W_K)
        v = torch.einsum("td,hde->hte", x, self.W_V)
        scores = torch.einsum("hte,hse->hts", q, k) * self.scale
        length = x.shape[0]
        future = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        pattern = self.hook_pattern(torch.softmax(scores, dim=-1))
        head_out = self.hook_head_out(torch.einsum("hts,hse->the", pattern, v))
        return torch.einsum("the,hed->td", head_out, self.W_O)


class ToyBlock(torch.nn.Module):
    def __init__(self, config: ToyVLMConfig) -> None:
        super().__init__()
        width = config.hidden_dim * config.mlp_ratio
        self.ln1 = torch.nn.LayerNorm(config.hidden_dim, dtype=DTYPE)
        self.attn = ToyAttention(config)
        self.ln2 = torch.nn.LayerNorm(config.hidden_dim, dtype=DTYPE)
        self.mlp_in = torch.nn.Linear(config.hidden_dim, width, dtype=DTYPE)
        self.mlp_out = torch.nn.Linear(width, config.hidden_dim, dtype=DTYPE)
        self.hook_resid_pre = HookPoint()
        self.hook_attn_out = HookPoint()
        self.hook_resid_mid = HookPoint()
        self.hook_mlp_out = HookPoint()
        self.hook_resid_post = HookPoint()

    def forward(self, resid: torch.Tensor) -> torch.Tensor:
        resid = self.hook_resid_pre(resid)
        attn_out = self.hook_attn_out(self.attn(self.ln1(resid)))
        resid_mid = self.hook_resid_mid(resid + attn_out)
        hidden = torch.nn.functional.gelu(self.mlp_in(self.ln2(resid_mid)))
        mlp_out = self.hook_mlp_out(self.mlp_out(hidden))
        return typing.cast(torch.Tensor, self.hook_resid_post(resid_mid + mlp_out))


class InterventionBackend(typing.Protocol):
    """What a backend must expose for `forward` to drive it."""

    @property
    def num_layers(self) -> int: ...

    @property
    def num_heads(self) -> int: ...

    @property
    def hidden_dim(self) -> int: ...

    @property
    def head_dim(self) -> int: ...

    @property
    def vocab_size(self) -> int: ...

    @property
    def image_token_count(self) -> int: ...

    @property
    def max_context(self) -> int: ...

    def hook_point(self, layer: int, site: str) -> torch.nn.Module: ...

    def run(self, ids: torch.Tensor, is_image: torch.Tensor) -> torch.Tensor: ...

    def project(self, hidden: torch.Tensor) -> torch.Tensor: ...


class ToyVLM(torch.nn.Module):
    def __init__(self, config: ToyVLMConfig) -> None:
        super().__init__()
        self.config = config
        d, v = config.hidden_dim, config.vocab_size
        self.embed = torch.nn.Parameter(torch.zeros((v, d), dtype=DTYPE))
        self.image_embed = torch.nn.Parameter(torch.zeros((v, d), dtype=DTYPE))
        self.pos_embed = torch.nn.Parameter(
            torch.zeros((config.max_context, d), dtype=DTYPE)
        )
        self.blocks = torch.nn.ModuleList(
            [ToyBlock(config) for _ in range(config.num_layers)]
        )
        self.ln_final = torch.nn.LayerNorm(d, dtype=DTYPE)
        self.unembed = torch.nn.Parameter(torch.zeros((d, v), dtype=DTYPE))

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def num_heads(self) -> int:
        return self.config.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.config.head_dim

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def image_token_count(self) -> int:
        return self.config.image_token_count

    @property
    def max_context(self) -> int:
        return self.config.max_context

    def hook_point(self, layer: int, site: str) -> torch.nn.Module:
        block = self.blocks[layer]
        if site == "pattern":
            return typing.cast(torch.nn.Module, block.attn.hook_pattern)
        if site == "head_out":
            return typing.cast(torch.nn.Module, block.attn.hook_head_out)
        return typing.cast(torch.nn.Module, getattr(block, f"hook_{site}"))

    def embed_tokens(self, ids: torch.Tensor, is_image: torch.Tensor) -> torch.Tensor:
        rows = torch.where(is_image[:, None], self.image_embed[ids], self.embed[ids])
        return rows + self.pos_embed[: ids.shape[0]]

    def run(self, ids: torch.Tensor, is_image: torch.Tensor) -> torch.Tensor:
        resid = self.embed_tokens(ids, is_image)
        for block in self.blocks:
            resid = block(resid)
        return self.project(resid)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.ln_final(hidden) @ self.unembed


@dataclasses.dataclass
class ModelHandle:
    backend: InterventionBackend
    vocabulary: Vocabulary
    seed: typing.Optional[int] = None
    backend_tag: BackendT = "toy"
    _lock: threading.Lock = dataclasses.field(
        init=False, repr=False, compare=False, default_factory=threading.Lock
    )

    def __post_init__(self) -> None:
        if len(self.vocabulary) != self.backend.vocab_size:
            raise InvalidDimensionError(
                f"Vocabulary has {len(self.vocabulary)} tokens, "
                f"model expects {self.backend.vocab_size}"
            )

    @property
    def num_layers(self) -> int:
        return self.backend.num_layers

    @property
    def num_heads(self) -> int:
        return self.backend.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.backend.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.backend.head_dim

    @property
    def vocab_size(self) -> int:
        return self.backend.vocab_size

    @property
    def image_token_count(self) -> int:
        return self.backend.image_token_count

    @property
    def image_grid(self) -> int:
        return math.isqrt(self.image_token_count)

    @property
    def yes_id(self) -> int:
        return self.answer_id("yes")

    @property
    def no_id(self) -> int:
        return self.answer_id("no")

    def answer_id(self, answer: str) -> int:
        token = self.vocabulary.token_id(answer)
        if token is None:
            raise utils.ValidationError(
                f"Answer `{answer}` is not a single token of the model vocabulary"
            )
        return token

    def clone(self) -> "ModelHandle":
        return ModelHandle(
            backend=copy.deepcopy(self.backend),
            vocabulary=self.vocabulary,
            seed=self.seed,
            backend_tag=self.backend_tag,
        )

    def sequence(
        self, image_ids: typing.Sequence[int], question: str
    ) -> TokenSequence:
        """Image block first, question tokens after it."""
        if len(image_ids) != self.image_token_count:
            raise utils.ValidationError(
                f"Expected {self.image_token_count} image tokens, got {len(image_ids)}"
            )
        text_ids = self.vocabulary.encode(question)
        return TokenSequence(
            ids=tuple(image_ids) + tuple(text_ids),
            modalities=("image",) * len(image_ids) + ("text",) * len(text_ids),
        )


_PARAMETER_STD: typing.Dict[str, typing.Callable[[ToyVLMConfig], float]] = {
    "embed": lambda c: 1.0,
    "image_embed": lambda c: 1.0,
    "pos_embed": lambda c: 0.5,
    "W_Q": lambda c: 1.0 / math.sqrt(c.hidden_dim),
    "W_K": lambda c: 1.0 / math.sqrt(c.hidden_dim),
    "W_V": lambda c: 1.0 / math.sqrt(c.hidden_dim),
    "W_O": lambda c: 1.0 / math.sqrt(c.hidden_dim),
    "mlp_in.weight": lambda c: 1.0 / math.sqrt(c.hidden_dim),
    "mlp_out.weight": lambda c: 1.0 / math.sqrt(c.hidden_dim * c.mlp_ratio),
    "unembed": lambda c: 1.0 / math.sqrt(c.hidden_dim),
}


def build_toy_vlm(
    config: typing.Optional[ToyVLMConfig] = None, seed: int = 0
) -> ModelHandle:
    config = config or ToyVLMConfig()
    backend = ToyVLM(config)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, parameter in backend.named_parameters():
            if ".ln" in name or name.startswith("ln_"):
                continue
            std = next(
                (
                    rule(config)
                    for suffix, rule in _PARAMETER_STD.items()
                    if name == suffix or name.endswith("." + suffix)
                ),
                0.02,
            )
            parameter.normal_(0.0, std, generator=generator)
        if config.identical_heads:
            for block in backend.blocks:
                for weight in (block.attn.W_Q, block.attn.W_K, block.attn.W_V):
                    weight[1:] = weight[0]
    return ModelHandle(backend, Vocabulary.default(config.vocab_size), seed=seed)


def forward(
    model: ModelHandle,
    sequence: TokenSequence,
    plan: interventions.InterventionPlan = interventions.EMPTY_PLAN,
    *,
    capture_attention: bool = False,
) -> typing.Tuple[torch.Tensor, ActivationCache]:
    """Run one pass with `plan` applied; returns T×V logits and the cache."""
    backend = model.backend
    if sequence.length > backend.max_context:
        raise interventions.InterventionError(
            f"Sequence length {sequence.length} exceeds context {backend.max_context}"
        )
    for token in sequence.ids:
        if not 0 <= token < backend.vocab_size:
            raise interventions.InterventionError(
                f"Token id {token} out of range [0, {backend.vocab_size})"
            )
    plan.validate(backend.num_layers, backend.num_heads, sequence.length)

    sites = [s for s in interventions.HOOK_SITES if s != "pattern" or capture_attention]
    captured: typing.Dict[str, typing.List[typing.Optional[torch.Tensor]]] = {
        site: [None] * backend.num_layers for site in sites
    }

    def make_hook(layer: int, site: str) -> typing.Callable[..., torch.Tensor]:
        def hook(
            module: torch.nn.Module, inputs: typing.Any, output: torch.Tensor
        ) -> torch.Tensor:
            value = plan.apply(layer, site, output)
            captured[site][layer] = value.detach().clone()
            return value

        return hook

    ids = torch.tensor(sequence.ids, dtype=torch.long)
    is_image = torch.tensor([m == "image" for m in sequence.modalities])
    with model._lock, torch.no_grad():
        handles = [
            backend.hook_point(layer, site).register_forward_hook(
                make_hook(layer, site)
            )
            for layer in range(backend.num_layers)
            for site in sites
        ]
        try:
            logits = backend.run(ids, is_image)
        finally:
            for handle in handles:
                handle.remove()

    def layers(site: str) -> typing.Tuple[torch.Tensor, ...]:
        return tuple(typing.cast(torch.Tensor, t) for t in captured[site])

    cache = ActivationCache(
        resid_pre=layers("resid_pre"),
        head_out=layers("head_out"),
        attn_out=layers("attn_out"),
        resid_mid=layers("resid_mid"),
        mlp_out=layers("mlp_out"),
        resid_post=layers("resid_post"),
        pattern=layers("pattern") if capture_attention else None,
    )
    return logits.detach(), cache


def readout(
    final_logits: torch.Tensor, answer_token: int
) -> typing.Tuple[float, float]:
    """Raw logit and full-vocabulary softmax probability of `answer_token`."""
    vocab_size = final_logits.shape[-1]
    if not 0 <= answer_token < vocab_size:
        raise utils.ValidationError(
            f"Answer token {answer_token} out of range [0, {vocab_size})"
        )
    logits = final_logits.to(DTYPE)
    probs = torch.softmax(logits, dim=-1)
    return float(logits[answer_token]), float(probs[answer_token])


def binary_answer(final_logits: torch.Tensor, yes_id: int, no_id: int) -> AnswerT:
    # Ties read as "no".
    return "yes" if bool(final_logits[yes_id] > final_logits[no_id]) else "no"


def predict_answer(
    model: ModelHandle,
    sequence: TokenSequence,
    plan: interventions.InterventionPlan = interventions.EMPTY_PLAN,
) -> AnswerT:
    logits, _ = forward(model, sequence, plan)
    return binary_answer(logits[-1], model.yes_id, model.no_id)


def toy_backend(model: ModelHandle) -> ToyVLM:
    if not isinstance(model.backend, ToyVLM):
        raise utils.ValidationError(
            f"Expected the toy backend, got `{model.backend_tag}`"
        )
    return model.backend


def save_toy_vlm(model: ModelHandle, path: pathlib.Path) -> None:
    backend = toy_backend(model)
    state = backend.state_dict()
    index = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        data = tensor.detach().numpy().astype("<f8").tobytes()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "config": dataclasses.asdict(backend.config),
            "seed": model.seed,
            "vocabulary": list(model.vocabulary.tokens),
            "tensors": index,
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = (
        TOY_MAGIC
        + struct.pack("<II", TOY_CONTAINER_VERSION, len(header))
        + header
        + b"".join(chunks)
    )
    utils.atomic_write_bytes(path, payload)


def load_toy_vlm(path: pathlib.Path) -> ModelHandle:
    payload = path.read_bytes()
    if payload[: len(TOY_MAGIC)] != TOY_MAGIC:
        raise utils.ValidationError(f"{path} is not a toy model container")
    start = len(TOY_MAGIC)
    version, header_length = struct.unpack_from("<II", payload, start)
    if version != TOY_CONTAINER_VERSION:
        raise utils.ValidationError(f"Unsupported toy container version {version}")
    start += 8
    header = json.loads(payload[start : start + header_length].decode("utf-8"))
    data_start = start + header_length

    config = ToyVLMConfig(**header["config"])
    backend = ToyVLM(config)
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(
            payload, dtype="<f8", count=count, offset=data_start + entry["offset"]
        )
        state[entry["name"]] = torch.from_numpy(array.copy()).reshape(entry["shape"])
    backend.load_state_dict(state)
    return ModelHandle(
        backend, Vocabulary(tuple(header["vocabulary"])), seed=header["seed"]
    )
