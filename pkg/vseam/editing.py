import concurrent.futures
import dataclasses
import difflib
import json
import os
import pathlib
import re
import typing

import numpy as np
import scipy.ndimage

from vseam import clients, dataset, images, utils

SemanticTypeT = typing.Literal["attribute", "object", "relation"]
EditStatusT = typing.Literal["accepted", "rejected-qc", "rejected-human"]

DEFAULT_QC_THRESHOLD = 0.85
DEFAULT_DILATION = 2

# Words that cannot be rendered as a visual edit.
DEFAULT_ABSTRACT_TERMS = frozenset(
    {
        "bright",
        "dark",
        "beautiful",
        "ugly",
        "nice",
        "pretty",
        "fancy",
        "cute",
        "old",
        "new",
    }
)

SPATIAL_WORDS = frozenset(
    {
        "above", "behind", "below", "beside", "front", "in", "inside", "left",
        "near", "next", "of", "on", "over", "right", "to", "top", "under",
        "beneath", "outside",
    }
)  # fmt: skip

# Cosine similarity of edits to the clean image on the colour task, kept as
# reference values for comparison with stub-encoder numbers.
REFERENCE_QC_SIMILARITY = {
    "gaussian": {10: 0.8766, 30: 0.6333, 50: 0.5025, 80: 0.3446},
    "salt_and_pepper": {10: 0.7088, 30: 0.5554, 50: 0.4110, 80: 0.3142},
    "masking": 0.6005,
    "diffusion": 0.6891,
    "semantic": 0.9168,
}

_INSTRUCTIONS: typing.Dict[str, typing.Tuple[str, str]] = {
    "attribute": (
        "You are given a binary Yes/No question about an object's attribute, "
        "along with its ground-truth answer and a full explanation.",
        "Rewrite the question by changing the attribute (e.g., color or material) "
        "while preserving the original structure and context.",
    ),
    "object": (
        "You are given a binary Yes/No question about the presence of an object "
        "in an image, along with its answer and a full explanation.",
        "Rewrite the question by changing the queried object to another "
        "semantically plausible one.",
    ),
    "relation": (
        "You are given a binary Yes/No question about a spatial or action "
        "relationship between objects, along with its ground-truth answer and "
        "full explanation.",
        "Rewrite the question by changing the relation (e.g., left to right, "
        "under to above, riding to feeding).",
    ),
}

# (question, answer, full answer, counterfactual)
_EXAMPLES: typing.Dict[str, typing.Tuple[typing.Tuple[str, str, str, str], ...]] = {
    "attribute": (
        ("Is the shirt blue?", "No", "The shirt is black.", "Is the shirt black?"),
        (
            "Is the chair made of wood?",
            "Yes",
            "The chair is made of wood.",
            "Is the chair made of metal?",
        ),
        ("Is the car black?", "No", "The car is white.", "Is the car white?"),
    ),
    "object": (
        (
            "Is there a dog in this picture?",
            "No",
            "There is a cat in the image.",
            "Is there a cat in this picture?",
        ),
        (
            "Is there a chair in this picture?",
            "Yes",
            "There is a chair in the image.",
            "Is there a table in this picture?",
        ),
        (
            "Is there a bus in this picture?",
            "No",
            "A bicycle is in the image.",
            "Is there a bicycle in this picture?",
        ),
    ),
    "relation": (
        (
            "Is the person riding the horse?",
            "Yes",
            "The person is riding the horse.",
            "Is the person feeding the horse?",
        ),
        (
            "Is the person holding a tennis racket?",
            "Yes",
            "The person is holding a tennis racket.",
            "Is the person throwing a tennis racket?",
        ),
        (
            "Is the cat to the left of the sofa?",
            "Yes",
            "The cat is positioned to the left of the sofa.",
            "Is the cat to the right of the sofa?",
        ),
        (
            "Is the ball under the table?",
            "No",
            "The ball is on top of the table.",
            "Is the ball above the table?",
        ),
    ),
}


class EmptyMaskError(utils.ValidationError):
    pass


class ZeroNormError(utils.ValidationError):
    pass


def _sentence(text: str) -> str:
    text = text.strip()
    return text if text.endswith((".", "?", "!")) else text + "."


def _record_line(question: str, answer: str, full_answer: str) -> str:
    return (
        f"Original Question: {question.strip()} Answer: {_sentence(answer)} "
        f"Full Answer: {_sentence(full_answer)} Counterfactual Question:"
    )


def build_counterfactual_prompt(
    semantic_type: str, question: str, answer: str, full_answer: str
) -> str:
    if semantic_type not in _INSTRUCTIONS:
        raise utils.ValidationError(f"Unknown semantic type `{semantic_type}`")
    for field, value in (
        ("question", question),
        ("answer", answer),
        ("full_answer", full_answer),
    ):
        if not value.strip():
            raise utils.ValidationError(f"`{field}` must not be empty")

    task, rewrite = _INSTRUCTIONS[semantic_type]
    lines = [task, rewrite, ""]
    for number, (q, a, full, counterfactual) in enumerate(
        _EXAMPLES[semantic_type], start=1
    ):
        lines.append(f"Example {number}:")
        lines.append(f"{_record_line(q, a, full)} {counterfactual}")
        lines.append("")
    lines.append(
        "Now please complete the following. Only output the rewritten "
        "counterfactual question, without explanation:"
    )
    lines.append(_record_line(question, answer, full_answer))
    return "\n".join(lines)


@dataclasses.dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str
    original: typing.Tuple[str, ...] = ()
    substituted: typing.Tuple[str, ...] = ()


def _words(question: str) -> typing.List[str]:
    return re.findall(r"[a-z0-9]+", question.lower())


def validate_counterfactual(
    original: str,
    candidate: str,
    stop_list: typing.AbstractSet[str] = DEFAULT_ABSTRACT_TERMS,
) -> Verdict:
    before, after = _words(original), _words(candidate)
    if not before or not after:
        return Verdict(False, "empty question")
    if before == after:
        return Verdict(False, "no substitution")
    if before[0] != after[0] or original.strip()[-1:] != candidate.strip()[-1:]:
        return Verdict(False, "question frame changed")

    matcher = difflib.SequenceMatcher(a=before, b=after, autojunk=False)
    changes = [op for op in matcher.get_opcodes() if op[0] != "equal"]
    if len(changes) != 1:
        return Verdict(False, f"{len(changes)} separate substitutions")
    tag, i1, i2, j1, j2 = changes[0]
    removed, added = tuple(before[i1:i2]), tuple(after[j1:j2])
    if tag != "replace":
        return Verdict(False, f"{tag} changes the question frame")
    if len(removed) != 1 or len(added) != 1:
        if not set(removed + added) <= SPATIAL_WORDS:
            return Verdict(False, "substitution spans more than one semantic unit")
    abstract = sorted(set(added) & stop_list)
    if abstract:
        return Verdict(False, f"`{abstract[0]}` is not visualizable")
    return Verdict(True, "single substitution", removed, added)


@dataclasses.dataclass(frozen=True)
class EditRequest:
    triple_id: str
    semantic_type: SemanticTypeT
    question: str
    answer: str
    full_answer: str
    counterfactual: str
    region: typing.Union[images.Box, np.ndarray]
    inpaint_prompt: str


@dataclasses.dataclass
class EditResult:
    triple_id: str
    edited_image: typing.Optional[pathlib.Path]
    provenance: typing.Dict[str, typing.Any]
    qc_cosine: typing.Optional[float]
    status: EditStatusT
    reason: str = ""
    counterfactual: typing.Optional[str] = None

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {
            "triple_id": self.triple_id,
            "edited_image": str(self.edited_image) if self.edited_image else None,
            "provenance": self.provenance,
            "qc_cosine": self.qc_cosine,
            "status": self.status,
            "reason": self.reason,
            "counterfactual": self.counterfactual,
        }


def dilate(mask: np.ndarray, pixels: int = DEFAULT_DILATION) -> np.ndarray:
    if pixels <= 0:
        return mask.copy()
    dilated = scipy.ndimage.binary_dilation(mask, iterations=pixels)
    return np.asarray(dilated, dtype=bool)


@dataclasses.dataclass(frozen=True)
class RegionEdit:
    image: np.ndarray
    mask: np.ndarray
    dilated_mask: np.ndarray
    provenance: typing.Dict[str, typing.Any]


def edit_region(
    image: np.ndarray,
    region: typing.Union[images.Box, np.ndarray],
    inpaint_prompt: str,
    segmenter: clients.Segmenter,
    inpainter: clients.Inpainter,
    dilation: int = DEFAULT_DILATION,
) -> RegionEdit:
    """Inpaint `region`; pixels outside the dilated mask keep their values."""
    height, width = image.shape[:2]
    if isinstance(region, images.Box):
        if not region.fits(width, height):
            raise utils.ValidationError(
                f"Region {region.to_json()['bbox']} exceeds image size {width}x{height}"
            )
        mask = np.asarray(segmenter.segment(image, region), dtype=bool)
    else:
        mask = np.asarray(region, dtype=bool)
    if mask.shape != (height, width):
        raise utils.ValidationError(
            f"Mask shape {mask.shape} does not match image {height}x{width}"
        )
    if not mask.any():
        raise EmptyMaskError("Edit region is empty")

    painted = inpainter.inpaint(image, mask, inpaint_prompt)
    grown = dilate(mask, dilation)
    edited = np.where(grown[..., None], painted, image).astype(np.uint8)
    return RegionEdit(
        image=edited,
        mask=mask,
        dilated_mask=grown,
        provenance={
            "segmenter": segmenter.name,
            "inpainter": inpainter.name,
            "prompt": inpaint_prompt,
            "dilation": dilation,
        },
    )


def qc_similarity(clean: np.ndarray, edited: np.ndarray) -> float:
    a = np.asarray(clean, dtype=np.float64).ravel()
    b = np.asarray(edited, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise utils.ValidationError(
            f"Feature vectors differ in length: {a.size} != {b.size}"
        )
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ZeroNormError("Cosine similarity of a zero-norm feature vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def gaussian_noise(
    image: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    noisy = image.astype(np.float64) + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def salt_and_pepper(
    image: np.ndarray, amount: float, rng: np.random.Generator
) -> np.ndarray:
    """Set a fraction `amount` of pixels to black or white."""
    noisy = image.copy()
    hit = rng.random(image.shape[:2]) < amount
    salt = rng.random(image.shape[:2]) < 0.5
    noisy[hit & salt] = 255
    noisy[hit & ~salt] = 0
    return noisy


def _target_box(triple: dataset.VQATriple) -> images.Box:
    box = triple.target_box()
    if box is None:
        raise utils.ValidationError(f"Triple `{triple.id}` has no box to edit")
    return box


def make_edit_request(
    triple: dataset.VQATriple, language_model: clients.LanguageModel
) -> typing.Tuple[typing.Optional[EditRequest], Verdict]:
    full_answer = triple.full_answer or f"The answer is {triple.answer}."
    prompt = build_counterfactual_prompt(
        triple.level, triple.question, triple.answer.capitalize(), full_answer
    )
    counterfactual = language_model.complete(prompt).strip().splitlines()
    candidate = counterfactual[0].strip() if counterfactual else ""
    verdict = validate_counterfactual(triple.question, candidate)
    if not verdict.accepted:
        return None, verdict
    # A "yes" edit paints the substitute so the question becomes false; a "no"
    # edit paints the queried value so it becomes true.
    phrase = verdict.substituted if triple.answer == "yes" else verdict.original
    request = EditRequest(
        triple_id=triple.id,
        semantic_type=triple.level,
        question=triple.question,
        answer=triple.answer,
        full_answer=full_answer,
        counterfactual=candidate,
        region=_target_box(triple),
        inpaint_prompt=" ".join(phrase),
    )
    return request, verdict


def _run_one(
    triple: dataset.VQATriple,
    tools: clients.ClientSet,
    out_dir: pathlib.Path,
    threshold: float,
    dilation: int,
) -> EditResult:
    provenance = tools.provenance()
    try:
        request, verdict = make_edit_request(triple, tools.language_model)
        if request is None:
            return EditResult(
                triple_id=triple.id,
                edited_image=None,
                provenance=provenance,
                qc_cosine=None,
                status="rejected-qc",
                reason=f"counterfactual rejected: {verdict.reason}",
            )
        clean = images.load_image(triple.image)
        edit = edit_region(
            clean,
            request.region,
            request.inpaint_prompt,
            tools.segmenter,
            tools.inpainter,
            dilation=dilation,
        )
        cosine = qc_similarity(
            tools.encoder.encode(clean), tools.encoder.encode(edit.image)
        )
    except (clients.ClientError, utils.ValidationError) as e:
        return EditResult(
            triple.id, None, provenance, None, "rejected-qc", reason=str(e)
        )

    provenance["edit"] = edit.provenance
    if cosine < threshold:
        return EditResult(
            triple_id=triple.id,
            edited_image=None,
            provenance=provenance,
            qc_cosine=cosine,
            status="rejected-qc",
            reason=f"cosine {cosine:.4f} below {threshold}",
            counterfactual=request.counterfactual,
        )
    path = out_dir / f"{triple.id}.png"
    images.save_image(path, edit.image)
    return EditResult(
        triple_id=triple.id,
        edited_image=path,
        provenance=provenance,
        qc_cosine=cosine,
        status="accepted",
        counterfactual=request.counterfactual,
    )


def run_edits(
    triples: typing.Sequence[dataset.VQATriple],
    tools: clients.ClientSet,
    out_dir: pathlib.Path,
    manifest: pathlib.Path,
    threshold: float = DEFAULT_QC_THRESHOLD,
    dilation: int = DEFAULT_DILATION,
    workers: typing.Optional[int] = None,
) -> typing.Tuple[typing.List[dataset.VQATriple], typing.List[EditResult]]:
    """Edit every triple, append results to `manifest`, return accepted triples."""
    workers = workers or utils.worker_count()
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(
            executor.map(
                lambda t: _run_one(t, tools, out_dir, threshold, dilation), triples
            )
        )

    manifest.parent.mkdir(parents=True, exist_ok=True)
    with manifest.open("a", encoding="utf-8") as f:
        for result in results:
            f.write(json.dumps(result.to_json(), sort_keys=True) + "\n")

    edited = []
    for triple, result in zip(triples, results):
        if result.status == "accepted":
            edited.append(
                dataclasses.replace(
                    triple,
                    edited_image=result.edited_image,
                    counterfactual=result.counterfactual,
                )
            )
    return edited, results


def read_manifest(
    manifest: pathlib.Path,
) -> typing.Dict[str, typing.Dict[str, typing.Any]]:
    """Latest record per triple id."""
    latest: typing.Dict[str, typing.Dict[str, typing.Any]] = {}
    if not manifest.exists():
        return latest
    with manifest.open(encoding="utf-8") as f:
        for text in f:
            if text.strip():
                record = json.loads(text)
                latest[record["triple_id"]] = record
    return latest


def record_review(manifest: pathlib.Path, triple_id: str, accepted: bool) -> None:
    """Append a human review of an accepted edit to the manifest."""
    current = read_manifest(manifest).get(triple_id)
    if current is None:
        raise utils.ValidationError(f"No edit recorded for `{triple_id}`")
    if current["status"] != "accepted":
        raise utils.ValidationError(
            f"Edit `{triple_id}` is `{current['status']}`, "
            "only accepted edits are reviewed"
        )
    review = dict(current, reviewed=True)
    if not accepted:
        review.update(status="rejected-human", reason="rejected on review")
    with manifest.open("a", encoding="utf-8") as f:
        f.write(json.dumps(review, sort_keys=True) + "\n")


def make_report(results: typing.Sequence[EditResult]) -> str:
    accepted = [r for r in results if r.status == "accepted"]
    cosines = [r.qc_cosine for r in accepted if r.qc_cosine is not None]
    lines = [
        "🎨 Semantic editing",
        f"- Jobs: {len(results)}",
        f"- Accepted: {len(accepted)}",
        f"- Rejected: {len(results) - len(accepted)}",
    ]
    if cosines:
        lines.append(f"- Mean QC cosine: {float(np.mean(cosines)):.4f}")
    return os.linesep.join(lines)
