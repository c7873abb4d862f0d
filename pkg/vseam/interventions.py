"""Declarative interventions applied during a single forward pass."""

import dataclasses
import typing

import torch

from vseam import utils

if typing.TYPE_CHECKING:
    from vseam import model as _model

ModuleT = typing.Literal["att", "mlp"]
PatchSiteT = typing.Literal["hidden", "output"]
MODULES: typing.Tuple[ModuleT, ...] = ("att", "mlp")

# Hook point names exposed by every block of an intervention backend.
HOOK_SITES = (
    "resid_pre",
    "pattern",
    "head_out",
    "attn_out",
    "resid_mid",
    "mlp_out",
    "resid_post",
)

_PATCH_HOOK_SITE: typing.Dict[typing.Tuple[ModuleT, PatchSiteT], str] = {
    ("att", "hidden"): "resid_mid",
    ("att", "output"): "attn_out",
    ("mlp", "hidden"): "resid_post",
    ("mlp", "output"): "mlp_out",
}


class InterventionError(utils.ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class PatchAction:
    layer: int
    module: ModuleT
    positions: typing.Tuple[int, ...]
    donor: "_model.ActivationCache" = dataclasses.field(repr=False, compare=False)
    site: PatchSiteT = "hidden"

    def __post_init__(self) -> None:
        if self.module not in MODULES:
            raise InterventionError(f"Unknown module `{self.module}`")
        if self.site not in ("hidden", "output"):
            raise InterventionError(f"Unknown patch site `{self.site}`")
        object.__setattr__(self, "positions", tuple(sorted(set(self.positions))))

    @property
    def target(self) -> typing.Tuple[str, int, str]:
        return ("module", self.layer, self.module)

    @property
    def hook_site(self) -> str:
        return _PATCH_HOOK_SITE[(self.module, self.site)]

    def donor_rows(self) -> torch.Tensor:
        if self.site == "hidden":
            return self.donor.hidden(self.layer, self.module)
        return self.donor.output(self.layer, self.module)


@dataclasses.dataclass(frozen=True)
class HeadMaskAction:
    layer: int
    head: int

    @property
    def target(self) -> typing.Tuple[str, int, int]:
        return ("head", self.layer, self.head)


@dataclasses.dataclass(frozen=True)
class HeadRescaleAction:
    layer: int
    head: int
    factor: float

    def __post_init__(self) -> None:
        if self.factor < 0:
            raise InterventionError(
                f"Rescale factor for L{self.layer}.H{self.head} must be >= 0, "
                f"got {self.factor}"
            )

    @property
    def target(self) -> typing.Tuple[str, int, int]:
        return ("head", self.layer, self.head)


ActionT = typing.Union[PatchAction, HeadMaskAction, HeadRescaleAction]


@dataclasses.dataclass(frozen=True)
class InterventionPlan:
    actions: typing.Tuple[ActionT, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        seen: typing.Set[typing.Tuple[typing.Any, ...]] = set()
        for action in self.actions:
            if action.target in seen:
                raise InterventionError(
                    f"Two actions target the same site {action.target}"
                )
            seen.add(action.target)

    def __add__(self, other: "InterventionPlan") -> "InterventionPlan":
        return InterventionPlan(self.actions + other.actions)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def is_empty(self) -> bool:
        return not self.actions

    def validate(
        self, num_layers: int, num_heads: int, sequence_length: int
    ) -> None:
        for action in self.actions:
            if not 0 <= action.layer < num_layers:
                raise InterventionError(
                    f"Layer {action.layer} out of range [0, {num_layers})"
                )
            if isinstance(action, PatchAction):
                for position in action.positions:
                    if not 0 <= position < sequence_length:
                        raise InterventionError(
                            f"Position {position} out of range [0, {sequence_length})"
                        )
                rows = action.donor_rows()
                if rows.shape[0] != sequence_length:
                    raise InterventionError(
                        f"Donor cache has {rows.shape[0]} positions, "
                        f"input has {sequence_length}"
                    )
            elif not 0 <= action.head < num_heads:
                raise InterventionError(
                    f"Head {action.head} out of range [0, {num_heads})"
                )

    def apply(self, layer: int, site: str, value: torch.Tensor) -> torch.Tensor:
        """Return `value` with every action bound to (layer, site) applied.

        Patches run first, then head masks, then head rescales. Mask
        replacements are computed from the unmodified head outputs.
        """
        patches = [
            a
            for a in self.actions
            if isinstance(a, PatchAction) and a.layer == layer and a.hook_site == site
        ]
        masks = [
            a
            for a in self.actions
            if isinstance(a, HeadMaskAction) and a.layer == layer and site == "head_out"
        ]
        rescales = [
            a
            for a in self.actions
            if isinstance(a, HeadRescaleAction)
            and a.layer == layer
            and site == "head_out"
        ]
        if not (patches or masks or rescales):
            return value

        result = value.clone()
        for patch in patches:
            if patch.positions:
                index = torch.tensor(patch.positions, dtype=torch.long)
                donor = patch.donor_rows().to(dtype=result.dtype)
                if donor.shape != result.shape:
                    raise InterventionError(
                        f"Donor shape {tuple(donor.shape)} does not match "
                        f"activation shape {tuple(result.shape)}"
                    )
                result[index] = donor[index]
        for mask in masks:
            result[:, mask.head] = mean_of_other_heads(value, mask.head)
        for rescale in rescales:
            result[:, rescale.head] = value[:, rescale.head] * rescale.factor
        return result


EMPTY_PLAN = InterventionPlan()


def mean_of_other_heads(head_out: torch.Tensor, head: int) -> torch.Tensor:
    """Average of every head but `head`, position-wise, over a T×H×d_h tensor."""
    num_heads = head_out.shape[1]
    if num_heads < 2:
        raise InterventionError("Masking needs at least two heads in the layer")
    others = [h for h in range(num_heads) if h != head]
    return head_out[:, others].sum(dim=1) / (num_heads - 1)
