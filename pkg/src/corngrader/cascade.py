"""Staged inference: purity first, then shape, then embryo orientation.

A kernel judged impure stops the pipeline at once; a pure round kernel stops
after the shape check. Only pure flat kernels reach the orientation model, so
a result carries one, two or three decisions and the unreached labels stay
undefined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import tensor as T
from .backbone import STAGE_CLASSES, StageModel
from .data import val_transforms
from .tensor import Tensor

UNDEFINED = "undefined"


def softmax_pair(logits: np.ndarray) -> np.ndarray:
    """Stable two-way softmax in float64, for display-grade probabilities."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class StageDecision:
    """One executed stage: its verdict plus the full probability pair.

    ``prob_pair`` follows the stage's class-index order, so entry 0 is
    impure / flat / embryo_down and entry 1 is pure / round / embryo_up.
    """

    stage: int
    predicted_class: str
    prob_pair: tuple[float, float]

    @property
    def confidence(self) -> float:
        return max(self.prob_pair)

    @property
    def class_names(self) -> tuple[str, str]:
        return STAGE_CLASSES[self.stage]

    def probabilities(self) -> dict[str, float]:
        return dict(zip(self.class_names, self.prob_pair))


@dataclass(frozen=True)
class HierarchicalLabel:
    """The (purity, shape, orientation) triple with the decisions that
    produced it; labels past the stopping point are ``undefined``."""

    y1: str
    y2: str
    y3: str
    decisions: list[StageDecision] = field(default_factory=list)

    def __post_init__(self):
        if self.y1 not in ("pure", "impure"):
            raise ValueError(f"y1 must be pure or impure, got {self.y1!r}")
        if self.y2 not in ("flat", "round", UNDEFINED):
            raise ValueError(f"y2 must be flat, round or undefined, got {self.y2!r}")
        if self.y3 not in ("embryo_down", "embryo_up", UNDEFINED):
            raise ValueError(f"bad y3 {self.y3!r}")
        if self.y1 == "impure":
            expected = 1
            if self.y2 != UNDEFINED or self.y3 != UNDEFINED:
                raise ValueError("impure kernels leave y2 and y3 undefined")
        elif self.y2 == "round":
            expected = 2
            if self.y3 != UNDEFINED:
                raise ValueError("round kernels leave y3 undefined")
        elif self.y2 == UNDEFINED:
            raise ValueError("pure kernels must carry a shape verdict")
        else:
            expected = 3
            if self.y3 == UNDEFINED:
                raise ValueError("flat kernels must carry an orientation verdict")
        if len(self.decisions) != expected:
            raise ValueError(
                f"{expected} decisions expected for ({self.y1}, {self.y2}, {self.y3}), "
                f"got {len(self.decisions)}"
            )

    def render(self) -> str:
        parts = [y if y != UNDEFINED else "--" for y in (self.y1, self.y2, self.y3)]
        return "(" + ", ".join(parts) + ")"


def classify_stage(model: StageModel, image: Tensor, stage: int) -> StageDecision:
    """Run one stage on an already-preprocessed 3,R,R tensor.

    Ties at exactly 0.5/0.5 go to the lower class index, so purity fails
    safe to impure.
    """
    if model.stage != stage:
        raise ValueError(f"model is tagged stage {model.stage}, not {stage}")
    r = model.config.input_resolution
    if image.shape != (3, r, r):
        raise ValueError(f"expected a preprocessed (3, {r}, {r}) tensor, got {image.shape}")
    logits = bb.forward(model, T.reshape(image, (1,) + image.shape))
    probs = softmax_pair(logits.data)
    idx = int(np.argmax(probs))
    return StageDecision(
        stage=stage,
        predicted_class=STAGE_CLASSES[stage][idx],
        prob_pair=(float(probs[0]), float(probs[1])),
    )


def infer_hierarchical(
    f1: StageModel,
    f2: StageModel,
    f3: StageModel,
    image,
    transform=None,
) -> HierarchicalLabel:
    """Full pipeline on a raw H,W,3 image.

    The image is preprocessed exactly once and the resulting tensor is shared
    by every stage that runs. ``transform`` defaults to eval preprocessing
    and exists so tests can observe or replace it.
    """
    models = (f1, f2, f3)
    for tag, model in enumerate(models, start=1):
        if model is None:
            raise ValueError("all three stage models are required")
        if model.stage != tag:
            raise ValueError(f"model {tag} is tagged stage {model.stage}")
    res = f1.config.input_resolution
    if not all(m.config.input_resolution == res for m in models):
        raise ValueError("stage models disagree on input resolution")

    if transform is None:
        transform = val_transforms
    x = transform(image, res)

    d1 = classify_stage(f1, x, 1)
    if d1.predicted_class == "impure":
        return HierarchicalLabel("impure", UNDEFINED, UNDEFINED, [d1])

    d2 = classify_stage(f2, x, 2)
    if d2.predicted_class == "round":
        return HierarchicalLabel("pure", "round", UNDEFINED, [d1, d2])

    d3 = classify_stage(f3, x, 3)
    return HierarchicalLabel("pure", "flat", d3.predicted_class, [d1, d2, d3])


def joint_accuracy_estimate(acc1: float, acc2: float, acc3: float) -> float:
    """Product of the three stage accuracies, assuming independent errors."""
    for name, acc in (("acc1", acc1), ("acc2", acc2), ("acc3", acc3)):
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"{name} = {acc} outside [0, 1]")
    return acc1 * acc2 * acc3
