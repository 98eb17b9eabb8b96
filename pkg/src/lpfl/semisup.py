"""Accuracy-weighted soft labeling and the per-round annotation schedule."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .model import MicroMLM
from .prompting import PromptTask

if TYPE_CHECKING:
    from .federation import ClientState


class AnnotationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnotationPolicy:
    fraction: float = 0.25
    gate: float = 0.70
    force_complete: bool = True
    gate_enabled: bool = True
    combine: str = "softmax"

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.fraction <= 1:
            out.append("policy.fraction: must lie in (0, 1]")
        if not 0 <= self.gate <= 1:
            out.append("policy.gate: must lie in [0, 1]")
        if self.combine not in ("softmax", "raw"):
            out.append("policy.combine: must be 'softmax' or 'raw'")
        return out


def gate(val_accuracy: float, policy: AnnotationPolicy) -> bool:
    """True when validation accuracy strictly exceeds the policy threshold."""
    if not policy.gate_enabled:
        return True
    return val_accuracy > policy.gate


def combine_patterns(per_pattern: np.ndarray, weights: Sequence[float], combine: str = "softmax") -> np.ndarray:
    """Weighted ensemble over the leading pattern axis.

    ``softmax``: ``per_pattern`` holds per-pattern distributions, which are
    averaged with weights ``a_P / Z``.  ``raw``: it holds raw label scores,
    which are averaged the same way and then normalised with a softmax.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (per_pattern.shape[0],):
        raise ValueError("one weight per pattern is required")
    if np.any(w < 0):
        raise ValueError("pattern weights must be non-negative")
    z = w.sum()
    if z <= 0:
        raise ValueError("all pattern weights are zero")
    mixed = np.tensordot(w / z, per_pattern, axes=1)
    if combine == "softmax":
        return mixed
    if combine == "raw":
        e = np.exp(mixed - mixed.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown combine mode {combine!r}")


def soft_labels(
    model: MicroMLM,
    task: PromptTask,
    weights: Sequence[float],
    texts: Sequence[str],
    combine: str = "softmax",
) -> np.ndarray:
    """Soft labels ``(N, L)`` for ``texts`` from the weighted pattern ensemble."""
    if combine == "softmax":
        per_pattern = task.distributions(model, texts)
    else:
        per_pattern = task.raw_scores(model, texts)
    return combine_patterns(per_pattern, weights, combine)


def soft_label(model: MicroMLM, task: PromptTask, weights: Sequence[float], text: str, combine: str = "softmax") -> np.ndarray:
    return soft_labels(model, task, weights, [text], combine)[0]


def annotation_quota(
    u_original: int,
    annotated: int,
    remaining: int,
    round_: int,
    total_rounds: int,
    policy: AnnotationPolicy,
    gate_open: bool,
) -> int:
    """How many unlabeled examples to annotate at the start of ``round_`` (1-based).

    Rounds ``1 .. total_rounds - 1`` form the labeling window.  Each window
    round is entitled to ``ceil(fraction * u_original)`` examples; a round
    that the gate blocks carries its entitlement forward.  On the final round
    any leftovers are annotated at once when ``force_complete`` is set.
    """
    if remaining == 0:
        return 0
    if round_ < total_rounds:
        if not gate_open:
            return 0
        target = min(u_original, math.ceil(policy.fraction * u_original) * round_)
        return min(max(target - annotated, 0), remaining)
    if policy.force_complete:
        return remaining
    raise AnnotationError(
        f"labeling window exhausted with {remaining} unlabeled examples left and force_complete off"
    )


@dataclass(frozen=True)
class AuditRecord:
    round: int
    client: int
    example_id: int
    soft_label: tuple[float, ...]
    pattern_weights: tuple[float, ...]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def annotate_round(
    client: ClientState,
    model: MicroMLM,
    task: PromptTask,
    weights: Sequence[float],
    policy: AnnotationPolicy,
    round_: int,
    total_rounds: int,
    rng: np.random.Generator,
    gate_open: bool,
) -> list[AuditRecord]:
    """Move a uniformly random slice of ``U_k`` into ``T_k`` with soft labels."""
    n = annotation_quota(
        client.u_original, client.annotated, len(client.unlabeled), round_, total_rounds, policy, gate_open
    )
    if n == 0:
        return []
    picks = rng.choice(len(client.unlabeled), size=n, replace=False)
    chosen = [client.unlabeled[i] for i in picks]
    dists = soft_labels(model, task, weights, [e.text for e in chosen], policy.combine)
    picked = set(int(i) for i in picks)
    client.unlabeled = [e for i, e in enumerate(client.unlabeled) if i not in picked]
    records = []
    for ex, dist in zip(chosen, dists):
        client.labeled.append(ex.annotate(dist, round_))
        records.append(AuditRecord(round_, client.id, ex.id, tuple(float(p) for p in dist), tuple(float(w) for w in weights)))
    client.annotated += n
    return records
