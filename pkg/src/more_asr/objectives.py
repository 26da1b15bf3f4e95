"""Attack losses, doubled-target construction and the two-stage schedule.

All losses are written to be *descended*: the accuracy loss is negative
cross-entropy against the true transcript, the EOS loss is
P(EOS) - P(runner-up) at the last teacher-forced position, and the doubling
loss is cross-entropy toward the current doubled target.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateHypothesis, InvalidInput, ScheduleExhausted
from .tokens import BOS, EOS, PAD, SPECIAL


def _logits(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t if t.dtype.is_floating_point else t.double()


def _ids(tokens) -> torch.Tensor:
    return torch.as_tensor(list(tokens) if not isinstance(tokens, torch.Tensor) else tokens, dtype=torch.long)


def position_ce(logits, labels) -> torch.Tensor:
    """Cross-entropy of each row against its label."""
    return F.cross_entropy(_logits(logits), _ids(labels), reduction="none")


def loss_accuracy(logits, Y: Sequence[int]) -> torch.Tensor:
    """-CE(f(X+delta), Y), averaged over positions.

    ``Y`` is the full teacher-forcing sequence (BOS, words..., EOS) and
    ``logits`` the |Y| rows returned by the teacher-forced forward pass on it;
    the last row (after EOS) is not scored.
    """
    logits = _logits(logits)
    if logits.ndim != 2 or logits.shape[0] != len(Y) or len(Y) < 2:
        raise InvalidInput(f"expected {len(Y)} logit rows for a target of length {len(Y)}, "
                           f"got shape {tuple(logits.shape)}")
    return -position_ce(logits[:-1], list(Y)[1:]).mean()


def runner_up(prob_row) -> int:
    """Most probable non-EOS token; ties go to the lowest id."""
    p = np.asarray(prob_row.detach() if isinstance(prob_row, torch.Tensor) else prob_row, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise InvalidInput("runner_up needs a distribution over at least two tokens")
    masked = p.copy()
    if EOS < masked.shape[0]:
        masked[EOS] = -np.inf
    return int(np.argmax(masked))


def loss_eos(probs) -> torch.Tensor:
    """P_L(EOS) - P_L(z) on the final row, z the runner-up chosen before differentiation.

    Accepts a (rows x V) probability tensor (differentiable) or anything with a
    ``prob_rows`` attribute such as a DecodeResult.
    """
    rows = getattr(probs, "prob_rows", probs)
    rows = torch.as_tensor(rows, dtype=torch.float64) if not isinstance(rows, torch.Tensor) else rows
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InvalidInput("EOS loss needs at least one probability row")
    last = rows[-1]
    z = runner_up(last)
    return last[EOS] - last[z]


@dataclass(frozen=True)
class DoubledTarget:
    tokens: tuple[int, ...]
    block_index: int
    base_len: int
    doubled_len: int
    capped: bool

    def __post_init__(self):
        if EOS in self.tokens:
            raise AssertionError("doubled target must never contain EOS")
        if len(self.tokens) != self.doubled_len:
            raise AssertionError("doubled_len disagrees with the token count")

    def decoder_input(self) -> list[int]:
        """BOS followed by the whole target; the final row is where EOS would be scored."""
        return [BOS, *self.tokens]


def strip_hypothesis(hypothesis: Sequence[int]) -> list[int]:
    """Content tokens of a decoded hypothesis: drops BOS, PAD and EOS ids."""
    return [int(t) for t in hypothesis if int(t) not in SPECIAL]


def build_doubled_target(hypothesis: Sequence[int], L_max: int, block_index: int = 0) -> DoubledTarget:
    """base || base from the EOS-stripped hypothesis, cut to L_max - 1 tokens."""
    base = strip_hypothesis(hypothesis)
    if not base:
        raise DegenerateHypothesis("hypothesis is empty once EOS is removed")
    cap = L_max - 1
    if cap < 1:
        raise InvalidInput("L_max must leave room for BOS and one target token")
    doubled = (base + base)[:cap]
    return DoubledTarget(tuple(doubled), block_index, len(base), len(doubled), 2 * len(base) >= cap)


def loss_redo(logits, target: DoubledTarget) -> torch.Tensor:
    """+CE toward the doubled target, averaged over its positions.

    ``logits`` come from the forward pass on ``target.decoder_input()``
    (doubled_len + 1 rows); the extra final row is left for the EOS term.
    """
    logits = _logits(logits)
    n = target.doubled_len
    if logits.ndim != 2 or logits.shape[0] not in (n, n + 1):
        raise InvalidInput(f"expected {n + 1} logit rows for a doubled target of length {n}, "
                           f"got shape {tuple(logits.shape)}")
    return position_ce(logits[:n], target.tokens).mean()


def loss_efficiency(logits, target: DoubledTarget, use_eos: bool = True, use_redo: bool = True) -> torch.Tensor:
    """L_REDO + L_EOS from one forward pass on the doubled target."""
    logits = _logits(logits)
    total = logits.new_zeros(())
    if use_redo:
        total = total + loss_redo(logits, target)
    if use_eos:
        if logits.shape[0] != target.doubled_len + 1:
            raise InvalidInput("EOS term needs the row after the final target token")
        total = total + loss_eos(torch.softmax(logits, dim=-1))
    return total


# ------------------------------------------------------- bound loss specs
# Callables (bundle, features) -> scalar, accepted by model.input_gradient.


@dataclass(frozen=True)
class AccuracyLoss:
    reference: tuple[int, ...]

    @property
    def sequence(self) -> list[int]:
        return [BOS, *self.reference, EOS]

    def __call__(self, bundle, features):
        from .model import forward_teacher_forced

        return loss_accuracy(forward_teacher_forced(bundle, features, self.sequence), self.sequence)


@dataclass(frozen=True)
class EosLoss:
    prefix: tuple[int, ...]

    def __call__(self, bundle, features):
        from .model import forward_teacher_forced

        logits = forward_teacher_forced(bundle, features, [BOS, *self.prefix])
        return loss_eos(torch.softmax(logits, dim=-1))


@dataclass(frozen=True)
class RedoLoss:
    target: DoubledTarget

    def __call__(self, bundle, features):
        from .model import forward_teacher_forced

        return loss_redo(forward_teacher_forced(bundle, features, self.target.decoder_input()), self.target)


@dataclass(frozen=True)
class EfficiencyLoss:
    target: DoubledTarget
    use_eos: bool = True
    use_redo: bool = True

    def __call__(self, bundle, features):
        from .model import forward_teacher_forced

        logits = forward_teacher_forced(bundle, features, self.target.decoder_input())
        return loss_efficiency(logits, self.target, self.use_eos, self.use_redo)


# --------------------------------------------------------------- schedule


class Stage(str, enum.Enum):
    REPULSION = "repulsion"
    ANCHORING = "anchoring"


@dataclass(frozen=True)
class ScheduleState:
    K: int
    K_a: int
    D: int
    step: int = 0
    refresh: bool = False
    target: DoubledTarget | None = None

    def __post_init__(self):
        if not 0 <= self.K_a <= self.K or self.D < 1:
            raise InvalidInput("schedule needs 0 <= K_a <= K and D >= 1")

    @property
    def stage(self) -> Stage:
        return Stage.REPULSION if self.step <= self.K_a else Stage.ANCHORING

    @property
    def anchor_step(self) -> int:
        """s = i - K_a (zero or negative during repulsion)."""
        return self.step - self.K_a

    @property
    def n_blocks(self) -> int:
        return math.ceil((self.K - self.K_a) / self.D)


def advance_schedule(state: ScheduleState) -> ScheduleState:
    """Move to the next step; flag a target refresh when (s - 1) mod D == 0."""
    if state.step >= state.K:
        raise ScheduleExhausted(f"schedule finished after {state.K} steps")
    step = state.step + 1
    s = step - state.K_a
    return dataclasses.replace(state, step=step, refresh=s >= 1 and (s - 1) % state.D == 0)


def refresh_target(state: ScheduleState, hypothesis: Sequence[int], L_max: int,
                   fallback_token: int | None = None) -> ScheduleState:
    """Install a new doubled target built from ``hypothesis``.

    A capped target is frozen and reused; an empty hypothesis falls back to
    a single ``fallback_token`` (normally the runner-up) as base.
    """
    if state.target is not None and state.target.capped:
        return state
    block = (state.anchor_step - 1) // state.D
    try:
        target = build_doubled_target(hypothesis, L_max, block)
    except DegenerateHypothesis:
        if fallback_token is None or fallback_token in SPECIAL:
            raise
        target = build_doubled_target([fallback_token], L_max, block)
    return dataclasses.replace(state, target=target)
