"""View-adaptive backward gating: per-view loss EMAs, deviation-score skip
test, and a warmup-calibrated minimum backward budget.

The gate is a small sequential state machine that is consulted once per
post-densification iteration. It never touches the renderer or optimizer;
callers run the backward pass iff ``GateDecision.execute_backward`` is set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional


class GatingError(ValueError):
    """Invalid input or contract violation in the gating state machine."""


@dataclass
class GatingConfig:
    """Hyperparameters of the gate.

    warmup_len: iterations with forced backward while EMAs stabilize.
    ema_decay: decay of the per-view loss EMA, in (0, 1).
    eps: stabilizer added to the EMA in the deviation ratio (0 allowed
        for exact scale-invariance experiments).
    budget_floor: lower bound of the calibrated minimum backward ratio.
    budget_enabled: disable to reproduce the no-budget ablation; warmup
        and calibration still run so logs stay comparable.
    """

    warmup_len: int = 500
    ema_decay: float = 0.95
    eps: float = 1e-8
    budget_floor: float = 0.5
    budget_enabled: bool = True

    def __post_init__(self):
        if self.warmup_len < 1:
            raise GatingError(f"warmup_len must be >= 1, got {self.warmup_len}")
        if not 0.0 < self.ema_decay < 1.0:
            raise GatingError(f"ema_decay must be in (0,1), got {self.ema_decay}")
        if not self.eps >= 0.0:
            raise GatingError(f"eps must be >= 0, got {self.eps}")
        if not 0.0 <= self.budget_floor <= 1.0:
            raise GatingError(f"budget_floor must be in [0,1], got {self.budget_floor}")


# Per-view loss EMA table; a view has an entry only after it has been observed.
ViewLossTable = dict[int, float]


class GateDecision(NamedTuple):
    """Outcome of one gating step.

    ``execute_backward`` is the final decision; it is the OR of the raw
    skip-test output and the two overrides. ``rho_cum_before`` is the
    cumulative backward ratio measured before this decision.
    """

    score: float
    proposed: bool
    forced_warmup: bool
    forced_budget: bool
    execute_backward: bool
    rho_cum_before: float


@dataclass
class GatingState:
    """Sequential gate state: EMA table, counters, calibrated budget."""

    table: ViewLossTable = field(default_factory=dict)
    t: int = 1
    b: int = 0
    rho_min: Optional[float] = None
    warmup_eligible: int = 0
    warmup_would_backward: int = 0
    calibrated: bool = False

    def calibrate(self, rho_hat: float, rho_lo: float) -> float:
        """Set rho_min from warmup statistics. Valid exactly once."""
        if self.calibrated:
            raise GatingError("rho_min already calibrated; calibration runs once")
        self.rho_min = calibrate_rho_min(rho_hat, rho_lo)
        self.calibrated = True
        return self.rho_min

    def to_dict(self) -> dict:
        return {
            "table": {str(v): e for v, e in self.table.items()},
            "t": self.t,
            "b": self.b,
            "rho_min": self.rho_min,
            "warmup_eligible": self.warmup_eligible,
            "warmup_would_backward": self.warmup_would_backward,
            "calibrated": self.calibrated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GatingState":
        return cls(
            table={int(v): float(e) for v, e in d["table"].items()},
            t=int(d["t"]),
            b=int(d["b"]),
            rho_min=None if d["rho_min"] is None else float(d["rho_min"]),
            warmup_eligible=int(d["warmup_eligible"]),
            warmup_would_backward=int(d["warmup_would_backward"]),
            calibrated=bool(d["calibrated"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "GatingState":
        return cls.from_dict(json.loads(s))


def update_ema(prev_ema: Optional[float], loss: float, decay: float) -> float:
    """EMA recurrence; a first observation initializes the EMA to the loss."""
    _check_loss(loss)
    if prev_ema is None:
        return loss
    return decay * prev_ema + (1.0 - decay) * loss


def deviation_score(loss: float, prev_ema: Optional[float], eps: float) -> float:
    """Loss over EMA baseline; +inf when the view has no history yet."""
    _check_loss(loss)
    if prev_ema is None:
        return math.inf
    return loss / (prev_ema + eps)


def skip_test(score: float) -> bool:
    """True = execute backward. Strictly greater than 1; ties are skips."""
    return score > 1.0


def cumulative_ratio(b: int, t: int) -> float:
    """Backward ratio before deciding iteration t: b / max(t-1, 1)."""
    return b / max(t - 1, 1)


def calibrate_rho_min(rho_hat: float, rho_lo: float) -> float:
    """Lower-bounded interpolation rho_lo + (1 - rho_lo) * rho_hat."""
    if not 0.0 <= rho_hat <= 1.0:
        raise GatingError(f"rho_hat must be in [0,1], got {rho_hat}")
    if not 0.0 <= rho_lo <= 1.0:
        raise GatingError(f"rho_lo must be in [0,1], got {rho_lo}")
    return rho_lo + (1.0 - rho_lo) * rho_hat


def _check_loss(loss: float) -> None:
    # NaN fails the >= comparison too, so this covers NaN, negatives and inf.
    if not (loss >= 0.0) or loss == math.inf:
        raise GatingError(f"loss must be finite and >= 0, got {loss}")


def step(state: GatingState, config: GatingConfig, view: int, loss: float) -> GateDecision:
    """Run one gating iteration, mutating ``state``.

    The deviation score uses the EMA stored before this call; the EMA is
    then updated unconditionally, whether or not backward executes.
    """
    _check_loss(loss)
    t = state.t
    table = state.table
    prev = table.get(view)
    score = math.inf if prev is None else loss / (prev + config.eps)
    proposed = score > 1.0
    rho_cum_before = state.b / (t - 1 if t > 1 else 1)

    in_warmup = t <= config.warmup_len
    if in_warmup:
        # Warmup statistics count only views that already have an EMA history.
        if prev is not None:
            state.warmup_eligible += 1
            if proposed:
                state.warmup_would_backward += 1
        forced_budget = False
    else:
        if not state.calibrated:
            if state.warmup_eligible > 0:
                rho_hat = state.warmup_would_backward / state.warmup_eligible
            else:
                rho_hat = 1.0  # fail safe: no history seen, demand full backward
            state.calibrate(rho_hat, config.budget_floor)
        forced_budget = config.budget_enabled and rho_cum_before < state.rho_min

    execute = proposed or in_warmup or forced_budget

    if prev is None:
        table[view] = loss
    else:
        table[view] = config.ema_decay * prev + (1.0 - config.ema_decay) * loss
    if execute:
        state.b += 1
    state.t = t + 1
    return GateDecision(score, proposed, in_warmup, forced_budget, execute, rho_cum_before)
