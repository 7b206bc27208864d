"""Key-frame selection: the learned gate with its random safeguard, plus
the baseline selectors used for comparison runs.

The adaptive selector decides per frame whether to run the oracle and
retrain the student.  Its decision is the disjunction of an LSTM gate over
the frame's feature summary and a Bernoulli draw with adaptive probability
p.  Feedback from each distillation event (did the on-frame loss drop by
more than |sigma|?) trains the LSTM and moves p: p shrinks while the gate
is making correct calls and doubles when it is caught being wrong, so the
random path takes over exactly when the gate cannot be trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import FeedbackRecord
from .models import FeatureFrame, advance_lstm, init_lstm, lstm_train_step


@dataclass(frozen=True)
class Decision:
    frame_id: int
    train: bool
    lstm_vote: bool = False
    random_vote: bool = False
    suppressed: bool = False
    p: float = 0.0

    @property
    def source(self) -> str:
        if self.lstm_vote and self.random_vote:
            return "both"
        return "lstm" if self.lstm_vote else "random"


@dataclass
class SelectorConfig:
    p_init: float = 0.5
    p_min: float = 0.05
    p_step: float = 0.05     # decrement applied after a correct gate call
    tau: int = 2             # min frames between consecutive trainings
    sigma: float = -0.1      # loss delta below which an event counts as helpful
    lstm_hidden: int = 8
    lstm_lr: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.p_min <= 1.0:
            raise ValueError(f"p_min must be in (0, 1], got {self.p_min}")
        if not self.p_min <= self.p_init <= 1.0:
            raise ValueError(f"p_init must be in [p_min, 1], got {self.p_init}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


class AdaptiveSelector:
    """LSTM gate OR adaptive random safeguard, with training-prevention gap.

    Single logical owner of its state: decide() runs on the inference thread
    and apply_feedback() must be serialized with it (the pipeline applies
    feedback at frame boundaries).
    """

    kind = "adaptive"

    def __init__(self, summary_dim: int, cfg: SelectorConfig, seed: int):
        self.cfg = cfg
        self.p = cfg.p_init
        self.frames_since_train = cfg.tau  # no suppression at stream start
        self.lstm = init_lstm(summary_dim, cfg.lstm_hidden, seed)
        self.rng = np.random.default_rng(seed)
        self._pending: dict[int, np.ndarray] = {}  # frame_id -> summary at decision

    def decide(self, frame: FeatureFrame, summary: np.ndarray) -> Decision:
        score, self.lstm = advance_lstm(self.lstm, summary)
        if self.frames_since_train < self.cfg.tau:
            self.frames_since_train += 1
            return Decision(frame.frame_id, train=False, suppressed=True, p=self.p)
        lstm_vote = score >= 0.5
        random_vote = bool(self.rng.random() < self.p)
        train = lstm_vote or random_vote
        if train:
            self.frames_since_train = 0
            self._pending[frame.frame_id] = summary
        else:
            self.frames_since_train += 1
        return Decision(frame.frame_id, train=train, lstm_vote=lstm_vote,
                        random_vote=random_vote, p=self.p)

    def apply_feedback(self, fb: FeedbackRecord) -> None:
        """Consume the outcome of a distillation event this selector triggered.

        The LSTM is trained toward "helpful or not" on the summary it decided
        on.  p moves by gate correctness: a gate that voted train on a helpful
        frame (or stayed silent on an unhelpful random probe) was right and p
        decays toward p_min; a gate caught voting wrong doubles p so the
        safeguard picks up the slack while the gate relearns.
        """
        summary = self._pending.pop(fb.frame_id, None)
        if summary is None:
            raise ValueError(f"feedback for frame {fb.frame_id} that was never selected")
        if fb.error is not None:
            return
        helpful = fb.delta_l < self.cfg.sigma
        gate_voted = fb.decision_source in ("lstm", "both")
        gate_correct = gate_voted == helpful
        if gate_correct:
            self.p = max(self.p - self.cfg.p_step, self.cfg.p_min)
        else:
            self.p = min(2.0 * self.p, 1.0)
        self.lstm = lstm_train_step(self.lstm, summary, 1 if helpful else 0,
                                    self.cfg.lstm_lr)


class RandomSelector:
    """I.i.d. Bernoulli(prob) decisions with the same training-prevention gap."""

    kind = "random"

    def __init__(self, prob: float, tau: int = 2, seed: int = 0):
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"prob must be in [0, 1], got {prob}")
        self.prob = prob
        self.tau = tau
        self.frames_since_train = tau
        self.rng = np.random.default_rng(seed)

    def decide(self, frame: FeatureFrame, summary: np.ndarray) -> Decision:
        if self.frames_since_train < self.tau:
            self.frames_since_train += 1
            return Decision(frame.frame_id, train=False, suppressed=True, p=self.prob)
        train = bool(self.rng.random() < self.prob)
        if train:
            self.frames_since_train = 0
        else:
            self.frames_since_train += 1
        return Decision(frame.frame_id, train=train, random_vote=train, p=self.prob)

    def apply_feedback(self, fb: FeedbackRecord) -> None:
        pass


class SceneChangeSelector:
    """Flags a frame when the mean absolute feature change exceeds a threshold."""

    kind = "scene_change"

    def __init__(self, threshold: float, tau: int = 2):
        self.threshold = threshold
        self.tau = tau
        self.frames_since_train = tau
        self._prev: np.ndarray | None = None

    def decide(self, frame: FeatureFrame, summary: np.ndarray) -> Decision:
        prev, self._prev = self._prev, frame.values
        if self.frames_since_train < self.tau:
            self.frames_since_train += 1
            return Decision(frame.frame_id, train=False, suppressed=True)
        train = prev is not None and float(np.mean(np.abs(frame.values - prev))) > self.threshold
        if train:
            self.frames_since_train = 0
        else:
            self.frames_since_train += 1
        return Decision(frame.frame_id, train=train, random_vote=train)

    def apply_feedback(self, fb: FeedbackRecord) -> None:
        pass


class PeriodicSelector:
    """Trains every n-th frame, subject to the same prevention gap."""

    kind = "periodic"

    def __init__(self, period: int, tau: int = 2):
        if period < 1:
            raise ValueError(f"period must be >= 1, got {period}")
        self.period = period
        self.tau = tau
        self.frames_since_train = tau
        self._count = 0

    def decide(self, frame: FeatureFrame, summary: np.ndarray) -> Decision:
        due = self._count % self.period == 0
        self._count += 1
        if self.frames_since_train < self.tau:
            self.frames_since_train += 1
            return Decision(frame.frame_id, train=False, suppressed=True)
        if due:
            self.frames_since_train = 0
        else:
            self.frames_since_train += 1
        return Decision(frame.frame_id, train=due, random_vote=due)

    def apply_feedback(self, fb: FeedbackRecord) -> None:
        pass


class NeverSelector:
    """Frozen-student mode: never trains."""

    kind = "never"

    def decide(self, frame: FeatureFrame, summary: np.ndarray) -> Decision:
        return Decision(frame.frame_id, train=False)

    def apply_feedback(self, fb: FeedbackRecord) -> None:
        pass
