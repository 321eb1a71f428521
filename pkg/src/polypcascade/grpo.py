"""Desk-scale group-relative policy optimization.

A toy linear-softmax policy stands in for the verifier: actions are
(decision, confidence) pairs on a discretized confidence grid, scored by
rendering each action as a detection response and feeding it through the
cost-sensitive reward. Training samples a group of responses per input,
normalizes rewards within the group (reward minus group mean over the
population standard deviation), and follows the score-function gradient
with gradient clipping, weight decay, and feature dropout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import BoundingBox
from .protocol import DetectionItem, render_detection_answer
from .rewards import RewardWeights, reward_total

ADVANTAGE_STD_FLOOR = 1e-12
ADVANTAGE_MEAN_TOL = 1e-9

CONF_GRID = tuple(round(i * 0.05, 2) for i in range(21))  # 0.00 .. 1.00
ACTIONS: Tuple[Tuple[str, float], ...] = tuple(
    (decision, conf) for decision in ("Yes", "No") for conf in CONF_GRID
)
NUM_ACTIONS = len(ACTIONS)

DIFFICULTY_STAGES = ("clean", "mild", "occluded", "extreme")
DIFFICULTY_KEY = {name: i for i, name in enumerate(DIFFICULTY_STAGES)}
MAX_DIFFICULTY = 3.0

CHECKPOINT_VERSION = 1


def group_advantages(rewards: Sequence[float]) -> List[float]:
    """Group-relative advantages: (r - mean) / population std, zero on ties."""
    if len(rewards) < 2:
        raise ValueError("advantage normalization needs a group of at least 2")
    mean = sum(rewards) / len(rewards)
    var = sum((r - mean) ** 2 for r in rewards) / len(rewards)
    std = math.sqrt(var)
    if std < ADVANTAGE_STD_FLOOR:
        return [0.0] * len(rewards)
    return [(r - mean) / std for r in rewards]


def dropout_rate(t: int, p_max: float, alpha: float) -> float:
    """Exponentially decaying dropout probability p_max * exp(-alpha * t)."""
    if t < 0:
        raise ValueError("step must be >= 0")
    return p_max * math.exp(-alpha * t)


def curriculum_step(
    difficulty: float,
    accuracy: float,
    eta: float,
    tau_progress: float,
) -> float:
    """Advance difficulty by eta * max(0, accuracy - tau_progress), clamped to [0, 3]."""
    advanced = difficulty + eta * max(0.0, accuracy - tau_progress)
    return min(MAX_DIFFICULTY, max(0.0, advanced))


@dataclass(frozen=True)
class TrainSchedule:
    # tau_progress sits below the ~0.5 decision accuracy the reward-optimal
    # policy tops out at on negatives (low-confidence Yes outscores No), so
    # the curriculum can actually complete.
    learning_rate: float = 0.3
    group_size: int = 4
    steps: int = 200
    clip_norm: float = 5.0
    weight_decay: float = 3e-3
    p_max: float = 0.05
    dropout_decay: float = 0.05  # alpha in the dropout schedule
    curriculum_eta: float = 0.5
    tau_progress: float = 0.45
    initial_difficulty: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2, got {self.group_size}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.weight_decay < 0 or not (0.0 <= self.p_max < 1.0):
            raise ValueError("bad regularization settings")
        if self.dropout_decay < 0 or self.curriculum_eta < 0:
            raise ValueError("decay rates must be nonnegative")
        if not (0.0 <= self.initial_difficulty <= MAX_DIFFICULTY):
            raise ValueError(f"difficulty must be within [0, {MAX_DIFFICULTY}]")


class ToyVerifierPolicy:
    """Linear softmax policy over (decision, confidence-grid) actions.

    theta is an (actions x features) weight matrix; pi(a|x) =
    softmax(theta @ x). The feature map is whatever the task provides.
    """

    def __init__(self, num_features: int, theta: Optional[np.ndarray] = None) -> None:
        if num_features < 1:
            raise ValueError("need at least one feature")
        self.num_features = num_features
        if theta is None:
            theta = np.zeros((NUM_ACTIONS, num_features))
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (NUM_ACTIONS, num_features):
            raise ValueError(f"theta must be {(NUM_ACTIONS, num_features)}, got {theta.shape}")
        self.theta = theta

    def action_probs(self, features: np.ndarray) -> np.ndarray:
        logits = self.theta @ features
        logits = logits - logits.max()
        exps = np.exp(logits)
        return exps / exps.sum()

    def sample(self, features: np.ndarray, rng: np.random.Generator) -> int:
        return int(rng.choice(NUM_ACTIONS, p=self.action_probs(features)))

    def clone(self) -> "ToyVerifierPolicy":
        return ToyVerifierPolicy(self.num_features, self.theta.copy())


@dataclass(frozen=True)
class GroupSample:
    action_index: int
    response: str
    reward: float
    advantage: float


@dataclass(frozen=True)
class PolicyGroup:
    """One input's sampled responses with group-relative advantages."""

    input_id: str
    features: np.ndarray
    samples: Tuple[GroupSample, ...]

    def __post_init__(self) -> None:
        if len(self.samples) < 2:
            raise ValueError("a policy group needs at least 2 samples")
        mean_adv = sum(s.advantage for s in self.samples) / len(self.samples)
        if abs(mean_adv) > ADVANTAGE_MEAN_TOL:
            raise ValueError(f"advantages must have zero mean, got {mean_adv}")
        rewards = {s.reward for s in self.samples}
        if len(rewards) == 1 and any(s.advantage != 0.0 for s in self.samples):
            raise ValueError("tied rewards must yield all-zero advantages")

    @property
    def group_size(self) -> int:
        return len(self.samples)


@dataclass
class StepDiagnostics:
    loss_before: float
    loss_after: float
    grad_norm: float
    clip_factor: float
    aborted: bool = False


def _loss_and_grad(
    theta: np.ndarray,
    groups: Sequence[PolicyGroup],
    weight_decay: float,
) -> Tuple[float, np.ndarray]:
    """Mean score-function loss over samples plus quadratic weight penalty."""
    total_samples = sum(g.group_size for g in groups)
    loss = 0.0
    grad = np.zeros_like(theta)
    for group in groups:
        x = group.features
        logits = theta @ x
        logits = logits - logits.max()
        exps = np.exp(logits)
        probs = exps / exps.sum()
        log_probs = logits - math.log(exps.sum())
        for sample in group.samples:
            loss -= sample.advantage * log_probs[sample.action_index]
            coeff = -sample.advantage
            grad += coeff * np.outer(
                _one_hot(sample.action_index) - probs, x
            )
    loss /= total_samples
    grad /= total_samples
    loss += weight_decay * float((theta**2).sum())
    grad += 2.0 * weight_decay * theta
    return loss, grad


def _one_hot(index: int) -> np.ndarray:
    v = np.zeros(NUM_ACTIONS)
    v[index] = 1.0
    return v


def clip_gradient(grad: np.ndarray, clip_norm: float) -> Tuple[np.ndarray, float]:
    """Scale the gradient by min(1, clip_norm / ||g||); returns (clipped, factor)."""
    norm = float(np.linalg.norm(grad))
    if norm <= clip_norm or norm == 0.0:
        return grad, 1.0
    factor = clip_norm / norm
    return grad * factor, factor


def policy_gradient_step(
    policy: ToyVerifierPolicy,
    groups: Sequence[PolicyGroup],
    schedule: TrainSchedule,
) -> StepDiagnostics:
    """One clipped, weight-decayed gradient step on the scored groups.

    A non-finite gradient aborts the step, leaving the policy unchanged.
    """
    if not groups:
        raise ValueError("need at least one scored group")
    loss_before, grad = _loss_and_grad(policy.theta, groups, schedule.weight_decay)
    if not np.isfinite(grad).all() or not math.isfinite(loss_before):
        return StepDiagnostics(loss_before, loss_before, float("nan"), 1.0, aborted=True)
    clipped, factor = clip_gradient(grad, schedule.clip_norm)
    policy.theta = policy.theta - schedule.learning_rate * clipped
    loss_after, _ = _loss_and_grad(policy.theta, groups, schedule.weight_decay)
    return StepDiagnostics(
        loss_before=loss_before,
        loss_after=loss_after,
        grad_norm=float(np.linalg.norm(grad)),
        clip_factor=factor,
    )


# --- the synthetic verification task ----------------------------------------

@dataclass(frozen=True)
class TaskItem:
    """One verification input: features, its candidate box, and ground truth."""

    input_id: str
    features: Tuple[float, ...]
    candidate_grid_box: Tuple[int, int, int, int]
    ground_truths: Tuple[BoundingBox, ...]
    image_width: float
    image_height: float
    difficulty: str
    label: bool  # polyp actually present

    def __post_init__(self) -> None:
        if self.difficulty not in DIFFICULTY_KEY:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


def action_response(item: TaskItem, action_index: int) -> str:
    """Render an action as the detection response the reward understands.

    Yes emits the candidate box at the action's confidence; No emits the
    empty marker.
    """
    decision, confidence = ACTIONS[action_index]
    if decision == "No":
        return render_detection_answer([])
    return render_detection_answer(
        [DetectionItem(item.candidate_grid_box, confidence)]
    )


def action_rewards(item: TaskItem, weights: RewardWeights) -> np.ndarray:
    """Reward of every action on one item (the item's reward row)."""
    out = np.empty(NUM_ACTIONS)
    for idx in range(NUM_ACTIONS):
        raw = action_response(item, idx)
        out[idx] = reward_total(
            raw, item.ground_truths, weights, item.image_width, item.image_height
        ).r_total
    return out


# feature-space separation between positive and negative items per stage;
# extreme positives sit nearly on top of the negatives
_SEPARATION = {"clean": 2.0, "mild": 1.2, "occluded": 0.7, "extreme": 0.35}
# candidate-box overlap with the true polyp degrades with stage difficulty,
# mirroring sloppier detector localization on degraded frames (extreme sits
# just above the relaxed matching threshold of 0.3)
_CANDIDATE_IOU = {"clean": 1.0, "mild": 0.55, "occluded": 0.42, "extreme": 0.33}
_DIRECTION = np.array([1.0, -1.0, 0.5]) / np.linalg.norm([1.0, -1.0, 0.5])
FEATURE_DIM = 4  # three informative features plus a bias term


def make_synthetic_task(
    seed: int,
    n_train: int = 16,
    n_heldout: int = 32,
    noise: float = 0.45,
) -> Tuple[List[TaskItem], List[TaskItem]]:
    """Balanced synthetic verification inputs across the four difficulty stages."""
    rng = np.random.default_rng(seed)

    def make_items(count: int, prefix: str) -> List[TaskItem]:
        items = []
        for i in range(count):
            difficulty = DIFFICULTY_STAGES[i % len(DIFFICULTY_STAGES)]
            label = (i // len(DIFFICULTY_STAGES)) % 2 == 0
            sign = 1.0 if label else -1.0
            core = sign * _SEPARATION[difficulty] * _DIRECTION + rng.normal(
                0.0, noise, size=3
            )
            features = tuple(core) + (1.0,)
            x1 = int(rng.integers(0, 700))
            y1 = int(rng.integers(0, 700))
            w = int(rng.integers(100, 200))
            h = int(rng.integers(100, 200))
            box = (x1, y1, min(1000, x1 + w), min(1000, y1 + h))
            if label:
                # ground truth nested in the candidate with the stage's IoU
                frac = _CANDIDATE_IOU[difficulty]
                gt_w = max(1, round((box[2] - box[0]) * frac))
                gts = (BoundingBox(box[0], box[1], box[0] + gt_w, box[3]),)
            else:
                gts = ()
            items.append(
                TaskItem(
                    input_id=f"{prefix}{i}",
                    features=features,
                    candidate_grid_box=box,
                    ground_truths=gts,
                    image_width=1000.0,
                    image_height=1000.0,
                    difficulty=difficulty,
                    label=label,
                )
            )
        return items

    return make_items(n_train, "train-"), make_items(n_heldout, "held-")


def difficulty_from_tags(tags: Sequence[str]) -> str:
    """Map degradation tags onto curriculum stages."""
    tagset = set(tags)
    if not tagset:
        return "clean"
    if len(tagset) >= 3 or "extreme" in tagset:
        return "extreme"
    if tagset & {"mucus", "stool", "bubbles", "occlusion"}:
        return "occluded"
    return "mild"


# --- training loop -----------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    mean_reward: float  # expected reward of the current policy on the train set
    sampled_reward: float  # mean reward of this step's sampled responses
    grad_norm: float
    difficulty: float
    accuracy: float
    dropout_p: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "sampled_reward": self.sampled_reward,
            "grad_norm": self.grad_norm,
            "difficulty": self.difficulty,
            "accuracy": self.accuracy,
            "dropout_p": self.dropout_p,
        }


@dataclass
class TrainReport:
    records: List[StepRecord] = field(default_factory=list)
    final_step: int = 0
    aborted: bool = False

    @property
    def start_reward(self) -> float:
        return self.records[0].mean_reward

    @property
    def final_reward(self) -> float:
        return self.records[-1].mean_reward


def _apply_dropout(
    features: np.ndarray, p: float, rng: np.random.Generator
) -> np.ndarray:
    if p <= 0.0:
        return features
    keep = rng.random(features.shape) >= p
    return features * keep / (1.0 - p)


def expected_reward(
    policy: ToyVerifierPolicy,
    items: Sequence[TaskItem],
    reward_rows: Dict[str, np.ndarray],
) -> float:
    """Exact expected reward of the policy over a set of items."""
    total = 0.0
    for item in items:
        probs = policy.action_probs(np.asarray(item.features))
        total += float(probs @ reward_rows[item.input_id])
    return total / len(items)


def evaluate_recall(
    policy: ToyVerifierPolicy,
    items: Sequence[TaskItem],
    tau_conf: float = 0.7,
) -> float:
    """Probability-weighted recall over positive items.

    An item counts as recalled with the probability mass the policy puts on
    (Yes, confidence >= tau_conf) actions, matching the cascade's consensus
    acceptance rule.
    """
    accept = np.array(
        [1.0 if d == "Yes" and c >= tau_conf else 0.0 for d, c in ACTIONS]
    )
    positives = [item for item in items if item.label]
    if not positives:
        raise ValueError("no positive items to evaluate recall on")
    total = 0.0
    for item in positives:
        probs = policy.action_probs(np.asarray(item.features))
        total += float(probs @ accept)
    return total / len(positives)


def train(
    policy: ToyVerifierPolicy,
    dataset: Sequence[TaskItem],
    schedule: TrainSchedule,
    weights: RewardWeights,
    seed: int,
    start_step: int = 0,
) -> TrainReport:
    """Run the GRPO loop: sample groups, score, normalize, step.

    The curriculum unlocks items by difficulty stage as sampled decision
    accuracy clears tau_progress. Deterministic per seed; reports carry the
    exact expected train-set reward after every update.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(seed)
    reward_rows = {item.input_id: action_rewards(item, weights) for item in dataset}
    ordered = sorted(dataset, key=lambda i: (DIFFICULTY_KEY[i.difficulty], i.input_id))
    difficulty = schedule.initial_difficulty
    report = TrainReport()

    for step in range(start_step, start_step + schedule.steps):
        eligible = [
            item for item in ordered if DIFFICULTY_KEY[item.difficulty] <= difficulty
        ]
        if not eligible:  # difficulty below the easiest stage cannot happen, but be safe
            eligible = [ordered[0]]
        p_drop = dropout_rate(step, schedule.p_max, schedule.dropout_decay)

        groups: List[PolicyGroup] = []
        sampled_rewards: List[float] = []
        correct = 0
        total_sampled = 0
        for item in eligible:
            features = _apply_dropout(np.asarray(item.features), p_drop, rng)
            indices = [policy.sample(features, rng) for _ in range(schedule.group_size)]
            rewards = [float(reward_rows[item.input_id][i]) for i in indices]
            advantages = group_advantages(rewards)
            samples = tuple(
                GroupSample(i, action_response(item, i), r, a)
                for i, r, a in zip(indices, rewards, advantages)
            )
            groups.append(PolicyGroup(item.input_id, features, samples))
            sampled_rewards.extend(rewards)
            for i in indices:
                decision, _ = ACTIONS[i]
                if (decision == "Yes") == item.label:
                    correct += 1
            total_sampled += schedule.group_size

        diagnostics = policy_gradient_step(policy, groups, schedule)
        if diagnostics.aborted:
            report.aborted = True
            report.final_step = step
            return report

        accuracy = correct / total_sampled
        difficulty = curriculum_step(
            difficulty, accuracy, schedule.curriculum_eta, schedule.tau_progress
        )
        report.records.append(
            StepRecord(
                step=step,
                mean_reward=expected_reward(policy, dataset, reward_rows),
                sampled_reward=sum(sampled_rewards) / len(sampled_rewards),
                grad_norm=diagnostics.grad_norm,
                difficulty=difficulty,
                accuracy=accuracy,
                dropout_p=p_drop,
            )
        )
    report.final_step = start_step + schedule.steps
    return report


def supervised_warm_start(
    policy: ToyVerifierPolicy,
    examples: Sequence[Tuple[Sequence[float], int]],
    learning_rate: float = 0.5,
    epochs: int = 20,
) -> float:
    """Maximum-likelihood warm start on (features, target action) pairs.

    Returns the final mean negative log-likelihood.
    """
    if not examples:
        raise ValueError("no warm-start examples")
    nll = math.inf
    for _ in range(epochs):
        grad = np.zeros_like(policy.theta)
        nll = 0.0
        for features, action_index in examples:
            x = np.asarray(features, dtype=float)
            probs = policy.action_probs(x)
            nll -= math.log(max(probs[action_index], 1e-300))
            grad -= np.outer(_one_hot(action_index) - probs, x)
        grad /= len(examples)
        nll /= len(examples)
        policy.theta = policy.theta - learning_rate * grad
    return nll


def target_action(label: bool, confidence: float = 0.9) -> int:
    """The supervised label's action index: Yes/No at a fixed confidence."""
    decision = "Yes" if label else "No"
    return ACTIONS.index((decision, confidence))


# --- serving the trained policy as a cascade verifier ------------------------

class PolicyVerifier:
    """VerifierBackend adapter for a trained toy policy.

    Features come from frame quality metadata (illumination, clarity,
    artifacts, bias); the greedy action becomes the verdict. Deterministic.
    """

    def __init__(self, policy: ToyVerifierPolicy, frames: Sequence = ()) -> None:
        from .backends import BackendInfo

        if policy.num_features != FEATURE_DIM:
            raise ValueError(f"policy must use the {FEATURE_DIM}-feature map")
        self.info = BackendInfo("policy-verifier")
        self.policy = policy
        self._frames = {f.frame_id: f for f in frames}

    @staticmethod
    def _features(frame) -> np.ndarray:
        q = None if frame is None else frame.quality
        if q is None:
            return np.array([0.5, 0.5, 0.5, 1.0])
        return np.array([q.illumination, q.clarity, q.artifacts, 1.0])

    def assess_global(self, frame):
        from .backends import Assessment

        return Assessment(adverse=frame.condition == "degraded", quality=frame.quality)

    def verify(self, request) -> str:
        from .protocol import render_verdict_answer

        # greedy action; the crop itself is not featurized at desk scale
        frame = self._frames.get(request.frame_id)
        probs = self.policy.action_probs(self._features(frame))
        decision, confidence = ACTIONS[int(np.argmax(probs))]
        return render_verdict_answer(decision, confidence)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(policy: ToyVerifierPolicy, path: str, step: int) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "toy-verifier-policy",
        "num_features": policy.num_features,
        "num_actions": NUM_ACTIONS,
        "step": step,
        "theta": policy.theta.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> Tuple[ToyVerifierPolicy, int]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION or payload.get("kind") != "toy-verifier-policy":
        raise ValueError(f"unsupported checkpoint header in {path}")
    theta = np.asarray(payload["theta"], dtype=float)
    policy = ToyVerifierPolicy(payload["num_features"], theta)
    return policy, int(payload["step"])
