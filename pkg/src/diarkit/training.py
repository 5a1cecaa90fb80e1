"""Two-phase training: single-channel pretraining, then multi-channel fine-tuning.

Fine-tuning starts from a pretrained single-channel model with freshly
inserted, identity-initialized communication blocks, and samples the channel
count per chunk so the result stays agnostic to the number of microphones.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nm
from .backend import powerset_encode
from .metrics import compute_der
from .model import EendModel, ModelConfig, build_multichannel_from_single
from .pipeline import PipelineOptions, diarize_recording
from .simgen import LoadedScenario


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    seed: int = 0
    clip_norm: float = 5.0
    chunk_frames: int = 200
    channel_choices: tuple[int, ...] = (2, 3, 4)
    freeze_encoder: bool = False

    def __post_init__(self):
        # learning rate 0 is allowed as an explicit no-op (smoke checks)
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.max_steps < 0 or self.chunk_frames < 1:
            raise ValueError("invalid batch/steps/chunk configuration")
        if not self.channel_choices:
            raise ValueError("channel_choices must be nonempty")


def train_config_from_dict(data: dict) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise nm.ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
    if "channel_choices" in data:
        data = dict(data, channel_choices=tuple(data["channel_choices"]))
    return TrainConfig(**data)


class Adam:
    """Plain Adam with bias correction; no schedules."""

    def __init__(self, params: list[nm.Parameter], config: TrainConfig):
        self.params = params
        self.config = config
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        total_sq = 0.0
        for p in self.params:
            if p.grad is not None:
                total_sq += float((p.grad * p.grad).sum())
        norm = np.sqrt(total_sq)
        scale = cfg.clip_norm / norm if cfg.clip_norm > 0 and norm > cfg.clip_norm else 1.0
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[p.name]
            v = self.v[p.name]
            m[...] = cfg.beta1 * m + (1 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1 - cfg.beta2) * (g * g)
            m_hat = m / (1 - cfg.beta1**self.t)
            v_hat = v / (1 - cfg.beta2**self.t)
            p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def chunk_targets(activity: np.ndarray, codec) -> np.ndarray:
    """Powerset targets for one chunk.

    Speakers active in the chunk get slots ordered by first-activity frame;
    chunks with more speakers than slots keep the most active ones.
    """
    totals = activity.sum(axis=0)
    active = [s for s in range(activity.shape[1]) if totals[s] > 0]
    if len(active) > codec.max_speakers:
        active = sorted(active, key=lambda s: (-totals[s], s))[: codec.max_speakers]
    first_frame = {s: int(np.argmax(activity[:, s] > 0)) for s in active}
    ordered = sorted(active, key=lambda s: (first_frame[s], s))
    multilabel = np.zeros((activity.shape[0], codec.max_speakers))
    for slot, s in enumerate(ordered):
        multilabel[:, slot] = activity[:, s]
    indices, _ = powerset_encode(multilabel, codec)
    return indices


def _sample_chunk(rng, scenarios: list[LoadedScenario], chunk_frames: int):
    scn = scenarios[int(rng.integers(len(scenarios)))]
    total = scn.features.shape[1]
    if total <= chunk_frames:
        return scn, 0, total
    start = int(rng.integers(0, total - chunk_frames + 1))
    return scn, start, start + chunk_frames


def _run_training(model: EendModel, scenarios: list[LoadedScenario], config: TrainConfig,
                  multichannel: bool) -> list[tuple[int, float]]:
    if not scenarios:
        raise TrainingError("no training scenarios")
    rng = np.random.default_rng(config.seed)
    params = model.trainable_params(config.freeze_encoder)
    optimizer = Adam(params, config)
    curve: list[tuple[int, float]] = []
    for step in range(config.max_steps):
        model.zero_grad()
        batch_loss = 0.0
        for _ in range(config.batch_size):
            scn, start, end = _sample_chunk(rng, scenarios, config.chunk_frames)
            targets = chunk_targets(scn.activity[start:end], model.codec)
            if multichannel:
                available = scn.features.shape[0]
                choices = [c for c in config.channel_choices if c <= available] or [available]
                count = choices[int(rng.integers(len(choices)))]
                channels = np.sort(rng.choice(available, size=count, replace=False))
                feats = scn.features[channels, start:end]
            else:
                feats = scn.features[:1, start:end]
            logits, _ = model.forward(feats)
            loss = nm.cross_entropy(logits, targets)
            nm.backward(loss)
            batch_loss += loss.item()
        mean_loss = batch_loss / config.batch_size
        if not np.isfinite(mean_loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        for p in params:
            if p.grad is not None:
                p.grad /= config.batch_size
        optimizer.step()
        curve.append((step, mean_loss))
    return curve


def train_single_channel(scenarios: list[LoadedScenario], model_config: ModelConfig,
                         config: TrainConfig) -> tuple[EendModel, list[tuple[int, float]]]:
    """Pretrain the single-channel model on channel-0 chunks."""
    if model_config.variant != "single":
        raise nm.ConfigError("pretraining expects the single variant")
    model = EendModel(model_config, seed=config.seed)
    curve = _run_training(model, scenarios, config, multichannel=False)
    return model, curve


def finetune_multichannel(single: EendModel, variant: str, scenarios: list[LoadedScenario],
                          config: TrainConfig) -> tuple[EendModel, list[tuple[int, float]]]:
    """Insert identity-initialized communication blocks and fine-tune everything."""
    model = build_multichannel_from_single(single, variant, seed=config.seed)
    curve = _run_training(model, scenarios, config, multichannel=True)
    return model, curve


def loss_curve_csv(curve: list[tuple[int, float]]) -> str:
    lines = ["step,loss"] + [f"{step},{loss!r}" for step, loss in curve]
    return "".join(line + "\n" for line in lines)


def evaluate(model: EendModel, scenarios: list[LoadedScenario],
             options: PipelineOptions | None = None, collar: float = 0.0) -> dict:
    """Full-pipeline DER per recording plus the unweighted macro average."""
    if not scenarios:
        raise ValueError("no scenarios to evaluate")
    options = options or PipelineOptions()
    recordings = {}
    ders = []
    for scn in scenarios:
        result = diarize_recording(model, scn.features, options, scn.recording)
        breakdown = compute_der(scn.reference, result.diarization, collar)
        recordings[scn.recording] = breakdown.to_dict()
        ders.append(breakdown.der)
    return {"recordings": recordings, "macro_der": float(np.mean(ders))}
