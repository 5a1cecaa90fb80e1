"""Deterministic synthetic multi-channel meeting generator.

Each speaker has a unit signature vector; each (mic, speaker) pair has a gain
1/(1+distance). Features are the gain-weighted sum of active signatures plus
i.i.d. Gaussian noise, so inter-channel level differences are the spatial cue.
Confusable-pair scenarios give two speakers the same signature but distant
positions: indistinguishable from any single channel, separable from the gain
pattern across channels.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .metrics import MS, Diarization, Segment, diarization_to_rttm, diarizations_from_rttm, to_ms
from .model import atomic_write_bytes, atomic_write_text

TALK_MEAN_FRAMES = 30
SILENCE_MEAN_FRAMES = 20
FEATURES_MAGIC = b"MCDZ1"

# confusable-pair acceptance bounds
MAX_GAIN_COSINE = 0.7
MIN_EMBED_ANGLE_GAP = 0.12  # radians, predicted channel-mean embedding angle gap
MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    """Scenario constraints could not be satisfied."""


@dataclass
class ScenarioConfig:
    num_channels: int = 4
    num_speakers: int = 3
    duration_frames: int = 400
    frame_sec: float = 0.1
    room: tuple[float, float] = (6.0, 4.0)
    mic_positions: list[tuple[float, float]] | None = None
    speaker_positions: list[tuple[float, float]] | None = None
    overlap_ratio: float | None = None  # None keeps the natural turn statistics
    overlap_tolerance: float = 0.05
    noise_std: float = 0.05
    signature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_channels < 1 or self.num_speakers < 1:
            raise ValueError("need at least one channel and one speaker")
        if self.duration_frames < 1 or self.frame_sec <= 0:
            raise ValueError("invalid duration")
        for positions, count in ((self.mic_positions, self.num_channels),
                                 (self.speaker_positions, self.num_speakers)):
            if positions is None:
                continue
            if len(positions) != count:
                raise ValueError(f"expected {count} positions, got {len(positions)}")
            for x, y in positions:
                if not (0 <= x <= self.room[0] and 0 <= y <= self.room[1]):
                    raise ValueError(f"position ({x}, {y}) outside room {self.room}")


@dataclass
class Scenario:
    config: ScenarioConfig
    activity: np.ndarray  # [T, N] binary
    signatures: np.ndarray  # [N, F] unit rows
    gains: np.ndarray  # [C, N]
    features: np.ndarray  # [C, T, F]
    reference: Diarization
    confusable: bool = False


def gain_matrix(mics: np.ndarray, speakers: np.ndarray) -> np.ndarray:
    dist = np.sqrt(((mics[:, None, :] - speakers[None, :, :]) ** 2).sum(-1))
    return 1.0 / (1.0 + dist)


def overlap_fraction(activity: np.ndarray) -> float | None:
    """Overlapped speech frames as a fraction of frames with any speech."""
    counts = activity.sum(axis=1)
    speech = counts >= 1
    if not speech.any():
        return None
    return float((counts >= 2).sum() / speech.sum())


def _expected_overlap(duty: float, n: int) -> float:
    p_none = (1 - duty) ** n
    p_one = n * duty * (1 - duty) ** (n - 1)
    p_any = 1 - p_none
    return 0.0 if p_any <= 0 else (p_any - p_one) / p_any


def _silence_mean_for_target(target: float, n: int, talk_mean: float) -> float:
    """Silence run length whose stationary duty hits the target overlap fraction."""
    if n < 2 or _expected_overlap(0.99, n) < target:
        raise GenerationError(f"overlap target {target} infeasible for {n} speakers")
    lo, hi = 1e-3, 0.99
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _expected_overlap(mid, n) < target:
            lo = mid
        else:
            hi = mid
    duty = 0.5 * (lo + hi)
    return talk_mean * (1 - duty) / duty


def _sample_activity(rng: np.random.Generator, t_frames: int, n: int, silence_mean: float) -> np.ndarray:
    activity = np.zeros((t_frames, n))
    duty = TALK_MEAN_FRAMES / (TALK_MEAN_FRAMES + silence_mean)
    for s in range(n):
        talking = rng.random() < duty
        t = 0
        while t < t_frames:
            mean = TALK_MEAN_FRAMES if talking else silence_mean
            run = int(rng.geometric(1.0 / mean))
            if talking:
                activity[t : t + run, s] = 1.0
            t += run
            talking = not talking
    return activity


def _draw_activity(rng, config: ScenarioConfig) -> np.ndarray:
    if config.overlap_ratio is None:
        silence_mean = float(SILENCE_MEAN_FRAMES)
    else:
        silence_mean = _silence_mean_for_target(
            config.overlap_ratio, config.num_speakers, TALK_MEAN_FRAMES
        )
    for _ in range(MAX_ATTEMPTS):
        activity = _sample_activity(rng, config.duration_frames, config.num_speakers, silence_mean)
        ratio = overlap_fraction(activity)
        if ratio is None:
            continue
        if config.overlap_ratio is None or abs(ratio - config.overlap_ratio) <= config.overlap_tolerance:
            return activity
    raise GenerationError(
        f"could not hit overlap target {config.overlap_ratio} within {MAX_ATTEMPTS} attempts"
    )


def _reference_from_activity(activity: np.ndarray, frame_sec: float, recording: str) -> Diarization:
    segments = []
    t_frames, n = activity.shape
    for s in range(n):
        active = activity[:, s] > 0.5
        t = 0
        while t < t_frames:
            if active[t]:
                start = t
                while t < t_frames and active[t]:
                    t += 1
                # quantize to the millisecond grid so persisted RTTM round-trips
                onset_ms = to_ms(start * frame_sec)
                end_ms = to_ms(t * frame_sec)
                segments.append(Segment(onset_ms / MS, (end_ms - onset_ms) / MS, f"spk{s}"))
            else:
                t += 1
    return Diarization(recording, segments)


def _build_features(rng, activity, gains, signatures, noise_std) -> np.ndarray:
    c = gains.shape[0]
    t_frames, n = activity.shape
    f = signatures.shape[1]
    features = np.zeros((c, t_frames, f))
    for s in range(n):
        amp = np.multiply.outer(gains[:, s], activity[:, s])  # [C, T], exact for 0/1 activity
        features += amp[:, :, None] * signatures[s]
    if noise_std > 0:
        features += noise_std * rng.standard_normal((c, t_frames, f))
    return features


def _resolve_positions(rng, config) -> tuple[np.ndarray, np.ndarray]:
    w, h = config.room
    if config.mic_positions is not None:
        mics = np.asarray(config.mic_positions, dtype=np.float64)
    else:
        mics = rng.uniform([0, 0], [w, h], size=(config.num_channels, 2))
    if config.speaker_positions is not None:
        speakers = np.asarray(config.speaker_positions, dtype=np.float64)
    else:
        speakers = rng.uniform([0, 0], [w, h], size=(config.num_speakers, 2))
    return mics, speakers


def _assemble(config, rng, mics, speakers, signatures, confusable) -> Scenario:
    resolved = replace(
        config,
        mic_positions=[tuple(p) for p in mics.tolist()],
        speaker_positions=[tuple(p) for p in speakers.tolist()],
    )
    activity = _draw_activity(rng, config)
    gains = gain_matrix(mics, speakers)
    features = _build_features(rng, activity, gains, signatures, config.noise_std)
    reference = _reference_from_activity(activity, config.frame_sec, f"scn{config.seed:08d}")
    return Scenario(resolved, activity, signatures, gains, features, reference, confusable)


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Sample a scenario; every output is a pure function of the config (incl. seed)."""
    rng = np.random.default_rng(config.seed)
    mics, speakers = _resolve_positions(rng, config)
    signatures = rng.standard_normal((config.num_speakers, config.signature_dim))
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)
    return _assemble(config, rng, mics, speakers, signatures, confusable=False)


def predicted_angle_gap(gains: np.ndarray, noise_std: float, signature_dim: int) -> float:
    """Predicted gap between the two shared-signature speakers' mean embedding angles.

    The statistics-pooling embedding of a speaker with gain g on one channel
    sits at angle atan2(noise_std * sqrt(F), g) between its signal and noise
    parts; the channel mean of that angle is what fused embeddings separate on.
    """
    s_norm = noise_std * math.sqrt(signature_dim)
    theta0 = np.arctan2(s_norm, gains[:, 0]).mean()
    theta1 = np.arctan2(s_norm, gains[:, 1]).mean()
    return float(abs(theta0 - theta1))


def confusable_pair_ok(gains: np.ndarray, noise_std: float, signature_dim: int) -> bool:
    g0, g1 = gains[:, 0], gains[:, 1]
    cos = float(g0 @ g1 / (np.linalg.norm(g0) * np.linalg.norm(g1)))
    if cos >= MAX_GAIN_COSINE:
        return False
    if noise_std == 0:
        # no noise floor means embeddings normalize the gain away entirely;
        # only the gain-cosine bound is meaningful
        return True
    return predicted_angle_gap(gains, noise_std, signature_dim) >= MIN_EMBED_ANGLE_GAP


def make_confusable_pair(config: ScenarioConfig) -> Scenario:
    """Scenario whose speakers 0 and 1 share a signature but differ spatially.

    Geometry: mic 0 sits on the perpendicular bisector of the two speakers
    (equal gains, so channel 0 alone cannot tell them apart); most remaining
    mics cluster near speaker 0 and the rest near speaker 1, which keeps the
    gain columns' cosine under MAX_GAIN_COSINE and the predicted embedding
    angle gap above MIN_EMBED_ANGLE_GAP.
    """
    if config.num_speakers < 2:
        raise GenerationError("confusable pair needs at least two speakers")
    if config.num_channels < 2:
        raise GenerationError("confusable pair needs at least two channels")
    rng = np.random.default_rng(config.seed)
    w, h = config.room
    diag = math.hypot(w, h)

    def clip(p):
        return np.clip(p, [0.0, 0.0], [w, h])

    for _ in range(MAX_ATTEMPTS):
        spk0 = rng.uniform([0.5, 0.5], [w - 0.5, h - 0.5])
        spk1 = None
        for _ in range(50):
            cand = rng.uniform([0, 0], [w, h])
            if np.linalg.norm(cand - spk0) >= 0.55 * diag:
                spk1 = cand
                break
        if spk1 is None:
            continue
        mid = 0.5 * (spk0 + spk1)
        axis = spk1 - spk0
        normal = np.array([-axis[1], axis[0]]) / np.linalg.norm(axis)
        mic0 = None
        for _ in range(50):
            t = rng.uniform(-diag, diag)
            cand = mid + t * normal
            if 0 <= cand[0] <= w and 0 <= cand[1] <= h:
                mic0 = cand
                break
        if mic0 is None:
            continue
        others = config.num_channels - 1
        near0 = max(1, (2 * others) // 3)
        mics = [mic0]
        for _ in range(near0):
            radius = rng.uniform(0.05, 0.35)
            angle = rng.uniform(0, 2 * math.pi)
            mics.append(clip(spk0 + radius * np.array([math.cos(angle), math.sin(angle)])))
        for _ in range(others - near0):
            radius = rng.uniform(0.6, 1.2)
            angle = rng.uniform(0, 2 * math.pi)
            mics.append(clip(spk1 + radius * np.array([math.cos(angle), math.sin(angle)])))
        speakers = [spk0, spk1]
        for _ in range(config.num_speakers - 2):
            speakers.append(rng.uniform([0, 0], [w, h]))
        mics = np.array(mics)
        speakers = np.array(speakers)
        gains = gain_matrix(mics, speakers)
        if not confusable_pair_ok(gains, config.noise_std, config.signature_dim):
            continue
        signatures = rng.standard_normal((config.num_speakers, config.signature_dim))
        signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)
        signatures[1] = signatures[0]
        return _assemble(config, rng, mics, speakers, signatures, confusable=True)
    raise GenerationError(
        f"could not satisfy the gain-separation bound within {MAX_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def features_to_bytes(features: np.ndarray) -> bytes:
    c, t, f = features.shape
    return FEATURES_MAGIC + struct.pack("<III", c, t, f) + features.astype("<f8").tobytes()


def features_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:5] != FEATURES_MAGIC:
        raise ValueError(f"bad feature file magic {blob[:5]!r}")
    c, t, f = struct.unpack("<III", blob[5:17])
    data = np.frombuffer(blob[17:], dtype="<f8")
    if data.size != c * t * f:
        raise ValueError(f"feature payload size {data.size} != {c}*{t}*{f}")
    return data.reshape(c, t, f).astype(np.float64)


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


def save_scenario(directory: str, scenario: Scenario) -> None:
    os.makedirs(directory, exist_ok=True)
    atomic_write_bytes(os.path.join(directory, "features.bin"), features_to_bytes(scenario.features))
    atomic_write_text(os.path.join(directory, "reference.rttm"), diarization_to_rttm(scenario.reference))
    doc = asdict(scenario.config)
    doc["confusable"] = scenario.confusable
    atomic_write_text(os.path.join(directory, "config.json"), json.dumps(doc, sort_keys=True, indent=1))


@dataclass
class LoadedScenario:
    recording: str
    features: np.ndarray
    reference: Diarization
    activity: np.ndarray
    config: ScenarioConfig
    confusable: bool
    gains: np.ndarray | None = None


def activity_from_reference(reference: Diarization, t_frames: int, frame_sec: float,
                            num_speakers: int) -> np.ndarray:
    activity = np.zeros((t_frames, num_speakers))
    for seg in reference.segments:
        s = int(seg.speaker.removeprefix("spk"))
        a = int(round(seg.onset / frame_sec))
        b = int(round((seg.onset + seg.duration) / frame_sec))
        activity[a:b, s] = 1.0
    return activity


def load_scenario(directory: str) -> LoadedScenario:
    with open(os.path.join(directory, "config.json")) as fh:
        doc = json.load(fh)
    confusable = bool(doc.pop("confusable", False))
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
    doc["room"] = tuple(doc["room"])
    for key in ("mic_positions", "speaker_positions"):
        if doc.get(key) is not None:
            doc[key] = [tuple(p) for p in doc[key]]
    config = ScenarioConfig(**doc)
    features = read_features(os.path.join(directory, "features.bin"))
    with open(os.path.join(directory, "reference.rttm")) as fh:
        diarizations = diarizations_from_rttm(fh.read())
    if len(diarizations) != 1:
        raise ValueError(f"expected one recording in reference.rttm, got {sorted(diarizations)}")
    reference = next(iter(diarizations.values()))
    activity = activity_from_reference(reference, config.duration_frames, config.frame_sec,
                                       config.num_speakers)
    gains = None
    if config.mic_positions is not None and config.speaker_positions is not None:
        gains = gain_matrix(np.asarray(config.mic_positions), np.asarray(config.speaker_positions))
    return LoadedScenario(reference.recording, features, reference, activity, config, confusable, gains)


def generate_split(out_dir: str, split: str, count: int, template: ScenarioConfig,
                   base_seed: int, confusable: bool = False) -> list[str]:
    """Generate ``count`` scenarios under out_dir/split and write the manifest."""
    split_dir = os.path.join(out_dir, split)
    os.makedirs(split_dir, exist_ok=True)
    names = []
    for i in range(count):
        config = replace(template, seed=base_seed + i)
        scenario = make_confusable_pair(config) if confusable else generate_scenario(config)
        name = scenario.reference.recording
        save_scenario(os.path.join(split_dir, name), scenario)
        names.append(name)
    manifest = {"split": split, "scenarios": names}
    atomic_write_text(os.path.join(split_dir, "manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
    return names


def load_split(out_dir: str, split: str) -> list[LoadedScenario]:
    split_dir = os.path.join(out_dir, split)
    manifest_path = os.path.join(split_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return [load_scenario(os.path.join(split_dir, name)) for name in manifest["scenarios"]]
