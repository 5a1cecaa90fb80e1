"""Two-stage diarization: windowed local activity, embedding fusion, clustering.

Stage 1 runs the activity model on overlapping windows. Stage 2 extracts one
speaker embedding per (window, active slot) and channel, combines the channels
(uniformly, by attention-weighted average, or by picking the highest-weighted
channel), clusters the fused embeddings, and stitches window-local activities
into one global segmentation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nm
from .channel_comm import UnsupportedOperationError
from .metrics import MS, Diarization, Segment, clean_segments, to_ms
from .model import EendModel

FUSION_MODES = ("average", "argmax", "weighted")
EMBED_PROJECTION_SEED = 90210


class StitchError(RuntimeError):
    """A valid local speaker has no global label."""


@dataclass
class PipelineOptions:
    window_frames: int = 200
    hop_frames: int = 100
    frame_sec: float = 0.1
    fusion_mode: str = "weighted"
    attn_layer: int = -1
    cluster_threshold: float = 0.6
    min_frames: float = 10.0
    exclude_overlap: bool = True
    per_recording_weights: bool = False
    # "hard" stitches argmax-class activity; "soft" stitches the marginals.
    # Hard is the default: diffuse marginals sit under the 0.5 binarization
    # threshold and turn into misses.
    activity_decode: str = "hard"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise nm.ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.hop_frames < 1 or self.window_frames < 1:
            raise nm.ConfigError("window and hop must be positive")
        if self.activity_decode not in ("hard", "soft"):
            raise nm.ConfigError("activity_decode must be 'hard' or 'soft'")


def pipeline_options_from_dict(data: dict) -> PipelineOptions:
    allowed = {f.name for f in fields(PipelineOptions)}
    unknown = set(data) - allowed
    if unknown:
        raise nm.ConfigError(f"unknown PipelineOptions keys: {sorted(unknown)}")
    return PipelineOptions(**data)


def plan_windows(total_frames: int, window_frames: int = 200, hop_frames: int = 100) -> list[tuple[int, int]]:
    """Ordered spans covering [0, total); the last span ends exactly at total."""
    if total_frames < 1:
        raise ValueError("recording has no frames")
    spans = []
    start = 0
    while True:
        end = min(start + window_frames, total_frames)
        spans.append((start, end))
        if end >= total_frames:
            return spans
        start += hop_frames


def run_local_eend(model: EendModel, chunk: np.ndarray,
                   decode: str = "soft") -> tuple[np.ndarray, list[np.ndarray]]:
    """[C, T, F] chunk -> per-frame speaker activity [T, S] and attention tensors.

    Soft decode returns the per-speaker marginals; hard decode binarizes via
    the argmax class.
    """
    from .backend import powerset_decode_hard

    if decode == "soft":
        return model.activity(chunk)
    logits, attn = model.forward(chunk)
    return powerset_decode_hard(logits.data, model.codec), [w.data for w in attn]


def spatial_channel_weights(attn_tensors: list[np.ndarray], layer_index: int = -1) -> np.ndarray:
    """Channel weights from one communication layer's attention.

    Averaging [T, H, C, C] weights over frames and heads gives a global C x C
    map; averaging that over queries (rows) gives the per-channel weights.
    """
    if not attn_tensors:
        raise UnsupportedOperationError(
            "this model variant records no cross-channel attention"
        )
    s_global = attn_tensors[layer_index].mean(axis=(0, 1))
    return s_global.mean(axis=0)


def embedding_projection(feature_dim: int, seed: int = EMBED_PROJECTION_SEED) -> np.ndarray:
    """Fixed random orthogonal projection used by the statistics-pooling extractor."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    return q * np.sign(np.diag(r))


def extract_embedding(features: np.ndarray, activity: np.ndarray, projection: np.ndarray,
                      min_frames: float = 10.0) -> np.ndarray | None:
    """Activity-weighted mean and std of projected features, L2-normalized.

    Returns None when the activity mass is under min_frames. Scaling the
    activity by a positive constant does not change the result.
    """
    total = float(activity.sum())
    if total < min_frames:
        return None
    w = activity / total
    z = features @ projection
    mu = w @ z
    var = w @ (z - mu) ** 2
    emb = np.concatenate([mu, np.sqrt(np.maximum(var, 0.0))])
    norm = np.linalg.norm(emb)
    if norm == 0:
        return None
    return emb / norm


def fuse_embeddings(per_channel: np.ndarray, valid: np.ndarray, weights: np.ndarray | None,
                    mode: str) -> np.ndarray | None:
    """Combine per-channel embeddings [C, E] into one unit vector.

    argmax returns the valid channel with the largest weight verbatim;
    weighted renormalizes the weights over the valid channels; average uses
    uniform weights. Returns None when no channel is valid.
    """
    if mode not in FUSION_MODES:
        raise nm.ConfigError(f"fusion mode must be one of {FUSION_MODES}")
    per_channel = np.asarray(per_channel)
    valid = np.asarray(valid, dtype=bool)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return None
    if mode == "average":
        weights = np.ones(per_channel.shape[0])
    elif weights is None:
        raise nm.ConfigError(f"fusion mode {mode!r} requires channel weights")
    weights = np.asarray(weights, dtype=np.float64)
    if mode == "argmax":
        best = idx[np.argmax(weights[idx])]  # ties resolve to the lowest index
        return per_channel[best]
    w = weights[idx]
    total = w.sum()
    if total <= 0:
        return None
    fused = (w / total) @ per_channel[idx]
    norm = np.linalg.norm(fused)
    if norm == 0:
        return None
    return fused / norm


def cluster_ahc(embeddings: list[np.ndarray], threshold: float = 0.6) -> list[int]:
    """Average-linkage agglomeration on cosine distance.

    Merging continues while the smallest linkage distance is below the
    threshold; ties pick the lexicographically smallest pair. Labels are
    numbered by each cluster's smallest member index.
    """
    n = len(embeddings)
    if n == 0:
        return []
    vecs = np.asarray(embeddings)
    dist = 1.0 - vecs @ vecs.T
    size = {i: 1 for i in range(n)}
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    active = sorted(size)
    while len(active) > 1:
        best = None
        for ai, i in enumerate(active):
            for j in active[ai + 1 :]:
                d = dist[i, j]
                if best is None or d < best[0]:
                    best = (d, i, j)
        d, i, j = best
        if d >= threshold:
            break
        total = size[i] + size[j]
        for k in active:
            if k in (i, j):
                continue
            merged = (size[i] * dist[i, k] + size[j] * dist[j, k]) / total
            dist[i, k] = dist[k, i] = merged
        size[i] = total
        members[i].extend(members[j])
        del members[j], size[j]
        active.remove(j)
    order = sorted(members, key=lambda c: min(members[c]))
    labels = [0] * n
    for cluster_id, root in enumerate(order):
        for member in members[root]:
            labels[member] = cluster_id
    return labels


@dataclass
class SlotEntry:
    """One valid (window, local speaker) with its in-window activity."""

    window: int
    slot: int
    activity: np.ndarray


def stitch(spans: list[tuple[int, int]], entries: list[SlotEntry], labels: dict[tuple[int, int], str],
           total_frames: int, frame_sec: float = 0.1, recording: str = "rec") -> Diarization:
    """Average window-local activities per global speaker and binarize at 0.5.

    A frame's value for a speaker is the mean over the windows that cover the
    frame and map a local slot to that speaker (the max over slots within one
    window if several map to it). Runs become segments; small gaps merge and
    short segments drop.
    """
    per_label_num: dict[str, np.ndarray] = {}
    per_label_den: dict[str, np.ndarray] = {}
    by_window_label: dict[tuple[int, str], np.ndarray] = {}
    for entry in entries:
        key = (entry.window, entry.slot)
        if key not in labels:
            raise StitchError(f"no global label for active local speaker {key}")
        label = labels[key]
        wkey = (entry.window, label)
        if wkey in by_window_label:
            by_window_label[wkey] = np.maximum(by_window_label[wkey], entry.activity)
        else:
            by_window_label[wkey] = np.asarray(entry.activity, dtype=np.float64)
    for (window, label), activity in by_window_label.items():
        a, b = spans[window]
        if label not in per_label_num:
            per_label_num[label] = np.zeros(total_frames)
            per_label_den[label] = np.zeros(total_frames)
        per_label_num[label][a:b] += activity
        per_label_den[label][a:b] += 1.0
    raw: list[Segment] = []
    for label in sorted(per_label_num):
        num, den = per_label_num[label], per_label_den[label]
        covered = den > 0
        mean = np.zeros(total_frames)
        mean[covered] = num[covered] / den[covered]
        on = mean >= 0.5
        t = 0
        while t < total_frames:
            if on[t]:
                start = t
                while t < total_frames and on[t]:
                    t += 1
                onset_ms = to_ms(start * frame_sec)
                end_ms = to_ms(t * frame_sec)
                raw.append(Segment(onset_ms / MS, (end_ms - onset_ms) / MS, label))
            else:
                t += 1
    return Diarization(recording, clean_segments(raw))


def average_probs_across_channels(per_channel_probs: np.ndarray) -> np.ndarray:
    """Mean of per-channel activity matrices after slot alignment to channel 0.

    Slots are matched by soft activity overlap (sum of per-frame minima) with
    an optimal assignment per channel.
    """
    from .metrics import hungarian

    probs = np.asarray(per_channel_probs, dtype=np.float64)
    c, _, s = probs.shape
    aligned = [probs[0]]
    for ch in range(1, c):
        overlap = np.zeros((s, s))
        for i in range(s):
            for j in range(s):
                overlap[i, j] = np.minimum(probs[0][:, i], probs[ch][:, j]).sum()
        reordered = np.zeros_like(probs[ch])
        for i, j in hungarian(-overlap):
            reordered[:, i] = probs[ch][:, j]
        aligned.append(reordered)
    # anchored mean: identical channels average to channel 0 exactly
    out = aligned[0].copy()
    if c > 1:
        delta = np.zeros_like(out)
        for ch in range(1, c):
            delta += aligned[ch] - aligned[0]
        out += delta / c
    return out


# ---------------------------------------------------------------------------
# recording-level orchestration
# ---------------------------------------------------------------------------


@dataclass
class StageTimings:
    local_eend: float = 0.0
    embedding: float = 0.0
    clustering: float = 0.0

    @property
    def total(self) -> float:
        return self.local_eend + self.embedding + self.clustering

    def to_dict(self) -> dict:
        return {
            "local_eend": self.local_eend,
            "embedding": self.embedding,
            "clustering": self.clustering,
            "total": self.total,
        }


@dataclass
class RecordingResult:
    diarization: Diarization
    timings: StageTimings
    channel_weights: list[np.ndarray] = field(default_factory=list)
    num_windows: int = 0


def _slot_masks(probs: np.ndarray, options: PipelineOptions) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Valid slots of one window: (slot, raw activity, extraction weights)."""
    out = []
    s_max = probs.shape[1]
    for slot in range(s_max):
        activity = probs[:, slot]
        if activity.sum() < options.min_frames:
            continue
        weights = activity
        if options.exclude_overlap:
            others = np.ones_like(activity)
            for other in range(s_max):
                if other != slot:
                    others = others * (1.0 - probs[:, other])
            masked = activity * others
            # a fully-overlapped speaker falls back to its raw activity
            if masked.sum() >= 1.0:
                weights = masked
        out.append((slot, activity, weights))
    return out


def _window_channel_weights(model, stage1_attn, options: PipelineOptions, num_channels: int):
    """Per-window channel weights, or None when fusion does not need them."""
    if options.fusion_mode == "average" or num_channels == 1:
        return [None] * len(stage1_attn)
    if model.config.variant != "chatt":
        raise UnsupportedOperationError(
            f"fusion mode {options.fusion_mode!r} needs channel attention, "
            f"which the {model.config.variant!r} variant does not produce"
        )
    weights = [spatial_channel_weights(attn, options.attn_layer) for attn in stage1_attn]
    if options.per_recording_weights:
        recording_mean = np.mean(weights, axis=0)
        weights = [recording_mean] * len(weights)
    return weights


def diarize_recording(model: EendModel, features: np.ndarray, options: PipelineOptions | None = None,
                      recording: str = "rec", embed_channel: int | None = None) -> RecordingResult:
    """Run the full two-stage pipeline on one recording.

    ``embed_channel`` restricts stage 2 to one channel (mic-dependent
    evaluation); fusion options are ignored in that case.
    """
    options = options or PipelineOptions()
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise nm.ShapeError(f"expected [C, T, F] features, got {feats.shape}")
    num_channels, total_frames, feature_dim = feats.shape
    if model.config.variant == "single":
        feats = feats[:1]
        num_channels = 1
    projection = embedding_projection(feature_dim)
    spans = plan_windows(total_frames, options.window_frames, options.hop_frames)
    timings = StageTimings()

    t0 = time.perf_counter()
    stage1 = [run_local_eend(model, feats[:, a:b], options.activity_decode) for a, b in spans]
    timings.local_eend = time.perf_counter() - t0

    stage1_probs = [probs for probs, _ in stage1]
    stage1_attn = [attn for _, attn in stage1]
    if embed_channel is None and num_channels > 1:
        window_weights = _window_channel_weights(model, stage1_attn, options, num_channels)
    else:
        window_weights = [None] * len(spans)

    t0 = time.perf_counter()
    entries: list[SlotEntry] = []
    embeddings: list[np.ndarray] = []
    for wi, (a, b) in enumerate(spans):
        probs = stage1_probs[wi]
        weights = window_weights[wi]
        for slot, activity, mask in _slot_masks(probs, options):
            if embed_channel is not None:
                fused = extract_embedding(feats[embed_channel, a:b], mask, projection, options.min_frames)
            elif num_channels == 1:
                fused = extract_embedding(feats[0, a:b], mask, projection, options.min_frames)
            elif options.fusion_mode == "argmax":
                best = int(np.argmax(weights))
                fused = extract_embedding(feats[best, a:b], mask, projection, options.min_frames)
            else:
                per_channel = []
                valid = []
                for c in range(num_channels):
                    emb = extract_embedding(feats[c, a:b], mask, projection, options.min_frames)
                    valid.append(emb is not None)
                    per_channel.append(emb if emb is not None else np.zeros(2 * feature_dim))
                fused = fuse_embeddings(np.asarray(per_channel), np.asarray(valid), weights,
                                        options.fusion_mode)
            if fused is None:
                continue
            entries.append(SlotEntry(wi, slot, activity))
            embeddings.append(fused)
    timings.embedding = time.perf_counter() - t0

    t0 = time.perf_counter()
    cluster_ids = cluster_ahc(embeddings, options.cluster_threshold)
    labels = {
        (entry.window, entry.slot): f"g{cluster_ids[i]}" for i, entry in enumerate(entries)
    }
    diar = stitch(spans, entries, labels, total_frames, options.frame_sec, recording)
    timings.clustering = time.perf_counter() - t0

    return RecordingResult(
        diarization=diar,
        timings=timings,
        channel_weights=[w for w in window_weights if w is not None],
        num_windows=len(spans),
    )


def diarize_per_channel(model: EendModel, features: np.ndarray, options: PipelineOptions | None = None,
                        recording: str = "rec") -> list[Diarization]:
    """Mic-dependent outputs: one diarization per input channel.

    The single variant runs the whole pipeline on each channel; multi-channel
    variants run stage 1 once and cluster each channel's embeddings separately.
    """
    options = options or PipelineOptions()
    feats = np.asarray(features, dtype=np.float64)
    out = []
    for c in range(feats.shape[0]):
        if model.config.variant == "single":
            result = diarize_recording(model, feats[c : c + 1], options, recording)
        else:
            result = diarize_recording(model, feats, options, recording, embed_channel=c)
        out.append(result.diarization)
    return out


def diarize_average_probs(model: EendModel, features: np.ndarray, options: PipelineOptions | None = None,
                          recording: str = "rec") -> RecordingResult:
    """Per-channel single-model activity averaged into one fused output.

    Stage 1 runs the model on each channel separately; activities are aligned
    and averaged, embeddings are extracted per channel against the fused
    activity and combined uniformly.
    """
    options = options or PipelineOptions()
    if model.config.variant != "single":
        raise nm.ConfigError("probability averaging is a single-channel baseline")
    feats = np.asarray(features, dtype=np.float64)
    num_channels, total_frames, feature_dim = feats.shape
    projection = embedding_projection(feature_dim)
    spans = plan_windows(total_frames, options.window_frames, options.hop_frames)
    timings = StageTimings()

    t0 = time.perf_counter()
    fused_probs = []
    for a, b in spans:
        per_channel = np.stack(
            [run_local_eend(model, feats[c : c + 1, a:b], options.activity_decode)[0]
             for c in range(num_channels)]
        )
        fused_probs.append(average_probs_across_channels(per_channel))
    timings.local_eend = time.perf_counter() - t0

    t0 = time.perf_counter()
    entries: list[SlotEntry] = []
    embeddings: list[np.ndarray] = []
    for wi, (a, b) in enumerate(spans):
        for slot, activity, mask in _slot_masks(fused_probs[wi], options):
            per_channel = []
            valid = []
            for c in range(num_channels):
                emb = extract_embedding(feats[c, a:b], mask, projection, options.min_frames)
                valid.append(emb is not None)
                per_channel.append(emb if emb is not None else np.zeros(2 * feature_dim))
            fused = fuse_embeddings(np.asarray(per_channel), np.asarray(valid), None, "average")
            if fused is None:
                continue
            entries.append(SlotEntry(wi, slot, activity))
            embeddings.append(fused)
    timings.embedding = time.perf_counter() - t0

    t0 = time.perf_counter()
    cluster_ids = cluster_ahc(embeddings, options.cluster_threshold)
    labels = {(e.window, e.slot): f"g{cluster_ids[i]}" for i, e in enumerate(entries)}
    diar = stitch(spans, entries, labels, total_frames, options.frame_sec, recording)
    timings.clustering = time.perf_counter() - t0
    return RecordingResult(diar, timings, [], len(spans))


def attention_summary(model: EendModel, features: np.ndarray, options: PipelineOptions | None = None,
                      chunk_index: int = 0) -> list[np.ndarray]:
    """Per-layer global channel-attention maps (mean over frames and heads) for one window."""
    options = options or PipelineOptions()
    feats = np.asarray(features, dtype=np.float64)
    spans = plan_windows(feats.shape[1], options.window_frames, options.hop_frames)
    if not 0 <= chunk_index < len(spans):
        raise IndexError(f"chunk index {chunk_index} outside [0, {len(spans)})")
    a, b = spans[chunk_index]
    _, attn = run_local_eend(model, feats[:, a:b])
    if not attn:
        raise UnsupportedOperationError("this model variant records no cross-channel attention")
    return [w.mean(axis=(0, 1)) for w in attn]
