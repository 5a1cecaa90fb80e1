"""Diarization containers, RTTM interchange, DER scoring, and hypothesis fusion.

All scoring works on an exact millisecond grid: segment boundaries are
quantized to integer milliseconds and every interval computation is integer
arithmetic, so results carry no sampling error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MS = 1000

# stitch post-processing: gaps under this merge, segments under this drop
MERGE_GAP_S = 0.1
MIN_SEGMENT_S = 0.2


class RttmParseError(ValueError):
    """A malformed RTTM line."""


class ScoringError(ValueError):
    """Scoring preconditions violated (e.g. empty reference)."""


class Segment(NamedTuple):
    onset: float
    duration: float
    speaker: str


class RttmSegment(NamedTuple):
    recording: str
    onset: float
    duration: float
    speaker: str


@dataclass
class Diarization:
    """A set of speaker-attributed segments for one recording."""

    recording: str
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        for seg in self.segments:
            if seg.duration <= 0:
                raise ValueError(f"non-positive duration in segment {seg}")
            if seg.onset < 0:
                raise ValueError(f"negative onset in segment {seg}")

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def total_speech(self) -> float:
        return sum(s.duration for s in self.segments)


def to_ms(seconds: float) -> int:
    return int(round(seconds * MS))


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------


def parse_rttm(text: str) -> list[RttmSegment]:
    """Parse SPEAKER lines; blank lines and '#' comments are skipped."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 10 or fields[0] != "SPEAKER":
            raise RttmParseError(f"line {lineno}: expected 10-field SPEAKER line, got {raw!r}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise RttmParseError(f"line {lineno}: bad onset/duration in {raw!r}") from exc
        if duration <= 0:
            raise RttmParseError(f"line {lineno}: non-positive duration {duration}")
        out.append(RttmSegment(fields[1], onset, duration, fields[7]))
    return out


def write_rttm(segments: Sequence[RttmSegment]) -> str:
    lines = [
        f"SPEAKER {s.recording} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>"
        for s in segments
    ]
    return "".join(line + "\n" for line in lines)


def diarization_to_rttm(diar: Diarization) -> str:
    segs = sorted(diar.segments, key=lambda s: (s.onset, s.speaker))
    return write_rttm([RttmSegment(diar.recording, s.onset, s.duration, s.speaker) for s in segs])


def diarizations_from_rttm(text: str) -> dict[str, Diarization]:
    by_rec: dict[str, list[Segment]] = {}
    for seg in parse_rttm(text):
        by_rec.setdefault(seg.recording, []).append(Segment(seg.onset, seg.duration, seg.speaker))
    return {rec: Diarization(rec, segs) for rec, segs in by_rec.items()}


# ---------------------------------------------------------------------------
# linear assignment
# ---------------------------------------------------------------------------


def _assignment_value(cost: np.ndarray) -> float:
    """Minimum total cost of assigning min(m, n) pairs (potentials + augmenting paths)."""
    if cost.size == 0:
        return 0.0
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape  # n <= m
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # match[j] = row assigned to column j (1-based, 0 = free)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        way = [0] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = 0.0
    for j in range(1, m + 1):
        if match[j]:
            total += a[match[j] - 1, j - 1]
    return total


def hungarian(cost) -> list[tuple[int, int]]:
    """Min-cost assignment of min(m, n) (row, col) pairs.

    Among cost ties the returned pair list, read in row order, is the
    lexicographically smallest one: each row in turn gets the smallest column
    that still allows an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian requires finite costs")
    m, n = cost.shape
    want = min(m, n)
    best = _assignment_value(cost)
    tol = 1e-9 * max(1.0, abs(best))

    pairs: list[tuple[int, int]] = []
    fixed_cost = 0.0
    free_rows = list(range(m))
    free_cols = list(range(n))
    for row in list(free_rows):
        if len(pairs) == want:
            break
        remaining_rows = [r for r in free_rows if r != row]
        chosen = None
        for col in free_cols:
            need = want - len(pairs) - 1
            sub = cost[np.ix_(remaining_rows, [c for c in free_cols if c != col])]
            if min(sub.shape) < need:
                continue
            value = fixed_cost + cost[row, col] + _assignment_value(sub)
            if value <= best + tol:
                chosen = col
                break
        if chosen is None:
            # optimal assignments leave this row out (possible when m > n)
            sub = cost[np.ix_(remaining_rows, free_cols)]
            if min(sub.shape) >= want - len(pairs) and fixed_cost + _assignment_value(sub) <= best + tol:
                free_rows.remove(row)
                continue
            raise AssertionError("assignment search lost optimality")
        pairs.append((row, chosen))
        fixed_cost += cost[row, chosen]
        free_rows.remove(row)
        free_cols.remove(chosen)
    return pairs


# ---------------------------------------------------------------------------
# interval machinery (integer milliseconds)
# ---------------------------------------------------------------------------


def _speaker_intervals_ms(diar: Diarization) -> dict[str, list[tuple[int, int]]]:
    """Per-speaker merged activity intervals."""
    raw: dict[str, list[tuple[int, int]]] = {}
    for seg in diar.segments:
        a = to_ms(seg.onset)
        b = to_ms(seg.onset + seg.duration)
        if b > a:
            raw.setdefault(seg.speaker, []).append((a, b))
    merged = {}
    for spk, ivs in raw.items():
        ivs.sort()
        out = [list(ivs[0])]
        for a, b in ivs[1:]:
            if a <= out[-1][1]:
                out[-1][1] = max(out[-1][1], b)
            else:
                out.append([a, b])
        merged[spk] = [(a, b) for a, b in out]
    return merged


def _active_at(intervals: list[tuple[int, int]], a: int, b: int) -> bool:
    # elementary intervals never straddle boundaries, so one-point test suffices
    mid = a
    return any(s <= mid < e for s, e in intervals)


def _elementary_spans(points: set[int]) -> list[tuple[int, int]]:
    cuts = sorted(points)
    return [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]


@dataclass
class DerBreakdown:
    missed: float
    false_alarm: float
    confusion: float
    total_reference: float

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.total_reference

    def to_dict(self) -> dict:
        return {
            "missed": self.missed,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "total": self.total_reference,
            "der": self.der,
        }

    def summary(self) -> str:
        return (
            f"DER {100 * self.der:.2f}% "
            f"(miss {self.missed:.3f}s, fa {self.false_alarm:.3f}s, "
            f"conf {self.confusion:.3f}s, ref {self.total_reference:.3f}s)"
        )


def compute_der(ref: Diarization, hyp: Diarization, collar_s: float = 0.0) -> DerBreakdown:
    """Instant-based DER with an optimal one-to-one speaker mapping.

    The collar removes +-collar_s around every reference segment boundary from
    scoring. With overlap, per-instant speaker multiplicities are compared:
    surplus reference speakers are misses, surplus hypothesis speakers are
    false alarms, and mismatched identities among the matched count are
    confusion.
    """
    if ref.recording != hyp.recording:
        raise ScoringError(f"recording mismatch: {ref.recording!r} vs {hyp.recording!r}")
    if not ref.segments:
        raise ScoringError("reference has no speech: DER undefined")

    ref_iv = _speaker_intervals_ms(ref)
    hyp_iv = _speaker_intervals_ms(hyp)

    collar = to_ms(collar_s)
    zones: list[tuple[int, int]] = []
    if collar > 0:
        for seg in ref.segments:
            a = to_ms(seg.onset)
            b = to_ms(seg.onset + seg.duration)
            zones.append((max(0, a - collar), a + collar))
            zones.append((max(0, b - collar), b + collar))

    points: set[int] = set()
    for ivs in list(ref_iv.values()) + list(hyp_iv.values()):
        for a, b in ivs:
            points.update((a, b))
    for a, b in zones:
        points.update((a, b))
    if len(points) < 2:
        points.update((0, 1))

    ref_spks = sorted(ref_iv)
    hyp_spks = sorted(hyp_iv)
    spans = []
    for a, b in _elementary_spans(points):
        if any(za <= a < zb for za, zb in zones):
            continue
        active_ref = [r for r in ref_spks if _active_at(ref_iv[r], a, b)]
        active_hyp = [h for h in hyp_spks if _active_at(hyp_iv[h], a, b)]
        if active_ref or active_hyp:
            spans.append((b - a, active_ref, active_hyp))

    overlap = np.zeros((len(ref_spks), len(hyp_spks)))
    r_index = {r: i for i, r in enumerate(ref_spks)}
    h_index = {h: i for i, h in enumerate(hyp_spks)}
    for dur, active_ref, active_hyp in spans:
        for r in active_ref:
            for h in active_hyp:
                overlap[r_index[r], h_index[h]] += dur
    mapping = {}
    if overlap.size:
        for ri, hi in hungarian(-overlap):
            mapping[ref_spks[ri]] = hyp_spks[hi]

    missed = falarm = confusion = total = 0
    for dur, active_ref, active_hyp in spans:
        nr, nh = len(active_ref), len(active_hyp)
        correct = sum(1 for r in active_ref if mapping.get(r) in active_hyp)
        missed += dur * max(0, nr - nh)
        falarm += dur * max(0, nh - nr)
        confusion += dur * (min(nr, nh) - correct)
        total += dur * nr
    if total == 0:
        raise ScoringError("reference has no scored speech: DER undefined")
    return DerBreakdown(missed / MS, falarm / MS, confusion / MS, total / MS)


# ---------------------------------------------------------------------------
# segment post-processing (shared by stitching and fusion)
# ---------------------------------------------------------------------------


def clean_segments(segments: Sequence[Segment]) -> list[Segment]:
    """Merge same-speaker gaps under MERGE_GAP_S, then drop segments under MIN_SEGMENT_S."""
    by_spk: dict[str, list[tuple[int, int]]] = {}
    for seg in segments:
        a = to_ms(seg.onset)
        b = to_ms(seg.onset + seg.duration)
        if b > a:
            by_spk.setdefault(seg.speaker, []).append((a, b))
    gap = to_ms(MERGE_GAP_S)
    min_dur = to_ms(MIN_SEGMENT_S)
    out: list[Segment] = []
    for spk in sorted(by_spk):
        ivs = sorted(by_spk[spk])
        merged = [list(ivs[0])]
        for a, b in ivs[1:]:
            if a - merged[-1][1] < gap:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        for a, b in merged:
            if b - a >= min_dur:
                out.append(Segment(a / MS, (b - a) / MS, spk))
    out.sort(key=lambda s: (s.onset, s.speaker))
    return out


# ---------------------------------------------------------------------------
# hypothesis fusion
# ---------------------------------------------------------------------------


def rank_weights(count: int, p: float) -> list[float]:
    """Weights proportional to 1/rank**p for ranked hypotheses."""
    return [1.0 / (k + 1) ** p for k in range(count)]


def dover_lap_fuse(hyps: Sequence[Diarization], weights: Sequence[float] | None = None) -> Diarization:
    """Label-aligned weighted voting over diarization hypotheses.

    Labels of every hypothesis are mapped onto hypothesis 0 via maximum
    overlap; at each instant the weighted mean speaker count (ties rounding
    down) decides how many labels are emitted, highest accumulated weight
    first.
    """
    hyps = list(hyps)
    if not hyps:
        raise ValueError("dover_lap_fuse needs at least one hypothesis")
    recording = hyps[0].recording
    for h in hyps[1:]:
        if h.recording != recording:
            raise ValueError("all hypotheses must describe the same recording")
    if weights is None:
        weights = [1.0] * len(hyps)
    weights = [float(w) for w in weights]
    if len(weights) != len(hyps) or any(w <= 0 for w in weights):
        raise ValueError("weights must be positive, one per hypothesis")
    if len(hyps) == 1:
        return Diarization(recording, list(hyps[0].segments))

    base_iv = _speaker_intervals_ms(hyps[0])
    base_spks = sorted(base_iv)
    mapped: list[dict[str, list[tuple[int, int]]]] = [base_iv]
    for k, hyp in enumerate(hyps[1:], start=1):
        iv = _speaker_intervals_ms(hyp)
        spks = sorted(iv)
        overlap = np.zeros((len(spks), len(base_spks)))
        points = set()
        for d in (iv, base_iv):
            for lst in d.values():
                for a, b in lst:
                    points.update((a, b))
        for a, b in _elementary_spans(points):
            for i, s in enumerate(spks):
                if not _active_at(iv[s], a, b):
                    continue
                for j, t in enumerate(base_spks):
                    if _active_at(base_iv[t], a, b):
                        overlap[i, j] += b - a
        label_map = {}
        if overlap.size:
            for i, j in hungarian(-overlap):
                label_map[spks[i]] = base_spks[j]
        mapped.append({label_map.get(s, f"sys{k}_{s}"): lst for s, lst in iv.items()})

    points = set()
    for iv in mapped:
        for lst in iv.values():
            for a, b in lst:
                points.update((a, b))
    if len(points) < 2:
        return Diarization(recording, [])

    all_labels = sorted({label for iv in mapped for label in iv})
    total_w = sum(weights)
    raw: list[Segment] = []
    for a, b in _elementary_spans(points):
        counts = 0.0
        label_w = {label: 0.0 for label in all_labels}
        for w, iv in zip(weights, mapped):
            active = [label for label, lst in iv.items() if _active_at(lst, a, b)]
            counts += w * len(active)
            for label in active:
                label_w[label] += w
        mean = counts / total_w
        k_out = int(math.floor(mean))
        if mean - k_out > 0.5:
            k_out += 1
        if k_out == 0:
            continue
        ranked = sorted(all_labels, key=lambda l: (-label_w[l], l))
        for label in ranked[:k_out]:
            if label_w[label] > 0:
                raw.append(Segment(a / MS, (b - a) / MS, label))
    return Diarization(recording, clean_segments(raw))
