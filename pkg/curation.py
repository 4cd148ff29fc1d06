"""
Frame curation: parallax keyframing, match-pair proposal and clip splitting.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from config import (
    PARALLAX_THRESHOLD, MIN_SHARED_TRACKS, SEQUENCE_WINDOW, LOOP_WINDOW,
    LOOP_TOP_K, LOOP_SCORE_THRESHOLD, CLIP_MAX_LEN, CLIP_OVERLAP
)
from exceptions import CurationError

logger = logging.getLogger(__name__)

LOOP_MODES = ("similarity", "distance")


@dataclass
class FrameTrack:
    """Tracked feature observations of one frame."""
    frame_id: int
    observations: List[Tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        track_ids = [obs[0] for obs in self.observations]
        if len(track_ids) != len(set(track_ids)):
            raise CurationError(f"Frame {self.frame_id}: duplicate track ids")

    def as_lookup(self) -> Dict[int, Tuple[float, float]]:
        return {int(t): (float(u), float(v)) for t, u, v in self.observations}

    def to_dict(self) -> Dict[str, Any]:
        return {"frame_id": self.frame_id,
                "observations": [[int(t), float(u), float(v)] for t, u, v in self.observations]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FrameTrack":
        return cls(frame_id=int(data["frame_id"]),
                   observations=[(int(t), float(u), float(v)) for t, u, v in data["observations"]])


@dataclass
class FrameDescriptor:
    """Unit-normalized global image descriptor."""
    frame_id: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-6:
            raise CurationError(f"Frame {self.frame_id}: descriptor is not unit-normalized")


@dataclass
class CurationResult:
    """Keyframes, clips and per-clip sequence pairs of one sequence."""
    keyframes: List[int]
    clips: List[Tuple[int, int]]
    sequence_pairs: List[List[Tuple[int, int]]]
    loop_pairs: List[Tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def select_keyframes(frames: Sequence[FrameTrack], image_width: int, image_height: int,
                     parallax_threshold: float = PARALLAX_THRESHOLD,
                     min_shared_tracks: int = MIN_SHARED_TRACKS) -> List[int]:
    """
    Select keyframes by parallax against the previous keyframe.

    A frame becomes a keyframe when the median displacement of the tracks it
    shares with the previous keyframe exceeds `parallax_threshold` times the
    image diagonal, or when fewer than `min_shared_tracks` tracks are shared.

    Raises:
        CurationError: If no frames are given or the threshold is not positive
    """
    if not frames:
        raise CurationError("Keyframe selection needs at least one frame")
    if parallax_threshold <= 0:
        raise CurationError("parallax_threshold must be positive")

    diagonal = float(np.hypot(image_width, image_height))
    limit = parallax_threshold * diagonal
    keyframes = [frames[0].frame_id]
    reference = frames[0].as_lookup()

    for frame in frames[1:]:
        current = frame.as_lookup()
        shared = sorted(set(reference) & set(current))
        if len(shared) < min_shared_tracks:
            keyframes.append(frame.frame_id)
            reference = current
            continue
        displacement = np.array([np.hypot(current[t][0] - reference[t][0], current[t][1] - reference[t][1])
                                 for t in shared])
        if np.median(displacement) > limit:
            keyframes.append(frame.frame_id)
            reference = current

    logger.info(f"Selected {len(keyframes)} keyframes from {len(frames)} frames")
    return keyframes


def propose_sequence_pairs(n_frames: int, window: int = SEQUENCE_WINDOW) -> List[Tuple[int, int]]:
    """All pairs (i, j) with 0 < j - i <= window, lexicographically sorted."""
    if n_frames < 2 or window < 1:
        return []
    return [(i, j) for i in range(n_frames) for j in range(i + 1, min(n_frames, i + window + 1))]


def propose_loop_pairs(descriptors: Sequence[FrameDescriptor], window: int = LOOP_WINDOW,
                       top_k: int = LOOP_TOP_K, score_threshold: float = LOOP_SCORE_THRESHOLD,
                       mode: str = "similarity") -> List[Tuple[int, int, float]]:
    """
    Score frame pairs within `window` frames and keep the global top_k.

    In "similarity" mode the score is the cosine similarity. In "distance"
    mode the score is the cosine distance (1 - similarity), the literal
    "feature distance greater than threshold" reading.

    Returns:
        (frame_i, frame_j, score) sorted by descending score, ties by (i, j)
    """
    if mode not in LOOP_MODES:
        raise CurationError(f"Unknown loop pairing mode '{mode}'")
    if not descriptors:
        return []

    ids = np.array([d.frame_id for d in descriptors])
    vectors = np.vstack([d.vector for d in descriptors])
    similarity = vectors @ vectors.T

    candidates: List[Tuple[int, int, float]] = []
    for a in range(len(descriptors)):
        for b in range(a + 1, len(descriptors)):
            i, j = int(min(ids[a], ids[b])), int(max(ids[a], ids[b]))
            if j - i > window or i == j:
                continue
            score = float(similarity[a, b]) if mode == "similarity" else float(1.0 - similarity[a, b])
            if score > score_threshold:
                candidates.append((i, j, score))

    candidates.sort(key=lambda c: (-c[2], c[0], c[1]))
    logger.debug(f"Loop pairing kept {min(top_k, len(candidates))} of {len(candidates)} candidates")
    return candidates[:top_k]


def split_clips(n_keyframes: int, max_len: int = CLIP_MAX_LEN,
                overlap: int = CLIP_OVERLAP) -> List[Tuple[int, int]]:
    """
    Split keyframes into half-open clips of at most max_len with a fixed overlap.

    Raises:
        CurationError: If overlap is negative or not smaller than max_len
    """
    if max_len < 1 or overlap < 0 or overlap >= max_len:
        raise CurationError(f"Invalid clip parameters: max_len={max_len}, overlap={overlap}")
    if n_keyframes <= 0:
        return []
    if n_keyframes <= max_len:
        return [(0, n_keyframes)]

    stride = max_len - overlap
    clips = []
    start = 0
    while True:
        end = min(start + max_len, n_keyframes)
        clips.append((start, end))
        if end == n_keyframes:
            break
        start += stride
    return clips


def curate_sequence(frames: Sequence[FrameTrack], image_width: int, image_height: int,
                    descriptors: Sequence[FrameDescriptor] = (),
                    parallax_threshold: float = PARALLAX_THRESHOLD,
                    min_shared_tracks: int = MIN_SHARED_TRACKS,
                    sequence_window: int = SEQUENCE_WINDOW,
                    clip_max_len: int = CLIP_MAX_LEN, clip_overlap: int = CLIP_OVERLAP,
                    loop_window: int = LOOP_WINDOW, loop_top_k: int = LOOP_TOP_K,
                    loop_score_threshold: float = LOOP_SCORE_THRESHOLD,
                    loop_mode: str = "similarity") -> CurationResult:
    """Keyframes, clip ranges over them, and sequence / loop pairs as frame ids."""
    keyframes = select_keyframes(frames, image_width, image_height, parallax_threshold, min_shared_tracks)
    clips = split_clips(len(keyframes), clip_max_len, clip_overlap)

    sequence_pairs = []
    for start, end in clips:
        local = propose_sequence_pairs(end - start, sequence_window)
        sequence_pairs.append([(keyframes[start + i], keyframes[start + j]) for i, j in local])

    keyframe_set = set(keyframes)
    selected = [d for d in descriptors if d.frame_id in keyframe_set]
    loop_pairs = propose_loop_pairs(selected, loop_window, loop_top_k, loop_score_threshold, loop_mode)
    return CurationResult(keyframes=keyframes, clips=clips, sequence_pairs=sequence_pairs,
                          loop_pairs=loop_pairs)
