"""
Data IO Tool
Synthetic concept-planting datasets, the binary feature file format and JSON-lines annotations
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from exceptions import AnnotationError, FormatError, LoadError, ValidationError
from models import GroundingSample, SynthSpec
from tools.container import atomic_write_bytes

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"MLVF"
FEATURE_VERSION = 1
ANNOTATION_FILE = "annotations.jsonl"
FEATURE_DIR = "features"
REQUIRED_KEYS = ("sample_id", "duration", "clip_len", "spans", "saliency", "video_feat", "query_feat")

_FEATURE_HEADER = struct.Struct("<4sHB")


@dataclass
class SampleAnnotation:
    """One annotation line; spans are normalized to [0, 1]"""
    sample_id: str
    duration_s: float
    clip_len_s: float
    spans: List[Tuple[float, float]]
    saliency: List[int]
    video_feat: str
    query_feat: str

    def to_json(self) -> Dict:
        return {
            "sample_id": self.sample_id,
            "duration": self.duration_s,
            "clip_len": self.clip_len_s,
            "spans": [[round(st * self.duration_s, 6), round(ed * self.duration_s, 6)] for st, ed in self.spans],
            "saliency": [int(label) for label in self.saliency],
            "video_feat": self.video_feat,
            "query_feat": self.query_feat,
        }


# ----- synthetic data -----

def generate_synthetic(spec: SynthSpec) -> List[GroundingSample]:
    """
    Build a seeded dataset in which every query names a latent concept

    Clips inside the ground-truth span carry signal_strength * (foreground_scale * fg_dir + P_v c)
    on top of unit Gaussian noise; the query tokens carry P_q c plus smaller noise. With
    signal_strength 0 the inside and outside clips share one distribution.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    fg_dir = rng.normal(size=spec.video_dim)
    fg_dir /= np.linalg.norm(fg_dir)
    P_v = rng.normal(size=(spec.concept_dim, spec.video_dim)) / np.sqrt(spec.concept_dim)
    P_q = rng.normal(size=(spec.concept_dim, spec.query_dim)) / np.sqrt(spec.concept_dim)

    samples = []
    for index in range(spec.n_samples):
        num_clips = int(rng.integers(spec.video_len[0], spec.video_len[1] + 1))
        num_tokens = int(rng.integers(spec.query_len[0], spec.query_len[1] + 1))
        concept = rng.normal(size=spec.concept_dim)
        concept /= np.linalg.norm(concept)

        span_len = int(rng.integers(max(1, num_clips // 4), max(1, num_clips // 2) + 1))
        start = int(rng.integers(0, num_clips - span_len + 1))
        inside = slice(start, start + span_len)

        video = rng.normal(size=(num_clips, spec.video_dim))
        video[inside] += spec.signal_strength * (spec.foreground_scale * fg_dir + concept @ P_v)
        query = 0.5 * rng.normal(size=(num_tokens, spec.query_dim)) + concept @ P_q

        saliency = rng.integers(0, 2, size=num_clips)
        saliency[inside] = rng.integers(3, 5, size=span_len)

        duration = num_clips * spec.clip_len_s
        span = (start * spec.clip_len_s / duration, (start + span_len) * spec.clip_len_s / duration)
        sample_id = f"synth_{index:05d}"
        samples.append(
            GroundingSample(
                sample_id=sample_id,
                video_features=video.astype(np.float32),
                query_features=query.astype(np.float32),
                gt_spans=[span],
                gt_saliency=[int(label) for label in saliency],
                duration_s=duration,
                clip_len_s=spec.clip_len_s,
                video_feat_path=f"{FEATURE_DIR}/{sample_id}_video.mlvf",
                query_feat_path=f"{FEATURE_DIR}/{sample_id}_query.mlvf",
            )
        )
    logger.info(f"Generated {len(samples)} synthetic samples (strength={spec.signal_strength}, seed={spec.seed})")
    return samples


# ----- feature files -----

def encode_features(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_features(raw: bytes) -> np.ndarray:
    """
    Parse a feature file

    Raises:
        FormatError: Bad magic, unknown version, truncation or trailing bytes
    """
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError("Bad magic bytes, expected 'MLVF'", 0)
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError("File truncated inside the header", len(raw))
    _, version, rank = _FEATURE_HEADER.unpack_from(raw, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"Unsupported feature file version {version}", 4)

    offset = _FEATURE_HEADER.size
    if len(raw) < offset + 4 * rank:
        raise FormatError("File truncated inside the extents", len(raw))
    shape = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank

    count = int(np.prod(shape)) if rank else 1
    end = offset + 4 * count
    if len(raw) < end:
        raise FormatError(f"File truncated: {count} values need {4 * count} bytes from here", offset)
    if len(raw) > end:
        raise FormatError(f"{len(raw) - end} unexpected trailing bytes", end)
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def write_features(path: str, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_features(array))


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as stream:
        return decode_features(stream.read())


# ----- annotations -----

def parse_annotation(line: str, line_number: int) -> SampleAnnotation:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"Invalid JSON: {exc.msg}", line_number) from exc
    if not isinstance(record, dict):
        raise AnnotationError("Annotation must be a JSON object", line_number)
    for key in REQUIRED_KEYS:
        if key not in record:
            raise AnnotationError("Missing required key", line_number, key)

    duration = float(record["duration"])
    clip_len = float(record["clip_len"])
    if duration <= 0 or clip_len <= 0:
        raise ValidationError(f"line {line_number}: duration and clip_len must be positive")

    spans = []
    for pair in record["spans"]:
        if len(pair) != 2:
            raise AnnotationError(f"Span {pair!r} must be [start, end]", line_number, "spans")
        st, ed = float(pair[0]), float(pair[1])
        if ed <= st:
            raise ValidationError(f"line {line_number}: span [{st}, {ed}] ends before it starts")
        if st < 0 or ed > duration:
            raise ValidationError(f"line {line_number}: span [{st}, {ed}] outside a {duration} s video")
        spans.append((st / duration, ed / duration))

    return SampleAnnotation(
        sample_id=str(record["sample_id"]),
        duration_s=duration,
        clip_len_s=clip_len,
        spans=spans,
        saliency=[int(label) for label in record["saliency"]],
        video_feat=str(record["video_feat"]),
        query_feat=str(record["query_feat"]),
    )


def read_annotations(path: str) -> List[SampleAnnotation]:
    annotations = []
    with open(path, "r", encoding="utf-8") as stream:
        for line_number, line in enumerate(stream, start=1):
            if line.strip():
                annotations.append(parse_annotation(line, line_number))
    logger.info(f"Read {len(annotations)} annotations from {path}")
    return annotations


def write_annotations(path: str, annotations: Sequence[SampleAnnotation]) -> None:
    lines = [json.dumps(annotation.to_json(), sort_keys=True) for annotation in annotations]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def annotation_of(sample: GroundingSample) -> SampleAnnotation:
    return SampleAnnotation(
        sample_id=sample.sample_id,
        duration_s=sample.duration_s,
        clip_len_s=sample.clip_len_s,
        spans=list(sample.gt_spans),
        saliency=list(sample.gt_saliency),
        video_feat=sample.video_feat_path or f"{FEATURE_DIR}/{sample.sample_id}_video.mlvf",
        query_feat=sample.query_feat_path or f"{FEATURE_DIR}/{sample.sample_id}_query.mlvf",
    )


# ----- datasets -----

def save_dataset(samples: Sequence[GroundingSample], directory: str) -> List[str]:
    """
    Write features and annotations under a dataset directory

    Returns:
        Paths of every written file
    """
    written = []
    annotations = []
    for sample in samples:
        annotation = annotation_of(sample)
        for relative, array in ((annotation.video_feat, sample.video_features), (annotation.query_feat, sample.query_features)):
            path = os.path.join(directory, relative)
            write_features(path, array)
            written.append(path)
        annotations.append(annotation)
    annotation_path = os.path.join(directory, ANNOTATION_FILE)
    write_annotations(annotation_path, annotations)
    written.append(annotation_path)
    logger.info(f"Saved {len(samples)} samples to {directory}")
    return written


def load_dataset(directory: str) -> List[GroundingSample]:
    """Read annotations and their feature files back into samples"""
    annotation_path = os.path.join(directory, ANNOTATION_FILE)
    if not os.path.exists(annotation_path):
        raise LoadError(f"No {ANNOTATION_FILE} in {directory}")

    samples = []
    for annotation in read_annotations(annotation_path):
        sample = GroundingSample(
            sample_id=annotation.sample_id,
            video_features=read_features(os.path.join(directory, annotation.video_feat)),
            query_features=read_features(os.path.join(directory, annotation.query_feat)),
            gt_spans=annotation.spans,
            gt_saliency=annotation.saliency,
            duration_s=annotation.duration_s,
            clip_len_s=annotation.clip_len_s,
            video_feat_path=annotation.video_feat,
            query_feat_path=annotation.query_feat,
        )
        sample.validate()
        if abs(sample.num_clips * sample.clip_len_s - sample.duration_s) > sample.clip_len_s:
            raise ValidationError(
                f"{sample.sample_id}: {sample.num_clips} clips of {sample.clip_len_s} s "
                f"do not cover {sample.duration_s} s"
            )
        samples.append(sample)
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return samples
