"""Seeded two-modality feature sequences with planted action segments.

Randomness comes from :class:`SplitMix64`, a counter-based generator: draw
``i`` of a stream with seed ``s`` is ``mix64(s + (i + 1) * GOLDEN)`` where

    mix64(z) = z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
               z ^= z >> 27; z *= 0x94D049BB133111EB
               z ^= z >> 31                                  (mod 2**64)

Uniforms take the top 53 bits.  Gaussians use Box-Muller on consecutive
pairs ``(u1, u2)`` with ``u1`` shifted into (0, 1]; both outputs of a pair
are used, cosine first.  Child streams are keyed by
``mix64(seed ^ mix64(key + GOLDEN))``.

Each video carries a single action class (one to three instances).  Inside
an instance the class's preferred modality gains ``amplitude * pattern[c]``
on top of unit-variance noise; the other modality stays pure noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError
from .metrics import Segment
from .sac import FeatureSequence

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

SACF_MAGIC = b"SACF"
SACF_VERSION = 1

MODALITIES = ("appearance", "motion")


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based 64-bit generator; see the module docstring for constants."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def split(self, key: int) -> "SplitMix64":
        return SplitMix64(mix64(self.seed ^ mix64(int(key) + GOLDEN)))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
        return _mix64_array(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high] inclusive via floor(u * span)."""
        span = high - low + 1
        vals = low + np.floor(self.uniform(1 if n is None else n) * span).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        bits = self.next_u64(2 * pairs) >> np.uint64(11)
        u1 = (bits[0::2].astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = bits[1::2].astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def default_preference(classes: int) -> dict[int, str]:
    half = classes // 2
    return {c: ("appearance" if c <= half else "motion") for c in range(1, classes + 1)}


@dataclass(frozen=True)
class SynthConfig:
    train_videos: int = 200
    test_videos: int = 100
    T: int = 64
    D: int = 8
    classes: int = 4
    actions: tuple = (1, 3)
    action_length: tuple = (6, 16)
    modality_preference: dict = field(default_factory=dict)
    amplitude: float = 2.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "action_length", tuple(int(a) for a in self.action_length))
        pref = {int(k): str(v) for k, v in self.modality_preference.items()} or default_preference(self.classes)
        object.__setattr__(self, "modality_preference", pref)
        lo, hi = self.actions
        llo, lhi = self.action_length
        if self.classes < 1 or self.T < 2 or self.D < 1:
            raise GenerationError("need classes >= 1, T >= 2, D >= 1")
        if not 1 <= lo <= hi or not 1 <= llo <= lhi:
            raise GenerationError(f"bad ranges actions={self.actions} action_length={self.action_length}")
        if lo * llo + lo - 1 > self.T:
            raise GenerationError(f"{lo} actions of length >= {llo} cannot fit in T={self.T}")
        missing = [c for c in range(1, self.classes + 1) if pref.get(c) not in MODALITIES]
        if missing:
            raise GenerationError(f"classes {missing} lack a preferred modality")

    def to_json(self) -> dict:
        d = asdict(self)
        d["actions"] = list(self.actions)
        d["action_length"] = list(self.action_length)
        d["modality_preference"] = {str(k): v for k, v in sorted(self.modality_preference.items())}
        return d


def class_patterns(config: SynthConfig) -> np.ndarray:
    """C x D unit directions, Gram-Schmidt orthonormalized while C <= D."""
    rng = SplitMix64(config.seed).split(0x5041)
    raw = rng.normal(config.classes * config.D).reshape(config.classes, config.D)
    out = []
    for row in raw:
        vec = row.copy()
        if len(out) < config.D:
            for q in out:
                vec -= (vec @ q) * q
        out.append(vec / np.linalg.norm(vec))
    return np.array(out)


def _place_segments(rng: SplitMix64, config: SynthConfig) -> list[tuple[int, int]]:
    n = rng.integers(*config.actions)
    lengths = [rng.integers(*config.action_length) for _ in range(n)]
    free = config.T - sum(lengths) - (n - 1)
    if free < 0:
        # shrink the draw rather than fail while a smaller count still fits
        while n > config.actions[0] and free < 0:
            n -= 1
            lengths = lengths[:n]
            free = config.T - sum(lengths) - (n - 1)
        if free < 0:
            raise GenerationError(f"cannot pack {n} actions of lengths {lengths} into T={config.T}")
    slots = sorted(rng.permutation(free + n)[:n].tolist())
    segments, cursor, prev = [], 0, -1
    for slot, length in zip(slots, lengths):
        cursor += slot - prev - 1
        segments.append((cursor, cursor + length - 1))
        cursor += length + 1
        prev = slot
    return segments


def generate_video(config: SynthConfig, rng: SplitMix64,
                   patterns: np.ndarray | None = None) -> tuple[FeatureSequence, list[Segment]]:
    """One video: features rounded through float32 plus the planted annotations."""
    patterns = class_patterns(config) if patterns is None else patterns
    label = rng.integers(1, config.classes)
    segments = _place_segments(rng, config)
    T, D = config.T, config.D
    feats = {}
    for mod in MODALITIES:
        feats[mod] = config.noise * rng.normal(T * D).reshape(T, D).T
    preferred = config.modality_preference[label]
    for start, end in segments:
        feats[preferred][:, start:end + 1] += config.amplitude * patterns[label - 1][:, None]
    seq = FeatureSequence(
        feats["appearance"].astype(np.float32).astype(np.float64),
        feats["motion"].astype(np.float32).astype(np.float64),
    )
    return seq, [Segment(s, e, label) for s, e in segments]


# ----------------------------------------------------------------------
# SACF feature files

def write_sacf(path, features: FeatureSequence) -> None:
    D, T = features.D, features.T
    with open(path, "wb") as fh:
        fh.write(SACF_MAGIC)
        fh.write(struct.pack("<III", SACF_VERSION, D, T))
        for mat in (features.appearance, features.motion):
            fh.write(np.ascontiguousarray(mat.T, dtype="<f4").tobytes())


def read_sacf(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != SACF_MAGIC:
        raise FormatError(f"{path}: not an SACF file")
    version, D, T = struct.unpack_from("<III", data, 4)
    if version != SACF_VERSION:
        raise FormatError(f"{path}: unsupported SACF version {version}")
    n = D * T
    if len(data) != 16 + 8 * n:
        raise FormatError(f"{path}: expected {16 + 8 * n} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    app = vals[:n].reshape(T, D).T
    mot = vals[n:].reshape(T, D).T
    return FeatureSequence(app, mot)


# ----------------------------------------------------------------------
# datasets

@dataclass
class VideoRecord:
    id: str
    split: str
    features: FeatureSequence
    annotations: list

    @property
    def label(self) -> int:
        return self.annotations[0].label if self.annotations else 0


def generate_dataset(config: SynthConfig, out_dir) -> Path:
    """Write features/, manifest.json and dataset.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    patterns = class_patterns(config)
    root = SplitMix64(config.seed)
    manifest = []
    index = 0
    for split, count in (("train", config.train_videos), ("test", config.test_videos)):
        for i in range(count):
            vid = f"{split}_{i:04d}"
            feats, anns = generate_video(config, root.split(index + 1), patterns)
            index += 1
            rel = f"features/{vid}.sacf"
            write_sacf(out / rel, feats)
            manifest.append({
                "id": vid,
                "feature_path": rel,
                "split": split,
                "annotations": [{"start": a.start, "end": a.end, "label": a.label} for a in anns],
            })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "dataset.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def read_manifest(path) -> list[dict]:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(entries, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    for e in entries:
        if not {"id", "feature_path", "split", "annotations"} <= set(e):
            raise FormatError(f"{path}: manifest entry missing fields: {e}")
    return entries


def load_dataset(manifest_path, split: str | None = None) -> list[VideoRecord]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    records = []
    for e in read_manifest(manifest_path):
        if split is not None and e["split"] != split:
            continue
        feats = read_sacf(manifest_path.parent / e["feature_path"])
        anns = [Segment.from_json(a, video_id=e["id"]) for a in e["annotations"]]
        records.append(VideoRecord(e["id"], e["split"], feats, anns))
    return records


def load_synth_config(data_dir) -> SynthConfig | None:
    path = Path(data_dir) / "dataset.json"
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    return SynthConfig(**d)
