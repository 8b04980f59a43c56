"""Frame-scoring action localizer that the attention module plugs into.

The detector is two temporal convolutions with a ReLU between them and a
softmax over ``C + 1`` classes per frame (class 0 is background).  The
``attention_mode`` decides how the raw features are rescaled before
scoring:

============== =================================================
none           raw concatenated features, no attention at all
predicted      2 x T sigmoid map from one conv over the embedding
modality_only  modality attention broadcast over frames
frame_only     frame attention broadcast over modalities
composed       outer product of modality and frame attention
sac            composed attention plus the transport/regularizer losses
============== =================================================

The per-video objective is frame cross-entropy plus, in ``sac`` mode, the
SAC loss bundle with unit weight on the cross-entropy.  With
``loss_reduction="mean"`` the whole objective is divided by T (cross-entropy
averaged over frames, bundle divided by its transported mass T); this is
the same objective on a per-frame scale, which keeps one learning rate
usable across video lengths.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError, NumericalError
from .metrics import Segment
from .ot import SinkhornConfig
from .sac import (
    FeatureSequence, SACConfig, _conv, _conv_params, attention_heads, bind, compose,
    init_sac_params, modulate, sac_forward,
)

log = logging.getLogger(__name__)

ATTENTION_MODES = ("none", "predicted", "modality_only", "frame_only", "composed", "sac")


@dataclass(frozen=True)
class LocalizerConfig:
    attention_mode: str = "sac"
    classes: int = 4
    hidden: int = 32
    kernel: int = 3
    learning_rate: float = 0.002
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    loss_reduction: str = "mean"  # "mean": objective / T, "sum": as written
    sac: SACConfig = field(default_factory=SACConfig)

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ContractError(f"unknown attention mode {self.attention_mode!r}; expected one of {ATTENTION_MODES}")
        if self.classes < 1:
            raise ContractError("need at least one action class")
        if self.loss_reduction not in ("sum", "mean"):
            raise ContractError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        if self.epochs < 0 or self.hidden < 1:
            raise ContractError("epochs must be >= 0 and hidden >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "LocalizerConfig":
        d = dict(d)
        sac = dict(d.pop("sac", {}))
        sk = SinkhornConfig(**sac.pop("sinkhorn", {}))
        return cls(sac=SACConfig(sinkhorn=sk, **sac), **d)


# ----------------------------------------------------------------------
# parameters

def init_params(D: int, config: LocalizerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = _conv_params(rng, "score.conv1", config.hidden, 2 * D, config.kernel)
    p.update(_conv_params(rng, "score.conv2", config.classes + 1, config.hidden, config.kernel))
    if config.attention_mode != "none":
        p.update(init_sac_params(D, config.sac, rng, predicted_head=config.attention_mode == "predicted"))
    return p


def score_frames(x: ad.Tensor, P) -> tuple[ad.Tensor, ad.Tensor]:
    """Class logits and probabilities, both (C + 1) x T."""
    h = ad.relu(_conv(x, P, "score.conv1"))
    logits = _conv(h, P, "score.conv2")
    return logits, ad.softmax(logits, axis=0)


def frame_labels(annotations: Sequence[Segment], T: int) -> np.ndarray:
    y = np.zeros(T, dtype=np.int64)
    for seg in annotations:
        y[seg.start:seg.end + 1] = seg.label
    return y


def cross_entropy(logits: ad.Tensor, labels: np.ndarray, reduction: str = "sum") -> ad.Tensor:
    """Per-frame cross-entropy against integer labels, summed or averaged over frames."""
    n_cls, T = logits.shape
    onehot = np.zeros((n_cls, T))
    onehot[labels, np.arange(T)] = 1.0
    log_probs = logits - ad.logsumexp(logits, axis=0, keepdims=True)
    return ad.scale(ad.sum_(log_probs * onehot), -1.0 / T if reduction == "mean" else -1.0)


@dataclass
class ForwardResult:
    logits: ad.Tensor
    probs: ad.Tensor
    attention: ad.Tensor | None  # 2 x T modulation, None for mode "none"
    modality: ad.Tensor | None
    frame: ad.Tensor | None
    sac_losses: object | None


def modulation_for_mode(graph: ad.Graph, mode: str, a_m: ad.Tensor | None, a_f: ad.Tensor | None,
                        predicted: ad.Tensor | None = None) -> ad.Tensor:
    """2 x T modulation implied by ``mode`` given the head outputs."""
    if mode in ("composed", "sac"):
        return compose(a_m, a_f)
    if mode == "modality_only":
        return ad.outer(a_m, graph.constant(np.ones(a_f.shape[1] if a_f is not None else predicted.shape[1])))
    if mode == "frame_only":
        return ad.outer(graph.constant(np.ones(2)), a_f)
    if mode == "predicted":
        return predicted
    raise ContractError(f"mode {mode!r} has no modulation")


def forward(graph: ad.Graph, features: FeatureSequence, P, config: LocalizerConfig,
            inject: dict | None = None) -> ForwardResult:
    """Run attention (per mode) and the frame scorer on one video.

    ``inject`` may hold fixed ``modality`` (2 x 1) and/or ``frame`` (1 x T)
    arrays that replace the head outputs, which is how the mode algebra is
    tested.
    """
    mode = config.attention_mode
    if mode == "none":
        logits, probs = score_frames(graph.constant(features.concatenated()), P)
        return ForwardResult(logits, probs, None, None, None, None)
    inject = inject or {}
    sac_losses = None
    predicted = None
    if mode == "sac" and not inject:
        out = sac_forward(graph, features, P, config.sac)
        A, a_m, a_f, sac_losses = out.attention.composed, out.attention.modality, out.attention.frame, out.losses
    else:
        video, a_m, a_f = attention_heads(graph, features, P, config.sac)
        if "modality" in inject:
            a_m = graph.constant(np.reshape(inject["modality"], (2, 1)))
        if "frame" in inject:
            a_f = graph.constant(np.reshape(inject["frame"], (1, features.T)))
        if mode == "predicted":
            predicted = ad.sigmoid(_conv(video, P, "predicted"))
        A = modulation_for_mode(graph, mode, a_m, a_f, predicted)
    modulated = modulate(graph, features, A)
    logits, probs = score_frames(modulated.concatenated(), P)
    return ForwardResult(logits, probs, A, a_m, a_f, sac_losses)


def predict(params: dict[str, np.ndarray], features: FeatureSequence, config: LocalizerConfig) -> ForwardResult:
    g = ad.Graph()
    return forward(g, features, bind(g, params), replace(config, attention_mode=(
        "composed" if config.attention_mode == "sac" else config.attention_mode)))


def decode_segments(probs: np.ndarray, threshold: float = 0.5, video_id: str = "") -> list[Segment]:
    """Maximal runs with ``probs[c, t] >= threshold`` for every class c >= 1.

    Each run is scored by its mean probability; output is sorted by
    descending score (ties by earlier start, then lower class).
    """
    probs = np.asarray(probs)
    out = []
    for c in range(1, probs.shape[0]):
        on = probs[c] >= threshold
        t = 0
        T = on.size
        while t < T:
            if not on[t]:
                t += 1
                continue
            start = t
            while t < T and on[t]:
                t += 1
            out.append(Segment(start, t - 1, c, float(probs[c, start:t].mean()), video_id))
    out.sort(key=lambda s: (-s.score, s.start, s.label))
    return out


# ----------------------------------------------------------------------
# training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    ce: float
    ot: float
    smooth: float
    fnorm: float


def _loss(graph, rec, P, config):
    fr = forward(graph, rec.features, P, config)
    ce = cross_entropy(fr.logits, frame_labels(rec.annotations, rec.features.T), config.loss_reduction)
    parts = {"ce": float(ce.value), "ot": 0.0, "smooth": 0.0, "fnorm": 0.0}
    total = ce
    if fr.sac_losses is not None:
        parts.update({k: v for k, v in fr.sac_losses.values().items() if k != "total"})
        bundle = fr.sac_losses.total
        if config.loss_reduction == "mean":
            bundle = ad.scale(bundle, 1.0 / rec.features.T)
        total = ce + bundle
    for name, val in parts.items():
        if not math.isfinite(val):
            raise NumericalError(f"non-finite {name} loss on video {rec.id!r}")
    if not math.isfinite(float(total.value)):
        raise NumericalError(f"non-finite total loss on video {rec.id!r}")
    return total, parts


def train(dataset: Sequence, config: LocalizerConfig,
          params: dict[str, np.ndarray] | None = None) -> tuple[dict[str, np.ndarray], list[EpochLog]]:
    """Per-video SGD with momentum; the seed fixes init and every shuffle.

    ``dataset`` is a sequence of :class:`~sacloc.datagen.VideoRecord`.
    """
    if not dataset:
        raise ContractError("empty training set")
    rng = np.random.default_rng(config.seed)
    D = dataset[0].features.D
    init = init_params(D, config, rng)
    params = {k: v.copy() for k, v in (params or init).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr, mu = config.learning_rate, config.momentum
    history = []
    for epoch in range(1, config.epochs + 1):
        sums = {"loss": 0.0, "ce": 0.0, "ot": 0.0, "smooth": 0.0, "fnorm": 0.0}
        for i in rng.permutation(len(dataset)):
            rec = dataset[i]
            g = ad.Graph()
            P = bind(g, params)
            total, parts = _loss(g, rec, P, config)
            grads = ad.backward(g, total)
            for name, grad in grads.items():
                if not np.all(np.isfinite(grad)):
                    raise NumericalError(f"non-finite gradient for {name} on video {rec.id!r}")
                velocity[name] = mu * velocity[name] + grad
                params[name] = params[name] - lr * velocity[name]
            sums["loss"] += float(total.value)
            for k, v in parts.items():
                sums[k] += v
        n = len(dataset)
        entry = EpochLog(epoch, *(sums[k] / n for k in ("loss", "ce", "ot", "smooth", "fnorm")))
        log.info("epoch %d loss %.5f ce %.5f", epoch, entry.loss, entry.ce)
        history.append(entry)
    return params, history


def evaluate_loss(dataset: Sequence, params, config: LocalizerConfig) -> float:
    """Mean training objective over ``dataset`` without updating anything."""
    total = 0.0
    for rec in dataset:
        g = ad.Graph()
        loss, _ = _loss(g, rec, bind(g, params), config)
        total += float(loss.value)
    return total / len(dataset)


# ----------------------------------------------------------------------
# checkpoints: repeated [u16 name length][utf-8 name][u8 rank][u32 extents][f64 LE values]

def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    out, pos = {}, 0
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(data):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return out


def save_run(directory, params, config: LocalizerConfig, history: list[EpochLog]) -> None:
    """Checkpoint, sidecar config JSON and per-epoch loss CSV."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.bin", params)
    (d / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")
    lines = ["epoch,loss,ce,ot,smooth,fnorm"]
    for e in history:
        lines.append(f"{e.epoch},{e.loss:.10g},{e.ce:.10g},{e.ot:.10g},{e.smooth:.10g},{e.fnorm:.10g}")
    (d / "loss_log.csv").write_text("\n".join(lines) + "\n")


def load_run(directory) -> tuple[dict[str, np.ndarray], LocalizerConfig]:
    d = Path(directory)
    config = LocalizerConfig.from_json(json.loads((d / "config.json").read_text()))
    return load_checkpoint(d / "checkpoint.bin"), config


def read_loss_log(path) -> list[EpochLog]:
    rows = Path(path).read_text().strip().splitlines()[1:]
    out = []
    for row in rows:
        f = row.split(",")
        out.append(EpochLog(int(f[0]), *map(float, f[1:])))
    return out
