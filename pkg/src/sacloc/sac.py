"""Structured attention composition.

Two embedded modalities feed three heads: a temporal conv for per-frame
attention, a pooled linear map for modality attention and a temporal conv
for the 2 x T assignment cost ("structure") matrix.  The composed attention
``A = a_m (x) a_f`` rescales the raw features; the entropic transport loss
between the mass-normalized attentions, a smoothness term and a negative
Frobenius-norm term regularize training.

All graph-level functions take :class:`~sacloc.autodiff.Tensor` inputs that
live on one :class:`~sacloc.autodiff.Graph`; use :func:`bind` to put a
parameter dictionary onto a fresh graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidShapeError
from .ot import SinkhornConfig, ot_loss_node


@dataclass(frozen=True)
class FeatureSequence:
    appearance: np.ndarray  # D x T
    motion: np.ndarray  # D x T
    frame_rate: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.appearance, dtype=np.float64)
        m = np.asarray(self.motion, dtype=np.float64)
        if a.ndim != 2 or a.shape != m.shape:
            raise InvalidShapeError(f"modalities must be equal D x T matrices, got {a.shape} and {m.shape}")
        if a.shape[1] < 2:
            raise InvalidShapeError("need at least two frames")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(m))):
            raise InvalidShapeError("features contain non-finite values")
        object.__setattr__(self, "appearance", a)
        object.__setattr__(self, "motion", m)

    @property
    def D(self) -> int:
        return self.appearance.shape[0]

    @property
    def T(self) -> int:
        return self.appearance.shape[1]

    def concatenated(self) -> np.ndarray:
        return np.vstack([self.appearance, self.motion])


@dataclass(frozen=True)
class SACConfig:
    k: float = 1 / 8
    eta: float = 0.8
    lambda_s: float = 0.10
    lambda_f: float = 0.01
    gamma: float = 1e-8
    embed_dim: int = 64
    kernel: int = 3
    smooth_abs: bool = False  # rank |d| instead of signed differences
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)


@dataclass
class AttentionState:
    frame: ad.Tensor  # 1 x T, sigmoid
    modality: ad.Tensor  # 2 x 1, softmax
    composed: ad.Tensor  # 2 x T
    frame_norm: ad.Tensor
    modality_norm: ad.Tensor


@dataclass
class LossBundle:
    ot: ad.Tensor
    smooth: ad.Tensor
    fnorm: ad.Tensor
    total: ad.Tensor
    lambda_s: float
    lambda_f: float

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).value) for name in ("ot", "smooth", "fnorm", "total")}


@dataclass
class ModulatedFeatures:
    appearance: ad.Tensor
    motion: ad.Tensor

    def concatenated(self) -> ad.Tensor:
        return ad.concat([self.appearance, self.motion], axis=0)


@dataclass
class SACOutput:
    modulated: ModulatedFeatures
    losses: LossBundle
    attention: AttentionState
    structure: ad.Tensor
    video: ad.Tensor


# ----------------------------------------------------------------------
# parameters

def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, prefix, c_out, c_in, k):
    fan_in = c_in * k
    return {
        f"{prefix}.w": uniform_init(rng, (c_out, c_in, k), fan_in),
        f"{prefix}.b": uniform_init(rng, (c_out,), fan_in),
    }


def init_sac_params(D: int, config: SACConfig, rng: np.random.Generator,
                    predicted_head: bool = False) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights for every SAC layer."""
    E, K = config.embed_dim, config.kernel
    p = {}
    for mod in ("app", "mot"):
        p.update(_conv_params(rng, f"embed.{mod}.conv1", E, D, K))
        p.update(_conv_params(rng, f"embed.{mod}.conv2", E, E, K))
    p.update(_conv_params(rng, "frame", 1, 2 * E, K))
    p.update(_conv_params(rng, "modality", 2, 2 * E, 1))
    p.update(_conv_params(rng, "structure", 2, 2 * E, K))
    if predicted_head:
        p.update(_conv_params(rng, "predicted", 2, 2 * E, K))
    return p


def bind(graph: ad.Graph, params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {name: graph.parameter(name, value) for name, value in sorted(params.items())}


def _conv(x, P, prefix):
    return ad.conv1d_same(x, P[f"{prefix}.w"], P[f"{prefix}.b"])


# ----------------------------------------------------------------------
# heads

def embed(graph: ad.Graph, features: FeatureSequence, P: dict[str, ad.Tensor]) -> ad.Tensor:
    """F_v = [Theta_a(F_a); Theta_m(F_m)], each Theta being conv -> ReLU -> conv."""
    out = []
    for mod, F in (("app", features.appearance), ("mot", features.motion)):
        h = ad.relu(_conv(graph.constant(F), P, f"embed.{mod}.conv1"))
        out.append(_conv(h, P, f"embed.{mod}.conv2"))
    return ad.concat(out, axis=0)


def frame_attention(video: ad.Tensor, P) -> ad.Tensor:
    return ad.sigmoid(_conv(video, P, "frame"))


def pool_count(T: int, k: float) -> int:
    if not 0 < k <= 1:
        raise InvalidShapeError(f"pooling ratio must lie in (0, 1], got {k}")
    return max(1, math.floor(T * k + 1e-9))


def action_aware_pool(video: ad.Tensor, k: float) -> ad.Tensor:
    """Mean of the floor(T*k) columns with the largest Euclidean norms.

    Ties are ranked by lower frame index; the selection itself carries no
    gradient.
    """
    T = video.shape[1]
    norms = np.sqrt((video.value ** 2).sum(axis=0))
    top = np.argsort(-norms, kind="stable")[:pool_count(T, k)]
    return ad.mean(ad.gather(video, top, axis=1), axis=1)


def modality_attention(pooled: ad.Tensor, P) -> ad.Tensor:
    column = ad.reshape(pooled, (pooled.shape[0], 1))
    return ad.softmax(_conv(column, P, "modality"), axis=0)


def compose(a_m: ad.Tensor, a_f: ad.Tensor) -> ad.Tensor:
    return ad.outer(a_m, a_f)


def normalize_mass(a_m: ad.Tensor, a_f: ad.Tensor, T: int, gamma: float = 1e-8) -> tuple[ad.Tensor, ad.Tensor]:
    """Rescale both attentions to carry total mass T."""
    modality_norm = ad.scale(a_m, T)
    frame_norm = ad.scale(a_f, T) / (ad.sum_(a_f) + gamma)
    return modality_norm, frame_norm


def structure_head(video: ad.Tensor, P) -> ad.Tensor:
    return ad.sigmoid(_conv(video, P, "structure"))


def smoothness_count(T: int, eta: float) -> int:
    return max(1, min(math.floor(T * eta + 1e-9), T - 1))


def smoothness_loss(S: ad.Tensor, eta: float = 0.8, gamma: float = 1e-8, absolute: bool = False) -> ad.Tensor:
    """-log(1 - q) with q the mean of the smallest neighbouring differences.

    The column-wise max over modalities gives the structure vector ``s_f``;
    ``d_t = s_f[t+1] - s_f[t]`` keeps its sign unless ``absolute`` is set.
    """
    T = S.shape[1]
    if T < 2:
        raise InvalidShapeError("smoothness needs at least two frames")
    s_f = ad.max_axis0(S)
    d = ad.gather(s_f, np.arange(1, T)) - ad.gather(s_f, np.arange(T - 1))
    if absolute:
        d = d * np.where(d.value < 0, -1.0, 1.0)
    smallest = np.argsort(d.value, kind="stable")[:smoothness_count(T, eta)]
    q = ad.mean(ad.gather(d, smallest))
    return ad.neg(ad.log(ad.clip_min(1.0 - q, gamma)))


def fnorm_loss(S: ad.Tensor) -> ad.Tensor:
    T = S.shape[1]
    return ad.scale(ad.sqrt(ad.sum_(S * S)), -1.0 / (2 * T))


def sac_loss(ot, smooth, fnorm, lambda_s: float = 0.10, lambda_f: float = 0.01) -> LossBundle:
    total = ot + ad.scale(smooth, lambda_s) + ad.scale(fnorm, lambda_f)
    return LossBundle(ot=ot, smooth=smooth, fnorm=fnorm, total=total, lambda_s=lambda_s, lambda_f=lambda_f)


def modulate(graph: ad.Graph, features: FeatureSequence, A: ad.Tensor) -> ModulatedFeatures:
    """Scale every frame of each modality by its row of ``A`` (2 x T)."""
    if A.shape != (2, features.T):
        raise InvalidShapeError(f"attention shape {A.shape} does not match 2 x {features.T}")
    Fa = graph.constant(features.appearance)
    Fm = graph.constant(features.motion)
    return ModulatedFeatures(Fa * ad.gather(A, [0], axis=0), Fm * ad.gather(A, [1], axis=0))


def attention_heads(graph: ad.Graph, features: FeatureSequence, P, config: SACConfig):
    video = embed(graph, features, P)
    a_f = frame_attention(video, P)
    a_m = modality_attention(action_aware_pool(video, config.k), P)
    return video, a_m, a_f


def sac_forward(graph: ad.Graph, features: FeatureSequence, P: dict[str, ad.Tensor],
                config: SACConfig | None = None) -> SACOutput:
    """Full module: embed, attend, compose, modulate and build the loss bundle."""
    config = config or SACConfig()
    T = features.T
    video, a_m, a_f = attention_heads(graph, features, P, config)
    A = compose(a_m, a_f)
    modulated = modulate(graph, features, A)
    m_norm, f_norm = normalize_mass(a_m, a_f, T, config.gamma)
    S = structure_head(video, P)
    ot = ot_loss_node(S, m_norm, f_norm, config.sinkhorn)
    smooth = smoothness_loss(S, config.eta, config.gamma, config.smooth_abs)
    losses = sac_loss(ot, smooth, fnorm_loss(S), config.lambda_s, config.lambda_f)
    state = AttentionState(frame=a_f, modality=a_m, composed=A, frame_norm=f_norm, modality_norm=m_norm)
    return SACOutput(modulated=modulated, losses=losses, attention=state, structure=S, video=video)
