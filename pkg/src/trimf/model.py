"""The tri-modal fusion model: modality projections, three two-stream
encoders, three low-rank fusers, summation routing, and the classifier head.

Routing: each modality pair gets its own encoder + fuser; at inference only
pairs whose both modalities are present run. With all three present the
output vector is the sum of the three pair vectors; with one modality masked
the single surviving pair vector IS the output (same tensor, no arithmetic),
so masked and unmasked paths agree bit-for-bit on the shared pair.

Ablation variants: ``no_sa`` swaps every per-stream self-attention unit for
a cross-attention block on the other stream; ``no_lmf`` drops the fusers and
feeds the six concatenated class tokens to a widened classifier; ``no_frcl``
keeps the architecture and zeroes the contrastive loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .attention import BiMFEncoderParams, SAUnitParams, bimf_encode, encoder_parameter_count
from .config import LABEL_COUNT, MODALITIES, VARIANTS, ConfigError
from .lmf import LMFParams, lmf_fuse
from .parameters import ParamGroup
from .tensor import Tensor


class UnsupportedMaskError(ValueError):
    """The requested modality mask leaves no supported inference path."""


class ModalityId(str, Enum):
    IMAGE = "image"
    TEXT = "text"
    TABULAR = "tabular"


PAIRS = (
    (ModalityId.IMAGE, ModalityId.TEXT),
    (ModalityId.IMAGE, ModalityId.TABULAR),
    (ModalityId.TEXT, ModalityId.TABULAR),
)


def pair_key(pair) -> str:
    return "+".join(m.value for m in pair)


PAIR_KEYS = tuple(pair_key(p) for p in PAIRS)


@dataclass(frozen=True)
class ModalityMask:
    """Which modalities are available for a forward pass."""

    image: bool = True
    text: bool = True
    tabular: bool = True

    def is_present(self, m: ModalityId) -> bool:
        return getattr(self, m.value)

    def present(self) -> tuple[ModalityId, ...]:
        return tuple(m for m in ModalityId if self.is_present(m))

    @staticmethod
    def missing(*names: str) -> "ModalityMask":
        for n in names:
            if n not in MODALITIES:
                raise ConfigError(f"unknown modality '{n}'; expected one of {MODALITIES}")
        return ModalityMask(**{n: n not in names for n in MODALITIES})


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    head_count: int = 4
    layer_count: int = 2
    d_ff: int = 128
    lmf_rank: int = 8
    fusion_dim: int = 32
    tabular_embed_dim: int = 8
    lmf_bias_augment: bool = False
    modalities: tuple[str, ...] = MODALITIES
    variant: str = "full"
    label_count: int = LABEL_COUNT

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'; expected one of {VARIANTS}")
        if len(self.modalities) < 2:
            raise ConfigError("a fusion model needs at least two modalities")
        if self.variant != "full" and len(self.modalities) < 3:
            raise ConfigError(f"variant '{self.variant}' requires all three modalities")

    @staticmethod
    def from_run_config(cfg: dict) -> "ModelConfig":
        m = cfg["model"]
        return ModelConfig(
            d_model=m["d_model"],
            head_count=m["head_count"],
            layer_count=m["layer_count"],
            d_ff=m["d_ff"],
            lmf_rank=m["lmf_rank"],
            fusion_dim=m["fusion_dim"],
            tabular_embed_dim=m["tabular_embed_dim"],
            lmf_bias_augment=m["lmf_bias_augment"],
            modalities=tuple(cfg["modalities"]),
            variant=cfg["variant"],
        )

    def pairs(self) -> tuple[tuple[ModalityId, ModalityId], ...]:
        mods = {ModalityId(m) for m in self.modalities}
        return tuple(p for p in PAIRS if p[0] in mods and p[1] in mods)


class LinearParams(ParamGroup):
    def __init__(self, d_in: int, d_out: int, rng):
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def apply(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class TabularEmbedderParams(ParamGroup):
    """Shallow per-feature embedder: each scalar feature maps to one row."""

    def __init__(self, d_emb: int, rng):
        self.weight = Tensor(rng.normal(0.0, 1.0, (d_emb,)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_emb), requires_grad=True)
        self.d_emb = d_emb


def embed_tabular(features, params: TabularEmbedderParams) -> Tensor:
    """Rows of ``features[i] * weight + bias``; accepts [n] or batched [B, n]."""
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=float))
    if f.ndim not in (1, 2):
        raise T.ShapeError(f"tabular features must be [n] or [B, n], got {f.shape}")
    col = T.reshape(f, f.shape + (1,))
    w_row = T.reshape(params.weight, (1, params.d_emb))
    return T.linear(col, w_row, params.bias)


@dataclass
class FusionOutput:
    """One forward pass: per-pair fusion vectors, their routed combination, logits."""

    bimf: dict
    tri: Tensor
    logits: Tensor

    def active_pairs(self) -> tuple[str, ...]:
        return tuple(self.bimf.keys())


class TriMFParams(ParamGroup):
    """All learnable state, keyed consistently for checkpoints and the optimizer."""

    def __init__(self, config: ModelConfig, shapes: dict[str, tuple[int, int]], seed: int = 0):
        for m in config.modalities:
            if m not in shapes:
                raise ConfigError(f"dataset provides no shape for modality '{m}'")
        rng = np.random.default_rng(seed)
        d = config.d_model
        cross_only = config.variant == "no_sa"

        self.projections = {}
        self.tabular_embedder = None
        for name in config.modalities:
            tokens, native = shapes[name]
            if name == ModalityId.TABULAR.value:
                self.tabular_embedder = TabularEmbedderParams(config.tabular_embed_dim, rng)
                self.projections[name] = LinearParams(config.tabular_embed_dim, d, rng)
            else:
                self.projections[name] = LinearParams(native, d, rng)

        self.encoders = {}
        self.fusers = {}
        for pair in config.pairs():
            key = pair_key(pair)
            max_a = shapes[pair[0].value][0] + 1
            max_b = shapes[pair[1].value][0] + 1
            self.encoders[key] = BiMFEncoderParams(
                d, config.head_count, config.d_ff, config.layer_count, max_a, max_b, rng, cross_only=cross_only
            )
            if config.variant != "no_lmf":
                self.fusers[key] = LMFParams(
                    config.lmf_rank, d, config.fusion_dim, rng, bias_augment=config.lmf_bias_augment
                )

        if config.variant == "no_lmf":
            classifier_in = 2 * d * len(config.pairs())
        else:
            classifier_in = config.fusion_dim
        self.classifier = LinearParams(classifier_in, config.label_count, rng)
        self.config = config
        self.shapes = {m: tuple(shapes[m]) for m in config.modalities}


def build_model(config: ModelConfig, shapes: dict[str, tuple[int, int]], seed: int = 0) -> TriMFParams:
    return TriMFParams(config, shapes, seed)


def make_variant(run_config: dict, variant: str, shapes: dict[str, tuple[int, int]], seed: int = 0):
    """Build the params and loss weights for one ablation variant.

    Returns ``(params, weights)`` where ``weights`` zeroes the contrastive
    terms for ``no_frcl`` and for pair-only models (a single pair vector has
    nothing to contrast against).
    """
    from .losses import LossWeights

    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}'; expected one of {VARIANTS}")
    cfg = dict(run_config)
    cfg["variant"] = variant
    model_cfg = ModelConfig.from_run_config(cfg)
    params = build_model(model_cfg, shapes, seed=seed)
    loss_cfg = run_config["loss"]
    weights = LossWeights(loss_cfg["lambda1"], loss_cfg["lambda2"], loss_cfg["lambda3"], loss_cfg["lambda4"])
    if variant == "no_frcl" or len(model_cfg.pairs()) < 3:
        weights = weights.classification_only()
    return params, weights


def _usable_pairs(params: TriMFParams, mask: ModalityMask):
    cfg = params.config
    usable = tuple(p for p in cfg.pairs() if mask.is_present(p[0]) and mask.is_present(p[1]))
    present = [m.value for m in mask.present() if m.value in cfg.modalities]
    if len(present) < 2:
        raise UnsupportedMaskError(
            f"only {present or 'none'} of the model's modalities {cfg.modalities} present; "
            "at least two are required (there is no single-modality path)"
        )
    if cfg.variant == "no_lmf" and len(usable) != len(cfg.pairs()):
        raise UnsupportedMaskError(
            "the no_lmf variant concatenates all pair tokens into a fixed-width "
            "classifier input and does not support masked inference"
        )
    return usable


def _project(params: TriMFParams, name: str, raw: np.ndarray) -> Tensor:
    tokens, native = params.shapes[name]
    if raw.ndim != 3 or raw.shape[1:] != (tokens, native):
        raise T.ShapeError(
            f"modality '{name}' batch shaped {raw.shape}, expected [B, {tokens}, {native}]"
        )
    x = Tensor(np.asarray(raw, dtype=T.default_dtype()))
    if name == ModalityId.TABULAR.value:
        feats = T.reshape(x, x.shape[:2])
        x = embed_tabular(feats, params.tabular_embedder)
    return params.projections[name].apply(x)


def forward_batch(params: TriMFParams, embeddings: dict[str, np.ndarray], mask: ModalityMask | None = None) -> FusionOutput:
    """Run a batch through the fusion model.

    ``embeddings`` maps modality name to a ``[B, tokens, native_dim]`` array;
    entries for masked modalities may be omitted. All pair vectors are keyed
    in canonical order (image+text, image+tabular, text+tabular).
    """
    mask = mask or ModalityMask()
    usable = _usable_pairs(params, mask)
    needed = sorted({m.value for p in usable for m in p}, key=MODALITIES.index)
    projected = {}
    for name in needed:
        if name not in embeddings:
            raise T.ShapeError(f"modality '{name}' is unmasked but missing from the batch")
        projected[name] = _project(params, name, embeddings[name])

    bimf: dict[str, Tensor] = {}
    for pair in usable:
        key = pair_key(pair)
        cls = bimf_encode(projected[pair[0].value], projected[pair[1].value], params.encoders[key])
        if params.config.variant == "no_lmf":
            bimf[key] = T.concat([cls.z_a, cls.z_b], axis=-1)
        else:
            bimf[key] = lmf_fuse(cls.z_a, cls.z_b, params.fusers[key])

    vectors = list(bimf.values())
    if params.config.variant == "no_lmf":
        tri = T.concat(vectors, axis=-1)
    elif len(vectors) == 1:
        tri = vectors[0]  # routed output: the surviving pair vector itself
    else:
        tri = vectors[0] + vectors[1]
        for v in vectors[2:]:
            tri = tri + v
    logits = params.classifier.apply(tri)
    return FusionOutput(bimf=bimf, tri=tri, logits=logits)


def trimf_forward(sample, mask: ModalityMask, params: TriMFParams) -> FusionOutput:
    """Single-sample forward; results are vectors rather than batches."""
    effective = ModalityMask(
        **{
            name: mask.is_present(ModalityId(name)) and sample.presence.is_present(ModalityId(name))
            for name in MODALITIES
        }
    )
    batch = {name: arr[None, ...] for name, arr in sample.embeddings.items()}
    out = forward_batch(params, batch, effective)
    squeeze = lambda t: T.reshape(t, t.shape[1:])
    return FusionOutput(
        bimf={k: squeeze(v) for k, v in out.bimf.items()},
        tri=squeeze(out.tri),
        logits=squeeze(out.logits),
    )


def active_pairs(params: TriMFParams, mask: ModalityMask | None = None) -> tuple[str, ...]:
    """Pair keys that would run under the mask (validates the mask)."""
    return tuple(pair_key(p) for p in _usable_pairs(params, mask or ModalityMask()))


def count_sa_units(params: TriMFParams) -> int:
    total = 0
    for enc in params.encoders.values():
        for layer in enc.layers:
            if isinstance(layer.stream_a, SAUnitParams):
                total += 1
            if isinstance(layer.stream_b, SAUnitParams):
                total += 1
    return total


def parameter_count(params: TriMFParams) -> int:
    return sum(t.size for _, t in params.named_parameters())


def expected_parameter_count(config: ModelConfig, shapes: dict[str, tuple[int, int]]) -> int:
    """Closed-form total parameter count for the standard (lmf-bearing) model."""
    d = config.d_model
    total = 0
    for name in config.modalities:
        tokens, native = shapes[name]
        if name == ModalityId.TABULAR.value:
            total += 2 * config.tabular_embed_dim  # per-feature embedder
            total += config.tabular_embed_dim * d + d
        else:
            total += native * d + d
    d_z = d + 1 if config.lmf_bias_augment else d
    for pair in config.pairs():
        max_a = shapes[pair[0].value][0] + 1
        max_b = shapes[pair[1].value][0] + 1
        total += encoder_parameter_count(
            d, config.d_ff, config.layer_count, max_a, max_b, cross_only=config.variant == "no_sa"
        )
        if config.variant != "no_lmf":
            total += 2 * config.lmf_rank * config.fusion_dim * d_z
    if config.variant == "no_lmf":
        cls_in = 2 * d * len(config.pairs())
    else:
        cls_in = config.fusion_dim
    total += cls_in * config.label_count + config.label_count
    return total


def toy_loss_case(rng):
    """A tiny end-to-end combined-loss case for finite-difference checking."""
    from .losses import LossWeights, combined_loss

    shapes = {"image": (2, 3), "text": (2, 3), "tabular": (2, 1)}
    config = ModelConfig(
        d_model=4, head_count=2, layer_count=1, d_ff=6, lmf_rank=2, fusion_dim=5, tabular_embed_dim=3
    )
    params = build_model(config, shapes, seed=int(rng.integers(1 << 31)))
    batch = {name: rng.standard_normal((2,) + s) for name, s in shapes.items()}
    labels = rng.integers(0, 2, (2, config.label_count)).astype(float)
    weights = LossWeights(1.0, 3.0, 3.0, 3.0)

    def fn(*leaves):
        out = forward_batch(params, batch)
        return combined_loss(out, labels, weights)

    return fn, params.parameters()
