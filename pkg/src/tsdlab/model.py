"""Full re-identification model: encoder, part decoder, mask generator, BNNeck heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .decoder import DecoderConfig, DecoderOutput, TSDDecoder, mask_bias
from .encoder import EncoderConfig, ViTEncoder
from .losses import (BNNeckHead, LossReport, ce_bnneck, diversity_loss, distillation_loss,
                     focal_visibility_loss, part_avg_triplet, total_loss, triplet_batch_hard)
from .maskgen import MaskGenerator, binarize, labels_to_mask, parsing_loss, part_pool, visibility_labels
from .matching import EmbeddingSet
from .nn import Module
from .tensor import Tensor, no_grad

MASK_SOURCES = ("gt", "learned")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    parts: int = 8
    decoder_layers: int = 1
    key_pos: bool = True
    scale_teacher: bool = True

    use_decoder: bool = True
    teacher: bool = True
    diversity: bool = True
    visibility: bool = True
    mask_source: str = "learned"
    mask_warmup_epochs: int = 0

    margin: float = 0.3
    id_smoothing: float = 0.0
    parsing_smoothing: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    distill_stop_gradient: bool = True
    visibility_min_fraction: float = 0.0
    visibility_threshold: float = 0.5

    lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 120
    ids_per_batch: int = 16
    instances_per_id: int = 4
    seed: int = 0
    check_leakage: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"mask_source must be one of {MASK_SOURCES}")
        if self.teacher and not self.use_decoder:
            raise ValueError("the teacher branch needs the decoder")
        if self.diversity and not self.teacher:
            raise ValueError("the diversity loss acts on teacher features")
        if self.visibility and not self.use_decoder:
            raise ValueError("visibility prediction needs the decoder")

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id

    def decoder_config(self) -> DecoderConfig:
        e = self.encoder
        return DecoderConfig(parts=self.parts, dim=e.dim, heads=e.heads, ffn_dim=e.ffn_dim,
                             layers=self.decoder_layers, scale_teacher=self.scale_teacher,
                             key_positions=e.num_patches if self.key_pos else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        enc = data.pop("encoder", {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(encoder=EncoderConfig(**enc), **data)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        enc = EncoderConfig(image_h=32, image_w=16, patch_size=4, stride=4, depth=2, heads=4, dim=32, ffn_dim=64,
                            pos_init_std=1.0)
        base = dict(encoder=enc, ids_per_batch=8, lr=0.05, mask_warmup_epochs=30)
        base.update(overrides)
        return cls(**base)


VARIANTS = ("baseline", "M1", "M2", "M3", "M4")


def variant(cfg: RunConfig, name: str) -> RunConfig:
    """Ablation ladder: encoder-only baseline, then decoder without teacher (M1),
    + masked teacher on ground-truth parsing (M2), + diversity (M3),
    + learnable mask (M4)."""
    table = {
        "baseline": dict(use_decoder=False, teacher=False, diversity=False, visibility=False, mask_source="gt"),
        "M1": dict(use_decoder=True, teacher=False, diversity=False, visibility=False, mask_source="gt"),
        "M2": dict(use_decoder=True, teacher=True, diversity=False, visibility=True, mask_source="gt"),
        "M3": dict(use_decoder=True, teacher=True, diversity=True, visibility=True, mask_source="gt"),
        "M4": dict(use_decoder=True, teacher=True, diversity=True, visibility=True, mask_source="learned"),
    }
    if name not in table:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return replace(cfg, **table[name])


@dataclass
class ForwardOutput:
    report: LossReport
    student: DecoderOutput | None = None
    teacher: DecoderOutput | None = None
    mask: np.ndarray | None = None
    visibility: Tensor | None = None


class TSDModel(Module):
    def __init__(self, cfg: RunConfig, num_ids: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.num_ids = num_ids
        d = cfg.encoder.dim
        pd = cfg.parts * d
        self.encoder = ViTEncoder(cfg.encoder, rng)
        self.head_global = BNNeckHead(d, num_ids, rng)
        self.decoder = TSDDecoder(cfg.decoder_config(), rng) if cfg.use_decoder else None
        self.head_student = BNNeckHead(pd, num_ids, rng) if cfg.use_decoder else None
        self.head_teacher = BNNeckHead(pd, num_ids, rng) if cfg.teacher else None
        learned = cfg.teacher and cfg.mask_source == "learned"
        self.mask_generator = MaskGenerator(cfg.parts, d, rng) if learned else None
        self.head_part = BNNeckHead(pd, num_ids, rng) if learned else None

    def teacher_mask(self, gt_labels: np.ndarray, heat, epoch: int) -> np.ndarray:
        if self.mask_generator is None or epoch < self.cfg.mask_warmup_epochs:
            return labels_to_mask(gt_labels, self.cfg.parts)
        mask, _ = binarize(heat)
        return mask

    def forward(self, images: np.ndarray, labels: np.ndarray, gt_part_labels: np.ndarray,
                epoch: int = 0) -> ForwardOutput:
        cfg = self.cfg
        labels = np.asarray(labels)
        enc = self.encoder(images)
        comps: dict[str, Tensor] = {
            "ce_global": ce_bnneck(enc.global_, labels, self.head_global, cfg.id_smoothing),
            "tri_global": triplet_batch_hard(enc.global_, labels, cfg.margin),
        }
        out = ForwardOutput(report=None)
        if self.decoder is not None:
            gt_vis = visibility_labels(gt_part_labels, cfg.parts, cfg.visibility_min_fraction)
            heat = self.mask_generator(enc.patches) if self.mask_generator is not None else None
            mask = self.teacher_mask(gt_part_labels, heat, epoch) if cfg.teacher else None
            student, teacher = self.decoder(enc.global_, enc.patches, mask)
            vis_target = None
            if mask is not None:
                _, empty = mask_bias(mask)
                vis_target = np.where(empty, 0.0, gt_vis)
            comps["ce_student"] = ce_bnneck(student.concat, labels, self.head_student, cfg.id_smoothing)
            comps["tri_student"] = part_avg_triplet(student.parts, vis_target, labels, cfg.margin)
            if teacher is not None:
                comps["ce_teacher"] = ce_bnneck(teacher.concat, labels, self.head_teacher, cfg.id_smoothing)
                comps["tri_teacher"] = part_avg_triplet(teacher.parts, vis_target, labels, cfg.margin)
                comps["distill"] = distillation_loss(student.parts, teacher.parts, cfg.distill_stop_gradient)
                if cfg.diversity:
                    comps["diversity"] = diversity_loss(teacher.parts)
            if cfg.visibility:
                v = self.decoder.predict_visibility(student.parts)
                comps["visibility"] = focal_visibility_loss(v, vis_target if vis_target is not None else gt_vis,
                                                            cfg.focal_alpha, cfg.focal_gamma)
                out.visibility = v
            if heat is not None:
                pooled, pooled_flat = part_pool(enc.patches, heat)
                comps["ce_part"] = ce_bnneck(pooled_flat, labels, self.head_part, cfg.id_smoothing)
                comps["tri_part"] = part_avg_triplet(pooled, gt_vis, labels, cfg.margin)
                comps["parsing"] = parsing_loss(heat, gt_part_labels, cfg.parsing_smoothing)
            out.student, out.teacher, out.mask = student, teacher, mask
        out.report = total_loss(comps)
        return out

    def embed(self, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray | None,
                                                                        np.ndarray | None]:
        """Inference features: (global [n, D], parts [n, P, D] | None, visibility [n, P] | None)."""
        was_training = self.training
        self.eval()
        gs, ps, vs = [], [], []
        with no_grad():
            for start in range(0, len(images), batch_size):
                enc = self.encoder(images[start:start + batch_size])
                gs.append(enc.global_.data)
                if self.decoder is not None:
                    student, _ = self.decoder(enc.global_, enc.patches, None)
                    ps.append(student.parts.data)
                    if self.cfg.visibility:
                        vs.append(self.decoder.predict_visibility(student.parts).data)
        self.train(was_training)
        return (np.concatenate(gs), np.concatenate(ps) if ps else None, np.concatenate(vs) if vs else None)

    def attention_maps(self, images: np.ndarray) -> np.ndarray:
        """Student cross-attention per part, averaged over heads: [n, P, N]."""
        self.eval()
        with no_grad():
            enc = self.encoder(images)
            student, _ = self.decoder(enc.global_, enc.patches, None)
        self.train()
        return student.attention.mean(axis=1)

    def embedding_set(self, ds, batch_size: int = 64) -> EmbeddingSet:
        g, p, v = self.embed(ds.images, batch_size)
        return EmbeddingSet(list(ds.image_ids), np.asarray(ds.ids), np.asarray(ds.cams), list(ds.occlusion),
                            g, p, v)
