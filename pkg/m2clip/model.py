"""Two-tower model with adapters and the multi-task decoder."""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adapters import AdapterConfig, AdapterPlacement, AdapterRegistry, install_adapters
from .decoder import (
    HeadConfig,
    LabelSet,
    MultiTaskDecoder,
    MultiTaskLoss,
    aggregate_losses,
    cmc_loss,
    cmlm_forward,
    cmlm_loss,
    contrastive_loss,
    contrastive_similarities,
    ground_truth_from_labels,
    vc_forward_loss,
    zero_shot_predict,
)
from .encoders import EncoderConfig, TextEncoder, VideoEncoder, encode_tokens, text_encoder_forward
from .exceptions import ConfigurationError
from .nn import Module
from .tensor import Tensor, getitem
from .tokenizer import TokenSequence, Vocabulary, batch_ids, mask_tokens, normalize, prompt_for, tokenize

logger = logging.getLogger(__name__)

PREDICTION_PATHS = ("vc_head", "cmc_similarity")


@dataclass
class CMLMConfig:
    """Masking for the CMLM head.

    Attributes:
        mask_ratio: fraction of maskable positions replaced by MASK
        label_words_only: mask only the label words, never the prompt template
        adapter_ratio: bottleneck of the block's internal text adapter
    """

    mask_ratio: float = 0.15
    label_words_only: bool = False
    adapter_ratio: float = 0.25

    def validate(self) -> None:
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigurationError(f"cmlm.mask_ratio must lie in (0, 1], got {self.mask_ratio}")
        if self.adapter_ratio <= 0:
            raise ConfigurationError("cmlm.adapter_ratio must be positive")


class M2Clip(Module):
    """Frozen video/text towers, installable adapters and the head parameters.

    Parameter names follow attribute paths (``video.layer2.attn.query.weight``,
    ``decoder.vc_head.bias``), which is also the checkpoint order.
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        vocab: Vocabulary,
        label_names: Sequence[str],
        heads: Optional[HeadConfig] = None,
        cmlm: Optional[CMLMConfig] = None,
    ):
        heads = heads or HeadConfig()
        cmlm = cmlm or CMLMConfig()
        if cfg.vocab_size not in (0, len(vocab)):
            raise ConfigurationError(
                f"model.vocab_size {cfg.vocab_size} does not match vocabulary size {len(vocab)}"
            )
        cfg = replace(cfg, vocab_size=len(vocab))
        cfg.validate()
        heads.validate()
        cmlm.validate()
        if len(label_names) < 1:
            raise ConfigurationError("A model needs at least one class label")

        video_seq, text_seq, head_seq = np.random.SeedSequence(cfg.seed).spawn(3)
        self.video = VideoEncoder(cfg, np.random.default_rng(video_seq))
        self.text = TextEncoder(cfg, np.random.default_rng(text_seq))
        self.decoder = MultiTaskDecoder(
            np.random.default_rng(head_seq),
            heads,
            self.text.layer(cfg.text_layers),
            cfg.joint_width,
            len(vocab),
            len(label_names),
            cmlm.adapter_ratio,
        )
        self.cfg = cfg
        self.vocab = vocab
        self.heads = heads
        self.cmlm_cfg = cmlm
        self.seed = cfg.seed
        self.labels = self.label_set(label_names)
        self.registry = AdapterRegistry()
        self.placement: Optional[AdapterPlacement] = None
        self.step = 0
        # Set by the harness: experiment config snapshot and checkpoint dtype tag
        self.experiment = None
        self.checkpoint_dtype = "f32"
        self.assign_names()

    def install_adapters(
        self, placement: AdapterPlacement, adapter_cfg: Optional[AdapterConfig] = None
    ) -> AdapterRegistry:
        self.registry = install_adapters(self, placement, adapter_cfg)
        self.placement = placement
        return self.registry

    def label_set(self, names: Sequence[str]) -> LabelSet:
        prompts = [tokenize(prompt_for(name), self.vocab, self.cfg.max_text_len) for name in names]
        return LabelSet(list(names), prompts)

    def temperature(self) -> Tensor:
        return self.decoder.temperature()

    def encode_video(self, frames: np.ndarray) -> Tuple[Tensor, Tensor]:
        """``(v [B, d_vl], frame_embeds [B, T, d_vl])`` for clips ``[B, T, H, W, 3]``"""
        return self.video(frames)

    def encode_labels(self, labels: Optional[LabelSet] = None) -> Tensor:
        """Joint embeddings ``[C, d_vl]`` of the prompted labels under the current text tower"""
        labels = labels or self.labels
        _, embeddings = encode_tokens(labels.prompts, self.text, self.vocab.eos_id)
        labels.embeddings = embeddings
        return embeddings

    def masked_prompts(self, targets: Sequence[int], rng: np.random.Generator) -> List[TokenSequence]:
        template_words = len(normalize(prompt_for("")))
        masked = []
        for target in targets:
            prompt = self.labels.prompts[int(target)]
            maskable = None
            if self.cmlm_cfg.label_words_only:
                special = set(self.vocab.special_ids)
                maskable = [
                    i for i, t in enumerate(prompt.ids) if t not in special and i > template_words
                ]
            masked.append(mask_tokens(prompt, self.vocab, rng, self.cmlm_cfg.mask_ratio, maskable))
        return masked

    def compute_losses(
        self, frames: np.ndarray, targets: Sequence[int], rng: np.random.Generator
    ) -> MultiTaskLoss:
        """Forward both towers and every enabled head; sets ``total``.

        Label embeddings are recomputed from the current text tower on every
        call. ``rng`` drives CMLM masking only.
        """
        targets = np.asarray(targets, dtype=np.int64)
        enabled = self.heads.enabled
        parts = MultiTaskLoss(weights=self.heads.weights)

        v, frame_embeds = self.encode_video(frames)
        tau = self.temperature()
        label_embeddings = None
        if enabled["contrastive"] or enabled["cmc"]:
            label_embeddings = self.encode_labels()

        if enabled["contrastive"]:
            texts = getitem(label_embeddings, targets)
            p_v2t, p_t2v = contrastive_similarities(v, texts, tau)
            parts.contrastive = contrastive_loss(p_v2t, p_t2v, ground_truth_from_labels(targets))

        if enabled["cmc"]:
            parts.cmc = cmc_loss(v, label_embeddings, targets, tau)

        if enabled["cmlm"]:
            masked = self.masked_prompts(targets, rng)
            z = text_encoder_forward(batch_ids(masked), self.text)
            logits = cmlm_forward(z, frame_embeds, self.decoder.cmlm)
            original = np.stack([self.labels.prompts[int(t)].as_array() for t in targets])
            parts.cmlm = cmlm_loss(logits, original, [m.mask_positions for m in masked])

        if enabled["vc"]:
            _, parts.vc = vc_forward_loss(v, self.decoder.vc_head, targets)

        aggregate_losses(parts, enabled)
        return parts

    def predict_scores(
        self, frames: np.ndarray, path: str = "vc_head", labels: Optional[LabelSet] = None
    ) -> np.ndarray:
        """Class scores ``[B, C]`` through the VC head or the cosine-similarity path"""
        v, _ = self.encode_video(frames)
        if path == "vc_head":
            if self.decoder.vc_head is None:
                raise ConfigurationError("vc_head path needs the VC head enabled")
            return self.decoder.vc_head(v).numpy()
        if path == "cmc_similarity":
            embeddings = self.encode_labels(labels or self.labels)
            _, probs = zero_shot_predict(v, embeddings, self.temperature())
            return probs.numpy()
        raise ConfigurationError(f"Unknown prediction path {path!r}; expected {PREDICTION_PATHS}")

    def predict_masked(self, sequences: Sequence[TokenSequence], frames: np.ndarray) -> np.ndarray:
        """Most likely vocabulary id at every position ``[B, N]``"""
        if self.decoder.cmlm is None:
            raise ConfigurationError("CMLM head is disabled")
        _, frame_embeds = self.encode_video(frames)
        z = text_encoder_forward(batch_ids(sequences), self.text)
        return np.argmax(cmlm_forward(z, frame_embeds, self.decoder.cmlm).numpy(), axis=-1)
