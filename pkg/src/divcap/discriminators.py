"""Hybrid discriminators: caption naturalness and audio-caption semantics.

The naturalness discriminator is a single-layer GRU over token embeddings
with a sigmoid head. The semantic discriminator pairs a frozen copy of the
audio encoder with a GRU caption encoder; both project into a shared space
and the score is the ReLU-clamped cosine similarity, so scores live in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .corpus import PAD_ID, Caption
from .generator import AudioEncoder, collate_features, collate_tokens

SEMANTIC_OBJECTIVES = ("mse", "bce")


class DiscriminatorError(ValueError):
    pass


@dataclass(frozen=True)
class DiscriminatorConfig:
    vocab_size: int
    embed_dim: int = 256
    hidden_dim: int = 256
    shared_dim: int = 256
    encoder_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    audio_dim: int = 128
    semantic_objective: str = "mse"

    def __post_init__(self) -> None:
        if self.semantic_objective not in SEMANTIC_OBJECTIVES:
            raise DiscriminatorError(f"semantic_objective must be one of {SEMANTIC_OBJECTIVES}")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "DiscriminatorConfig":
        base = dict(
            embed_dim=64,
            hidden_dim=64,
            shared_dim=64,
            encoder_channels=(8, 16, 32, 32),
            audio_dim=48,
        )
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


class _CaptionGRU(nn.Module):
    """Embedding + single-layer GRU; returns the final hidden state."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.gru = nn.GRU(embed_dim, hidden_dim, batch_first=True)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(
            self.embed(tokens), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, hidden = self.gru(packed)
        return hidden[-1]  # (B, hidden_dim)


class NaturalnessDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.rnn = _CaptionGRU(config.vocab_size, config.embed_dim, config.hidden_dim)
        self.head = nn.Linear(config.hidden_dim, 1)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Probability in [0,1] that each caption is human-written, shape (B,)."""
        return torch.sigmoid(self.head(self.rnn(tokens, lengths))).squeeze(1)

    def score_captions(self, captions: Sequence[Caption]) -> torch.Tensor:
        tokens, lengths = collate_tokens([c.tokens for c in captions])
        return self(tokens, lengths)

    def score(self, caption: Caption) -> float:
        with torch.no_grad():
            return float(self.score_captions([caption])[0])


def _mlp(dim_in: int, dim_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, dim_out), nn.ReLU(inplace=True), nn.Linear(dim_out, dim_out))


def clamped_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ReLU-clamped cosine similarity of row pairs; the [0,1] semantic score."""
    return torch.relu(torch.cosine_similarity(a, b, dim=-1))


class SemanticDiscriminator(nn.Module):
    """Audio-caption relevance scorer over a shared embedding space.

    The audio branch is the caption generator's encoder architecture with its
    parameters (and batch-norm statistics) frozen for the whole training
    process; only the projection heads and the caption branch learn.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.audio_encoder = AudioEncoder(config.encoder_channels, config.audio_dim)
        self.audio_encoder.requires_grad_(False)
        self.audio_encoder.eval()
        self.audio_proj = _mlp(config.audio_dim, config.shared_dim)
        self.caption_rnn = _CaptionGRU(config.vocab_size, config.embed_dim, config.hidden_dim)
        self.caption_proj = _mlp(config.hidden_dim, config.shared_dim)

    def train(self, mode: bool = True) -> "SemanticDiscriminator":
        super().train(mode)
        self.audio_encoder.eval()  # keep the frozen branch out of BN-stat updates
        return self

    def load_audio_weights(self, state_dict) -> None:
        self.audio_encoder.load_state_dict(state_dict)

    def embed_audio(self, feats: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            seq, out_lengths = self.audio_encoder(feats, lengths)
            steps = torch.arange(seq.size(1)).unsqueeze(0)
            valid = (steps < out_lengths.unsqueeze(1)).unsqueeze(2)
            pooled = (seq * valid).sum(dim=1) / out_lengths.unsqueeze(1)
        return self.audio_proj(pooled)

    def embed_captions(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.caption_proj(self.caption_rnn(tokens, lengths))

    def forward(
        self,
        feats: torch.Tensor,
        feat_lengths: torch.Tensor,
        tokens: torch.Tensor,
        token_lengths: torch.Tensor,
    ) -> torch.Tensor:
        return clamped_cosine(
            self.embed_audio(feats, feat_lengths), self.embed_captions(tokens, token_lengths)
        )

    def score_pairs(self, features: Sequence[np.ndarray], captions: Sequence[Caption]) -> torch.Tensor:
        feats, feat_lengths = collate_features([np.asarray(f) for f in features])
        tokens, token_lengths = collate_tokens([c.tokens for c in captions])
        return self(feats, feat_lengths, tokens, token_lengths)

    def score(self, features: np.ndarray, caption: Caption) -> float:
        with torch.no_grad():
            return float(self.score_pairs([features], [caption])[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_EPS = 1e-12


def naturalness_loss_from_scores(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of Eq-style real/fake pools, expectations as batch means."""
    if real.numel() == 0 or fake.numel() == 0:
        raise DiscriminatorError("both caption pools must be nonempty")
    return (
        -torch.log(real.clamp_min(_EPS)).mean()
        - torch.log((1.0 - fake).clamp_min(_EPS)).mean()
    )


def semantic_loss_from_scores(
    paired: torch.Tensor,
    unpaired: torch.Tensor | None = None,
    generated: torch.Tensor | None = None,
    objective: str = "mse",
) -> torch.Tensor:
    """Semantic discriminator loss: paired scores pulled to 1, the two negative
    pools pushed to 0 with weight 0.5 each. Negative pools may be absent
    (discriminator pretraining omits the generated term)."""
    if paired.numel() == 0:
        raise DiscriminatorError("paired captions must be nonempty")
    if objective == "mse":
        loss = ((1.0 - paired) ** 2).mean()
        if unpaired is not None and unpaired.numel():
            loss = loss + 0.5 * (unpaired**2).mean()
        if generated is not None and generated.numel():
            loss = loss + 0.5 * (generated**2).mean()
    elif objective == "bce":
        loss = -torch.log(paired.clamp_min(_EPS)).mean()
        if unpaired is not None and unpaired.numel():
            loss = loss - 0.5 * torch.log((1.0 - unpaired).clamp_min(_EPS)).mean()
        if generated is not None and generated.numel():
            loss = loss - 0.5 * torch.log((1.0 - generated).clamp_min(_EPS)).mean()
    else:
        raise DiscriminatorError(f"unknown objective {objective!r}")
    return loss


def naturalness_loss(
    model: NaturalnessDiscriminator,
    real: Sequence[Caption],
    fake: Sequence[Caption],
) -> torch.Tensor:
    return naturalness_loss_from_scores(model.score_captions(real), model.score_captions(fake))


def semantic_loss(
    model: SemanticDiscriminator,
    features: Sequence[np.ndarray],
    paired: Sequence[Caption],
    unpaired_features: Sequence[np.ndarray] = (),
    unpaired: Sequence[Caption] = (),
    generated_features: Sequence[np.ndarray] = (),
    generated: Sequence[Caption] = (),
) -> torch.Tensor:
    """Eq-form semantic loss over (audio, caption) pools.

    Each caption is scored against the audio clip it is evaluated for, so the
    negative pools carry their own feature lists (the same clip's features,
    paired with foreign or generated captions)."""
    pos = model.score_pairs(features, paired)
    neg_u = model.score_pairs(unpaired_features, unpaired) if len(unpaired) else None
    neg_g = model.score_pairs(generated_features, generated) if len(generated) else None
    return semantic_loss_from_scores(pos, neg_u, neg_g, objective=model.config.semantic_objective)


def parameter_checksum(module: nn.Module) -> bytes:
    """Digest of all parameters and buffers; used to assert the freeze invariant."""
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.digest()
