"""Caption generator: CNN audio encoder + Transformer decoder with noise injection.

The decoder consumes the encoder output sequence with a noise vector
concatenated to every audio feature vector, so the decoder layer width is
``d_model + noise_dim``. In per-step mode a fresh noise vector is drawn at
every decoding step (the memory is rebuilt step by step); in fixed mode one
vector is reused for the whole caption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import EOS_ID, PAD_ID, SOS_ID, UNK_ID, Caption, Vocabulary, caption_from_ids

NOISE_MODES = ("per-step", "fixed")
TIME_DOWNSAMPLE = 16  # four 2x max-pools


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    d_model: int = 128
    encoder_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    decoder_layers: int = 2
    decoder_heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    noise_dim: int = 64
    noise_sigma: float = 1.0
    noise_mode: str = "per-step"
    max_len: int = 30

    def __post_init__(self) -> None:
        if self.vocab_size < 5:
            raise GeneratorError("vocab must contain the specials plus content tokens")
        if len(self.encoder_channels) != 4:
            raise GeneratorError("encoder uses exactly 4 conv blocks")
        if self.noise_sigma < 0:
            raise GeneratorError("noise_sigma must be >= 0")
        if self.noise_mode not in NOISE_MODES:
            raise GeneratorError(f"noise_mode must be one of {NOISE_MODES}")
        if self.max_len < 2:
            raise GeneratorError("max_len must be >= 2")
        if (self.d_model + self.noise_dim) % self.decoder_heads != 0:
            raise GeneratorError("d_model + noise_dim must be divisible by decoder_heads")

    @property
    def decoder_width(self) -> int:
        return self.d_model + self.noise_dim

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "GeneratorConfig":
        """Shrunken preset for desk-scale runs; keeps the block structure."""
        base = dict(
            d_model=48,
            encoder_channels=(8, 16, 32, 32),
            decoder_layers=2,
            decoder_heads=4,
            ffn_dim=128,
            dropout=0.0,
            noise_dim=16,
            max_len=16,
        )
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


class PositionalEncoding(nn.Module):
    def __init__(self, dim: int, max_len: int = 512):
        super().__init__()
        position = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, dim, 2) * (-math.log(10000.0) / dim))
        pe = torch.zeros(max_len, dim)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div[: dim // 2])
        self.register_buffer("pe", pe, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[: x.size(1)]


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class AudioEncoder(nn.Module):
    """Four conv blocks (2 conv layers each, BN+ReLU, 2x pool), frequency
    average pooling, then a 2-layer MLP down to d_model per time step."""

    def __init__(self, channels: Sequence[int], d_model: int):
        super().__init__()
        blocks = []
        c_in = 1
        for c_out in channels:
            blocks.append(_conv_block(c_in, c_out))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.fc1 = nn.Linear(c_in, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # feats (B, T, F) -> (B, T // 16, d_model)
        out_lengths = torch.div(lengths, TIME_DOWNSAMPLE, rounding_mode="floor")
        if int(out_lengths.min()) < 1:
            raise GeneratorError(
                f"too few frames to survive pooling: need >= {TIME_DOWNSAMPLE}, "
                f"got {int(lengths.min())}"
            )
        x = self.blocks(feats.unsqueeze(1))
        x = x.mean(dim=3)  # average over the frequency axis -> (B, C, T')
        x = x.transpose(1, 2)
        x = self.fc2(torch.relu(self.fc1(x)))
        return x, out_lengths


@dataclass
class SampledCaption:
    """A stochastically decoded caption with its step log-probs and noise."""

    caption: Caption
    logprobs: torch.Tensor  # (generated_tokens,)
    noise_trace: torch.Tensor  # (generated_tokens, noise_dim)


def collate_features(arrays: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([a.shape[0] for a in arrays], dtype=torch.long)
    n_bins = arrays[0].shape[1]
    out = torch.zeros(len(arrays), int(lengths.max()), n_bins)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.as_tensor(a, dtype=torch.float32)
    return out, lengths


def collate_tokens(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out, lengths


def _causal_mask(size: int) -> torch.Tensor:
    return torch.triu(torch.ones(size, size, dtype=torch.bool), diagonal=1)


class CaptionGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig, vocab: Vocabulary):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise GeneratorError(
                f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        width = config.decoder_width
        self.encoder = AudioEncoder(config.encoder_channels, config.d_model)
        self.embed = nn.Embedding(config.vocab_size, width, padding_idx=PAD_ID)
        self.tgt_pos = PositionalEncoding(width, max_len=max(config.max_len + 2, 64))
        self.mem_pos = PositionalEncoding(config.d_model)
        layer = nn.TransformerDecoderLayer(
            d_model=width,
            nhead=config.decoder_heads,
            dim_feedforward=config.ffn_dim,
            dropout=config.dropout,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, config.decoder_layers)
        self.head = nn.Linear(width, config.vocab_size)

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def encode_batch(self, feats: torch.Tensor, lengths: torch.Tensor):
        audio, out_lengths = self.encoder(feats, lengths)
        steps = torch.arange(audio.size(1))
        pad_mask = steps.unsqueeze(0) >= out_lengths.unsqueeze(1)  # True at padding
        return audio, out_lengths, pad_mask

    def encode(self, features: np.ndarray) -> torch.Tensor:
        """Audio feature sequence for a single clip, shape (steps, d_model)."""
        with torch.no_grad():
            feats, lengths = collate_features([np.asarray(features)])
            audio, _, _ = self.encode_batch(feats, lengths)
        return audio[0]

    def load_encoder_weights(self, path) -> None:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        state = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
        self.encoder.load_state_dict(state)

    # ------------------------------------------------------------------
    # decoding internals
    # ------------------------------------------------------------------

    def _memory(self, audio: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        # audio (B, S, d_model), z (B, noise_dim) -> (B, S, d_model + noise_dim)
        pos = self.mem_pos(audio)
        return torch.cat([pos, z.unsqueeze(1).expand(-1, audio.size(1), -1)], dim=-1)

    def _decode(self, tokens: torch.Tensor, memory: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        tgt = self.tgt_pos(self.embed(tokens) * math.sqrt(self.config.decoder_width))
        out = self.decoder(
            tgt,
            memory,
            tgt_mask=_causal_mask(tokens.size(1)),
            memory_key_padding_mask=pad_mask,
        )
        return self.head(out)

    def _step_logits(self, tokens, audio, pad_mask, z) -> torch.Tensor:
        return self._decode(tokens, self._memory(audio, z), pad_mask)[:, -1]

    def _draw_noise(self, batch: int, rng: torch.Generator | None, sigma: float) -> torch.Tensor:
        if sigma == 0.0 or rng is None:
            return torch.zeros(batch, self.config.noise_dim)
        return sigma * torch.randn(batch, self.config.noise_dim, generator=rng)

    @staticmethod
    def _mask_specials(logits: torch.Tensor) -> torch.Tensor:
        # generated captions never contain pad / start / unknown tokens
        masked = logits.clone()
        masked[..., [PAD_ID, SOS_ID, UNK_ID]] = float("-inf")
        return masked

    # ------------------------------------------------------------------
    # sampling and greedy decoding
    # ------------------------------------------------------------------

    def sample_batch(
        self,
        feats: torch.Tensor,
        lengths: torch.Tensor,
        rng: torch.Generator,
        sigma: float | None = None,
        noise_mode: str | None = None,
        max_len: int | None = None,
    ) -> list[SampledCaption]:
        """Multinomial-sample one caption per clip, recording log-probs and noise."""
        sigma = self.config.noise_sigma if sigma is None else sigma
        noise_mode = noise_mode or self.config.noise_mode
        max_len = max_len or self.config.max_len
        with torch.no_grad():
            audio, _, pad_mask = self.encode_batch(feats, lengths)
            batch = audio.size(0)
            tokens = torch.full((batch, 1), SOS_ID, dtype=torch.long)
            alive = torch.ones(batch, dtype=torch.bool)
            logprobs: list[list[float]] = [[] for _ in range(batch)]
            traces: list[list[torch.Tensor]] = [[] for _ in range(batch)]
            fixed_z = self._draw_noise(batch, rng, sigma) if noise_mode == "fixed" else None
            for _ in range(max_len - 1):
                z = fixed_z if fixed_z is not None else self._draw_noise(batch, rng, sigma)
                logp = torch.log_softmax(
                    self._mask_specials(self._step_logits(tokens, audio, pad_mask, z)), dim=-1
                )
                picks = torch.multinomial(logp.exp(), 1, generator=rng).squeeze(1)
                for i in range(batch):
                    if alive[i]:
                        logprobs[i].append(float(logp[i, picks[i]]))
                        traces[i].append(z[i])
                next_tokens = torch.where(alive, picks, torch.full_like(picks, PAD_ID))
                tokens = torch.cat([tokens, next_tokens.unsqueeze(1)], dim=1)
                alive = alive & (picks != EOS_ID)
                if not alive.any():
                    break
        out = []
        for i in range(batch):
            n = len(logprobs[i])
            ids = tokens[i, : n + 1].tolist()
            out.append(
                SampledCaption(
                    caption=caption_from_ids(ids, self.vocab),
                    logprobs=torch.tensor(logprobs[i]),
                    noise_trace=torch.stack(traces[i]),
                )
            )
        return out

    def greedy_batch(
        self,
        feats: torch.Tensor,
        lengths: torch.Tensor,
        noise_traces: Sequence[torch.Tensor] | None = None,
        rng: torch.Generator | None = None,
        sigma: float | None = None,
        noise_mode: str | None = None,
        max_len: int | None = None,
    ) -> list[Caption]:
        """Argmax decoding. Noise comes from ``noise_traces`` when given (a
        trace shorter than the decode reuses its last vector), else is drawn
        with ``rng`` per the noise mode, else is zero."""
        sigma = self.config.noise_sigma if sigma is None else sigma
        noise_mode = noise_mode or self.config.noise_mode
        max_len = max_len or self.config.max_len
        with torch.no_grad():
            audio, _, pad_mask = self.encode_batch(feats, lengths)
            batch = audio.size(0)
            tokens = torch.full((batch, 1), SOS_ID, dtype=torch.long)
            alive = torch.ones(batch, dtype=torch.bool)
            gen_len = torch.zeros(batch, dtype=torch.long)
            fixed_z = None
            if noise_traces is None and rng is not None and noise_mode == "fixed":
                fixed_z = self._draw_noise(batch, rng, sigma)
            for step in range(max_len - 1):
                if noise_traces is not None:
                    z = torch.stack(
                        [tr[min(step, tr.size(0) - 1)] for tr in noise_traces]
                    )
                elif fixed_z is not None:
                    z = fixed_z
                elif rng is not None:
                    z = self._draw_noise(batch, rng, sigma)
                else:
                    z = torch.zeros(batch, self.config.noise_dim)
                logits = self._mask_specials(self._step_logits(tokens, audio, pad_mask, z))
                picks = logits.argmax(dim=-1)
                gen_len = torch.where(alive, gen_len + 1, gen_len)
                next_tokens = torch.where(alive, picks, torch.full_like(picks, PAD_ID))
                tokens = torch.cat([tokens, next_tokens.unsqueeze(1)], dim=1)
                alive = alive & (picks != EOS_ID)
                if not alive.any():
                    break
        return [
            caption_from_ids(tokens[i, : int(gen_len[i]) + 1].tolist(), self.vocab)
            for i in range(batch)
        ]

    def sample_caption(self, features: np.ndarray, rng: torch.Generator, **kw) -> SampledCaption:
        feats, lengths = collate_features([np.asarray(features)])
        return self.sample_batch(feats, lengths, rng, **kw)[0]

    def greedy_decode(
        self,
        features: np.ndarray,
        noise_trace: torch.Tensor | None = None,
        rng: torch.Generator | None = None,
        **kw,
    ) -> Caption:
        feats, lengths = collate_features([np.asarray(features)])
        traces = [noise_trace] if noise_trace is not None else None
        return self.greedy_batch(feats, lengths, noise_traces=traces, rng=rng, **kw)[0]

    # ------------------------------------------------------------------
    # beam search
    # ------------------------------------------------------------------

    def beam_search(
        self,
        features: np.ndarray,
        beam_size: int,
        max_len: int | None = None,
    ) -> list[tuple[Caption, float]]:
        """Top-``beam_size`` captions by length-normalized log-probability.

        Noise is disabled (zero vector), matching the no-noise baseline
        decoding regime. Scores are cumulative log-prob divided by the number
        of generated tokens; hypotheses still alive at the length cap enter
        the pool without an end sentinel.
        """
        if beam_size < 1:
            raise GeneratorError("beam_size must be >= 1")
        max_len = max_len or self.config.max_len
        with torch.no_grad():
            feats, lengths = collate_features([np.asarray(features)])
            audio, _, pad_mask = self.encode_batch(feats, lengths)
            memory = self._memory(audio, torch.zeros(1, self.config.noise_dim))
            live: list[tuple[float, tuple[int, ...]]] = [(0.0, (SOS_ID,))]
            finished: list[tuple[float, tuple[int, ...]]] = []
            for _ in range(max_len - 1):
                prefixes, _ = collate_tokens([ids for _, ids in live])
                mem = memory.expand(len(live), -1, -1)
                mask = pad_mask.expand(len(live), -1)
                logits = self._decode(prefixes, mem, mask)[:, -1]
                logp = torch.log_softmax(self._mask_specials(logits), dim=-1)
                scores = torch.tensor([s for s, _ in live]).unsqueeze(1) + logp
                flat = scores.flatten()
                k = min(beam_size, flat.numel())
                top_scores, top_idx = flat.topk(k)
                vocab_size = logp.size(1)
                next_live: list[tuple[float, tuple[int, ...]]] = []
                for score, idx in zip(top_scores.tolist(), top_idx.tolist()):
                    beam_i, token = divmod(idx, vocab_size)
                    ids = live[beam_i][1] + (token,)
                    if token == EOS_ID:
                        finished.append((score / (len(ids) - 1), ids))
                    else:
                        next_live.append((score, ids))
                live = next_live
                if not live:
                    break
            finished.extend((score / (len(ids) - 1), ids) for score, ids in live)
        finished.sort(key=lambda pair: pair[0], reverse=True)
        return [
            (caption_from_ids(list(ids), self.vocab), score)
            for score, ids in finished[:beam_size]
        ]

    # ------------------------------------------------------------------
    # teacher forcing
    # ------------------------------------------------------------------

    def sequence_logits(
        self,
        feats: torch.Tensor,
        lengths: torch.Tensor,
        tokens: torch.Tensor,
        noise_traces: torch.Tensor | None = None,
        mask_specials: bool = False,
    ) -> torch.Tensor:
        """Logits over steps for teacher-forced token sequences.

        ``tokens`` is (B, L) starting with the start sentinel; the result is
        (B, L-1, vocab) where position t scores tokens[:, t+1]. ``noise_traces``
        is (B, L-1, noise_dim); None means zero noise. When every step of a
        trace is identical the decoder runs in a single pass, otherwise the
        per-step memories force one pass per step.
        """
        audio, _, pad_mask = self.encode_batch(feats, lengths)
        batch, length = tokens.shape
        steps = length - 1
        if noise_traces is None:
            noise_traces = torch.zeros(batch, steps, self.config.noise_dim)
        if noise_traces.shape[:2] != (batch, steps):
            raise GeneratorError("noise trace shape must be (batch, len-1, noise_dim)")
        constant = bool((noise_traces == noise_traces[:, :1]).all())
        if constant:
            memory = self._memory(audio, noise_traces[:, 0])
            logits = self._decode(tokens[:, :-1], memory, pad_mask)
        else:
            per_step = []
            for t in range(steps):
                per_step.append(
                    self._step_logits(tokens[:, : t + 1], audio, pad_mask, noise_traces[:, t])
                )
            logits = torch.stack(per_step, dim=1)
        if mask_specials:
            logits = self._mask_specials(logits)
        return logits

    def sequence_logprobs(
        self,
        feats: torch.Tensor,
        lengths: torch.Tensor,
        tokens: torch.Tensor,
        noise_traces: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-step log-probs of the given tokens under the sampling policy
        (specials masked), shape (B, L-1). Positions past a sequence's end
        must be excluded by the caller (they score padding)."""
        logits = self.sequence_logits(feats, lengths, tokens, noise_traces, mask_specials=True)
        logp = torch.log_softmax(logits, dim=-1)
        return logp.gather(2, tokens[:, 1:].unsqueeze(2)).squeeze(2)


def build_generator(config: GeneratorConfig, vocab: Vocabulary, seed: int) -> CaptionGenerator:
    """Construct a generator with seeded parameter initialization."""
    torch.manual_seed(seed)
    return CaptionGenerator(config, vocab)
