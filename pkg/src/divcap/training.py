"""Three-phase training pipeline.

Phase 1 pretrains the generator with teacher-forced cross-entropy, phase 2
pretrains both discriminators against captions sampled from the frozen
pretrained generator, and phase 3 alternates one discriminator update with
one SCST policy-gradient generator update per mini-batch.

During the adversarial phase the generator stays in eval mode: batch-norm
statistics stay frozen at their pretrained values so that sampling, greedy
baseline decoding and the teacher-forced gradient pass all see the same
network function.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .corpus import (
    PAD_ID,
    AudioClip,
    Caption,
    Vocabulary,
    sample_unpaired,
)
from .discriminators import (
    DiscriminatorConfig,
    NaturalnessDiscriminator,
    SemanticDiscriminator,
    naturalness_loss_from_scores,
    semantic_loss_from_scores,
)
from .features import AugmentParams, spec_augment
from .generator import (
    CaptionGenerator,
    GeneratorConfig,
    SampledCaption,
    build_generator,
    collate_features,
    collate_tokens,
)
from .metrics import IdfTable, build_idf, cider

NOISE_MODES = ("per-step", "fixed")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComponentMask:
    """Which reward components are active (the ablation switch)."""

    naturalness: bool = True
    semantic: bool = True
    evaluator: bool = True

    def __post_init__(self) -> None:
        if not (self.naturalness or self.semantic or self.evaluator):
            raise TrainingError("at least one reward component must be enabled")

    @property
    def label(self) -> str:
        parts = []
        if self.naturalness:
            parts.append("nd")
        if self.semantic:
            parts.append("sd")
        if self.evaluator:
            parts.append("le")
        return "+".join(parts)


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 1.0
    lam: float = 1.0  # reward mixing weight between discriminators and evaluator
    batch_size: int = 32
    learning_rate: float = 1e-4
    mle_epochs: int = 15
    disc_pretrain_epochs: int = 3
    adv_epochs: int = 25
    noise_mode: str = "per-step"
    components: ComponentMask = field(default_factory=ComponentMask)
    seed: int = 0
    unpaired_per_clip: int = 1
    augment: AugmentParams | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise TrainingError("lambda must lie in [0, 1]")
        if self.sigma < 0:
            raise TrainingError("sigma must be >= 0")
        if min(self.mle_epochs, self.disc_pretrain_epochs, self.adv_epochs) < 0:
            raise TrainingError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.unpaired_per_clip < 1:
            raise TrainingError("batch_size and unpaired_per_clip must be >= 1")
        if self.noise_mode not in NOISE_MODES:
            raise TrainingError(f"noise_mode must be one of {NOISE_MODES}")


@dataclass
class RewardBreakdown:
    """Per-caption reward components and the self-critical advantage."""

    d_n: float
    d_s: float
    l_e: float
    combined: float
    baseline: float
    advantage: float


def derive_seed(root: int, label: str) -> int:
    """Stable per-phase seed split from one root seed."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _torch_rng(seed: int) -> torch.Generator:
    rng = torch.Generator()
    rng.manual_seed(seed)
    return rng


def _batches(
    n: int,
    batch_size: int,
    rng: np.random.Generator,
    min_size: int = 1,
) -> list[list[int]]:
    order = rng.permutation(n).tolist()
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2].extend(chunks.pop())
    return chunks


def _noise_traces(
    batch: int,
    steps: int,
    noise_dim: int,
    sigma: float,
    mode: str,
    rng: torch.Generator,
) -> torch.Tensor:
    if sigma == 0.0:
        return torch.zeros(batch, steps, noise_dim)
    if mode == "fixed":
        z = sigma * torch.randn(batch, 1, noise_dim, generator=rng)
        return z.expand(batch, steps, noise_dim).contiguous()
    return sigma * torch.randn(batch, steps, noise_dim, generator=rng)


def _augmented_features(
    clips: Sequence[AudioClip],
    augment: AugmentParams | None,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    if augment is None:
        return [clip.features for clip in clips]
    return [spec_augment(clip.features, augment, rng) for clip in clips]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mle_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    """Teacher-forced cross entropy: per caption, the mean negative log-prob of
    its content-plus-end tokens; padding positions excluded; batch mean."""
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    logp = torch.log_softmax(logits, dim=-1)
    tok_logp = logp.gather(2, targets.unsqueeze(2)).squeeze(2)
    mask = targets != pad_id
    per_seq = -(tok_logp * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1)
    return per_seq.mean()


# ---------------------------------------------------------------------------
# phase 1: generator pretraining
# ---------------------------------------------------------------------------


def pretrain_generator(
    clips: Sequence[AudioClip],
    vocab: Vocabulary,
    gen_config: GeneratorConfig,
    train_config: TrainConfig,
) -> tuple[CaptionGenerator, list[dict]]:
    """MLE-pretrain a fresh generator; returns the model and per-epoch loss log.

    Each epoch pass pairs every clip with one randomly chosen reference. The
    noise pathway is active during pretraining with the configured sigma and
    mode (sigma 0 reproduces the plain noise-free baseline)."""
    cfg = replace(gen_config, noise_sigma=train_config.sigma, noise_mode=train_config.noise_mode)
    model = build_generator(cfg, vocab, derive_seed(train_config.seed, "mle-init"))
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    data_rng = np.random.default_rng(derive_seed(train_config.seed, "mle-data"))
    noise_rng = _torch_rng(derive_seed(train_config.seed, "mle-noise"))
    history: list[dict] = []
    for epoch in range(train_config.mle_epochs):
        model.train()
        losses = []
        for batch_idx in _batches(len(clips), train_config.batch_size, data_rng):
            batch = [clips[i] for i in batch_idx]
            refs = [
                clip.references[int(data_rng.integers(len(clip.references)))] for clip in batch
            ]
            feats, lengths = collate_features(
                _augmented_features(batch, train_config.augment, data_rng)
            )
            tokens, _ = collate_tokens([r.tokens for r in refs])
            traces = _noise_traces(
                len(batch),
                tokens.size(1) - 1,
                cfg.noise_dim,
                train_config.sigma,
                train_config.noise_mode,
                noise_rng,
            )
            loss = mle_loss(model.sequence_logits(feats, lengths, tokens, traces), tokens[:, 1:])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        history.append({"epoch": epoch, "phase": "mle", "loss": sum(losses) / len(losses)})
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# phase 2: discriminator pretraining
# ---------------------------------------------------------------------------


def pretrain_discriminators(
    clips: Sequence[AudioClip],
    generator: CaptionGenerator,
    disc_config: DiscriminatorConfig,
    train_config: TrainConfig,
) -> tuple[NaturalnessDiscriminator, SemanticDiscriminator, list[dict]]:
    """Pretrain both discriminators against the frozen pretrained generator.

    Generated negatives are materialized once from the generator. The
    semantic discriminator's audio branch copies the generator's encoder
    weights and stays frozen; its loss omits the generated term here (only
    clips and human captions are used for its pretraining)."""
    torch.manual_seed(derive_seed(train_config.seed, "disc-init"))
    d_n = NaturalnessDiscriminator(disc_config)
    d_s = SemanticDiscriminator(disc_config)
    d_s.load_audio_weights(generator.encoder.state_dict())

    generator.eval()
    sample_rng = _torch_rng(derive_seed(train_config.seed, "disc-gen"))
    generated: dict[str, Caption] = {}
    for start in range(0, len(clips), train_config.batch_size):
        chunk = clips[start : start + train_config.batch_size]
        feats, lengths = collate_features([c.features for c in chunk])
        for clip, sampled in zip(
            chunk,
            generator.sample_batch(
                feats, lengths, sample_rng, sigma=train_config.sigma,
                noise_mode=train_config.noise_mode,
            ),
        ):
            generated[clip.clip_id] = sampled.caption

    opt_n = torch.optim.Adam(d_n.parameters(), lr=train_config.learning_rate)
    opt_s = torch.optim.Adam(
        [p for p in d_s.parameters() if p.requires_grad], lr=train_config.learning_rate
    )
    data_rng = np.random.default_rng(derive_seed(train_config.seed, "disc-data"))
    history: list[dict] = []
    d_n.train()
    d_s.train()
    for epoch in range(train_config.disc_pretrain_epochs):
        n_losses, s_losses = [], []
        for batch_idx in _batches(len(clips), train_config.batch_size, data_rng, min_size=2):
            batch = [clips[i] for i in batch_idx]
            real = [
                clip.references[int(data_rng.integers(len(clip.references)))] for clip in batch
            ]
            fake = [generated[clip.clip_id] for clip in batch]

            tokens_r, len_r = collate_tokens([c.tokens for c in real])
            tokens_f, len_f = collate_tokens([c.tokens for c in fake])
            loss_n = naturalness_loss_from_scores(d_n(tokens_r, len_r), d_n(tokens_f, len_f))
            opt_n.zero_grad()
            loss_n.backward()
            opt_n.step()
            n_losses.append(float(loss_n))

            unpaired = sample_unpaired(batch, data_rng, train_config.unpaired_per_clip)
            u_feats = [
                clip.features for clip in batch for _ in unpaired[clip.clip_id]
            ]
            u_caps = [cap for clip in batch for cap in unpaired[clip.clip_id]]
            paired_scores = d_s.score_pairs([c.features for c in batch], real)
            unpaired_scores = d_s.score_pairs(u_feats, u_caps)
            loss_s = semantic_loss_from_scores(
                paired_scores, unpaired_scores, None, objective=disc_config.semantic_objective
            )
            opt_s.zero_grad()
            loss_s.backward()
            opt_s.step()
            s_losses.append(float(loss_s))
        history.append(
            {
                "epoch": epoch,
                "phase": "disc-pretrain",
                "d_n_loss": sum(n_losses) / max(len(n_losses), 1),
                "d_s_loss": sum(s_losses) / max(len(s_losses), 1),
            }
        )
    d_n.eval()
    d_s.eval()
    return d_n, d_s, history


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------


def effective_lambda(lam: float, components: ComponentMask) -> float:
    """Ablation-adjusted mixing weight: discriminator-only regimes force 1,
    evaluator-only forces 0."""
    if not components.evaluator:
        return 1.0
    if not (components.naturalness or components.semantic):
        return 0.0
    return lam


def score_rewards(
    features: Sequence[np.ndarray],
    sampled: Sequence[Caption],
    baselines: Sequence[Caption],
    references: Sequence[Sequence[Caption]],
    lam: float,
    components: ComponentMask,
    d_n: NaturalnessDiscriminator | None,
    d_s: SemanticDiscriminator | None,
    idf: IdfTable | None,
) -> list[RewardBreakdown]:
    """Batched reward evaluation for sampled captions and their greedy baselines."""
    batch = len(sampled)
    lam_eff = effective_lambda(lam, components)
    zeros = [0.0] * (2 * batch)
    with torch.no_grad():
        if components.naturalness:
            dn_all = d_n.score_captions(list(sampled) + list(baselines)).tolist()
        else:
            dn_all = zeros
        if components.semantic:
            ds_all = d_s.score_pairs(
                list(features) + list(features), list(sampled) + list(baselines)
            ).tolist()
        else:
            ds_all = zeros
    if components.evaluator:
        le_all = [
            cider(cap.words, [r.words for r in refs], idf)
            for cap, refs in zip(list(sampled) + list(baselines), list(references) * 2)
        ]
    else:
        le_all = zeros
    out = []
    for i in range(batch):
        combined = lam_eff * (dn_all[i] + ds_all[i]) + (1.0 - lam_eff) * le_all[i]
        base = lam_eff * (dn_all[batch + i] + ds_all[batch + i]) + (1.0 - lam_eff) * le_all[
            batch + i
        ]
        out.append(
            RewardBreakdown(
                d_n=dn_all[i],
                d_s=ds_all[i],
                l_e=le_all[i],
                combined=combined,
                baseline=base,
                advantage=combined - base,
            )
        )
    return out


def compute_reward(
    features: np.ndarray,
    sampled: Caption,
    baseline: Caption,
    references: Sequence[Caption],
    lam: float,
    components: ComponentMask,
    d_n: NaturalnessDiscriminator | None,
    d_s: SemanticDiscriminator | None,
    idf: IdfTable | None,
) -> RewardBreakdown:
    """Reward breakdown for one complete caption and its greedy baseline.

    Masked components contribute 0 and the mixing weight is adjusted by
    ``effective_lambda``. Captions cut off at the length cap are scored
    as-is."""
    return score_rewards(
        [features], [sampled], [baseline], [references], lam, components, d_n, d_s, idf
    )[0]


# ---------------------------------------------------------------------------
# phase 3: adversarial training
# ---------------------------------------------------------------------------


def scst_update(
    generator: CaptionGenerator,
    optimizer: torch.optim.Optimizer,
    feats: torch.Tensor,
    lengths: torch.Tensor,
    sampled: Sequence[SampledCaption],
    advantages: Sequence[float],
) -> dict:
    """One self-critical policy-gradient step on a batch of sampled captions.

    The loss is the batch mean of -advantage * sum of step log-probs, with
    log-probs recomputed by teacher-forcing the sampled tokens under their
    recorded noise traces."""
    tokens, tok_lengths = collate_tokens([s.caption.tokens for s in sampled])
    steps = tokens.size(1) - 1
    traces = torch.zeros(len(sampled), steps, generator.config.noise_dim)
    for i, s in enumerate(sampled):
        traces[i, : s.noise_trace.size(0)] = s.noise_trace
    logp = generator.sequence_logprobs(feats, lengths, tokens, traces)
    valid = torch.arange(steps).unsqueeze(0) < (tok_lengths - 1).unsqueeze(1)
    seq_logp = torch.where(valid, logp, torch.zeros(())).sum(dim=1)
    adv = torch.tensor(list(advantages), dtype=seq_logp.dtype)
    loss = -(adv * seq_logp).mean()
    optimizer.zero_grad()
    loss.backward()
    grad_sq = sum(float(p.grad.pow(2).sum()) for p in generator.parameters() if p.grad is not None)
    optimizer.step()
    return {
        "loss": float(loss),
        "grad_norm": math.sqrt(grad_sq),
        "mean_advantage": float(adv.mean()),
    }


def greedy_zero_noise(
    generator: CaptionGenerator,
    clips: Sequence[AudioClip],
    batch_size: int = 32,
) -> dict[str, Caption]:
    """Deterministic greedy decodes (zero noise) for evaluation."""
    generator.eval()
    out: dict[str, Caption] = {}
    for start in range(0, len(clips), batch_size):
        chunk = clips[start : start + batch_size]
        feats, lengths = collate_features([c.features for c in chunk])
        for clip, cap in zip(chunk, generator.greedy_batch(feats, lengths, sigma=0.0)):
            out[clip.clip_id] = cap
    return out


def _validation_cider(generator: CaptionGenerator, clips: Sequence[AudioClip], idf: IdfTable) -> float:
    decoded = greedy_zero_noise(generator, clips)
    scores = [
        cider(decoded[c.clip_id].words, [r.words for r in c.references], idf) for c in clips
    ]
    return sum(scores) / len(scores)


@dataclass
class AdversarialResult:
    generator: CaptionGenerator
    d_n: NaturalnessDiscriminator
    d_s: SemanticDiscriminator
    history: list[dict]
    best_state: dict | None
    best_val_cider: float | None
    d_steps: int
    g_steps: int


def train_adversarial(
    clips: Sequence[AudioClip],
    generator: CaptionGenerator,
    d_n: NaturalnessDiscriminator,
    d_s: SemanticDiscriminator,
    train_config: TrainConfig,
    val_clips: Sequence[AudioClip] | None = None,
) -> AdversarialResult:
    """Alternating adversarial loop: per mini-batch, one discriminators update
    followed by one SCST generator update (Algorithm-style pairing).

    Aborts with a diagnostic if the mean combined reward turns non-finite.
    When validation clips are given, the epoch with the best mean validation
    CIDEr is tracked and its generator state returned in ``best_state``."""
    components = train_config.components
    idf = build_idf([[r.words for r in clip.references] for clip in clips])
    val_idf = (
        build_idf([[r.words for r in clip.references] for clip in val_clips])
        if val_clips
        else None
    )
    opt_g = torch.optim.Adam(generator.parameters(), lr=train_config.learning_rate)
    opt_n = torch.optim.Adam(d_n.parameters(), lr=train_config.learning_rate)
    opt_s = torch.optim.Adam(
        [p for p in d_s.parameters() if p.requires_grad], lr=train_config.learning_rate
    )
    data_rng = np.random.default_rng(derive_seed(train_config.seed, "gan-data"))
    sample_rng = _torch_rng(derive_seed(train_config.seed, "gan-sample"))

    generator.eval()  # frozen BN stats; gradients still flow in scst_update
    d_n.train()
    d_s.train()
    history: list[dict] = []
    best_state = None
    best_val = None
    d_steps = 0
    g_steps = 0
    for epoch in range(train_config.adv_epochs):
        epoch_n, epoch_s, epoch_g = [], [], []
        reward_sums = {"d_n": 0.0, "d_s": 0.0, "l_e": 0.0, "combined": 0.0, "baseline": 0.0, "advantage": 0.0}
        n_rewards = 0
        for batch_idx in _batches(len(clips), train_config.batch_size, data_rng, min_size=2):
            batch = [clips[i] for i in batch_idx]
            feats, lengths = collate_features([c.features for c in batch])

            # (i) caption pools: sampled C_g with logprobs, greedy baselines, unpaired C_u
            sampled = generator.sample_batch(
                feats, lengths, sample_rng,
                sigma=train_config.sigma, noise_mode=train_config.noise_mode,
            )
            baselines = generator.greedy_batch(
                feats, lengths, noise_traces=[s.noise_trace for s in sampled]
            )
            unpaired = sample_unpaired(batch, data_rng, train_config.unpaired_per_clip)
            real = [
                clip.references[int(data_rng.integers(len(clip.references)))] for clip in batch
            ]

            # (ii) one discriminators update (sampled captions are data here,
            # not a gradient path into the generator)
            fake = [s.caption for s in sampled]
            tokens_r, len_r = collate_tokens([c.tokens for c in real])
            tokens_f, len_f = collate_tokens([c.tokens for c in fake])
            loss_n = naturalness_loss_from_scores(d_n(tokens_r, len_r), d_n(tokens_f, len_f))
            opt_n.zero_grad()
            loss_n.backward()
            opt_n.step()

            u_feats = [clip.features for clip in batch for _ in unpaired[clip.clip_id]]
            u_caps = [cap for clip in batch for cap in unpaired[clip.clip_id]]
            loss_s = semantic_loss_from_scores(
                d_s.score_pairs([c.features for c in batch], real),
                d_s.score_pairs(u_feats, u_caps),
                d_s.score_pairs([c.features for c in batch], fake),
                objective=d_s.config.semantic_objective,
            )
            opt_s.zero_grad()
            loss_s.backward()
            opt_s.step()
            d_steps += 1

            # (iii) rewards
            breakdowns = score_rewards(
                [c.features for c in batch],
                fake,
                baselines,
                [c.references for c in batch],
                train_config.lam,
                components,
                d_n,
                d_s,
                idf,
            )
            mean_reward = sum(b.combined for b in breakdowns) / len(breakdowns)
            if not math.isfinite(mean_reward):
                raise TrainingError(
                    f"diverged at epoch {epoch}: mean reward {mean_reward} "
                    f"(components {components.label}, sigma={train_config.sigma})"
                )
            for b in breakdowns:
                for key in reward_sums:
                    reward_sums[key] += getattr(b, key)
            n_rewards += len(breakdowns)

            # (iv) one generator update
            stats = scst_update(
                generator, opt_g, feats, lengths, sampled, [b.advantage for b in breakdowns]
            )
            g_steps += 1
            if d_steps != g_steps:
                raise TrainingError("alternation contract broken: d_steps != g_steps")
            epoch_n.append(float(loss_n))
            epoch_s.append(float(loss_s))
            epoch_g.append(stats["loss"])

        record = {
            "epoch": epoch,
            "phase": "adversarial",
            "d_n_loss": sum(epoch_n) / max(len(epoch_n), 1),
            "d_s_loss": sum(epoch_s) / max(len(epoch_s), 1),
            "g_loss": sum(epoch_g) / max(len(epoch_g), 1),
            "reward": {k: v / max(n_rewards, 1) for k, v in reward_sums.items()},
        }
        if val_clips:
            val_score = _validation_cider(generator, val_clips, val_idf)
            record["val_cider"] = val_score
            if best_val is None or val_score > best_val:
                best_val = val_score
                best_state = copy.deepcopy(generator.state_dict())
        history.append(record)
    return AdversarialResult(
        generator=generator,
        d_n=d_n,
        d_s=d_s,
        history=history,
        best_state=best_state,
        best_val_cider=best_val,
        d_steps=d_steps,
        g_steps=g_steps,
    )
