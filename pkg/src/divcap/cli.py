"""Command-line orchestration: data preparation, the three training phases,
caption generation, metric reports and vocabulary statistics."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import corpus, features, metrics
from .checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import AudioClip, CorpusError, Vocabulary
from .discriminators import (
    DiscriminatorConfig,
    DiscriminatorError,
    NaturalnessDiscriminator,
    SemanticDiscriminator,
)
from .features import FeatureError, MelParams, log_mel
from .generator import CaptionGenerator, GeneratorConfig, GeneratorError, build_generator
from .metrics import MetricError
from .training import (
    TrainingError,
    derive_seed,
    pretrain_discriminators,
    pretrain_generator,
    train_adversarial,
)

_ERRORS = (
    CorpusError,
    FeatureError,
    GeneratorError,
    DiscriminatorError,
    MetricError,
    TrainingError,
    CheckpointError,
    ConfigError,
    OSError,
)

SCALE_NOTE = (
    "BLEU/mBLEU/div reported x100; CIDEr reported as raw x100 (raw 0.400 -> 40.0); "
    "SPIDEr = (CIDEr + SPICE) / 2, only with external SPICE scores"
)


# ---------------------------------------------------------------------------
# persistence helpers
# ---------------------------------------------------------------------------


def _vocab_payload(vocab: Vocabulary) -> dict:
    return {"tokens": list(vocab.id_to_token), "counts": dict(vocab.counts)}


def save_generator(path, model: CaptionGenerator, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["vocab"] = _vocab_payload(model.vocab)
    save_checkpoint(path, "generator", model.config, model, extra=payload)


def load_generator(path) -> tuple[CaptionGenerator, dict]:
    payload = load_checkpoint(path, "generator")
    cfg = dict(payload["config"])
    cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
    config = GeneratorConfig(**cfg)
    vocab_data = payload["extra"]["vocab"]
    vocab = Vocabulary(vocab_data["tokens"], vocab_data["counts"])
    model = CaptionGenerator(config, vocab)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def _save_discriminator(path, kind: str, model) -> None:
    save_checkpoint(path, kind, model.config, model)


def _load_discriminator(path, kind: str):
    payload = load_checkpoint(path, kind)
    cfg = dict(payload["config"])
    cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
    config = DiscriminatorConfig(**cfg)
    model = NaturalnessDiscriminator(config) if kind == "naturalness" else SemanticDiscriminator(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def write_jsonl(path, records: Sequence[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_captions(results: Mapping[str, Sequence[str]], path, expected_count: int = 5) -> Path:
    """Write generated captions as deterministic sorted-by-clip JSON."""
    for clip_id, captions in results.items():
        if len(captions) != expected_count:
            raise CorpusError(
                f"clip {clip_id!r} has {len(captions)} captions, expected {expected_count}"
            )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {cid: list(caps) for cid, caps in sorted(results.items())}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_captions(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


def read_reference_tokens(manifest_path) -> dict[str, list[list[str]]]:
    """Per-clip reference token lists from a manifest (vocabulary-free)."""
    refs: dict[str, list[list[str]]] = {}
    for lineno, line in enumerate(Path(manifest_path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            refs[record["clip_id"]] = [
                corpus.normalize_text(c).split() for c in record["captions"]
            ]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{manifest_path}:{lineno}: malformed manifest line ({exc})")
    return refs


# ---------------------------------------------------------------------------
# generation and evaluation (library surface used by the subcommands)
# ---------------------------------------------------------------------------


def generate_captions(
    generator: CaptionGenerator,
    clips: Sequence[AudioClip],
    num_samples: int = 5,
    seed: int = 0,
    baseline: bool = False,
    beam_size: int = 5,
) -> dict[str, list[str]]:
    """Per clip: ``num_samples`` greedy decodes under independent noise draws,
    or the top ``beam_size`` beam-search captions in baseline (no-noise) mode."""
    generator.eval()
    out: dict[str, list[str]] = {}
    if baseline:
        for clip in clips:
            hyps = generator.beam_search(clip.features, beam_size=beam_size)
            if len(hyps) < beam_size:
                raise GeneratorError(
                    f"beam search returned {len(hyps)} < {beam_size} hypotheses for "
                    f"{clip.clip_id!r}; raise max_len"
                )
            out[clip.clip_id] = [cap.text for cap, _ in hyps]
        return out
    rng = torch.Generator()
    rng.manual_seed(derive_seed(seed, "generate"))
    from .generator import collate_features

    for start in range(0, len(clips), 32):
        chunk = clips[start : start + 32]
        feats, lengths = collate_features([c.features for c in chunk])
        per_clip: list[list[str]] = [[] for _ in chunk]
        for _ in range(num_samples):
            for i, cap in enumerate(generator.greedy_batch(feats, lengths, rng=rng)):
                per_clip[i].append(cap.text)
        for clip, caps in zip(chunk, per_clip):
            out[clip.clip_id] = caps
    return out


def evaluate_caption_sets(
    generated: Mapping[str, Sequence[str]],
    references: Mapping[str, Sequence[Sequence[str]]],
    spice: Mapping[str, float] | None = None,
) -> dict:
    """Full fidelity + diversity report for per-clip caption sets.

    Fidelity scores every (clip, caption) pair against the clip's references
    (IDF over the reference corpus, one document per clip) and averages;
    set-level diversity averages mBLEU_4 / div-n over clips."""
    missing = sorted(set(generated) ^ set(references))
    if missing:
        raise MetricError(f"clip ids do not match, offending ids: {missing}")
    if not generated:
        raise MetricError("no generated captions to evaluate")
    clip_ids = sorted(generated)
    sets = {cid: [c.split() for c in generated[cid]] for cid in clip_ids}
    counts = {len(s) for s in sets.values()}

    idf = metrics.build_idf(references[cid] for cid in clip_ids)
    flat_cands = [cap for cid in clip_ids for cap in sets[cid]]
    flat_refs = [references[cid] for cid in clip_ids for _ in sets[cid]]
    bleu = metrics.corpus_bleu(flat_cands, flat_refs, n=4)
    mean_cider = sum(
        metrics.cider(cap, references[cid], idf) for cid in clip_ids for cap in sets[cid]
    ) / len(flat_cands)

    spider = None
    if spice is not None:
        missing_spice = sorted(set(clip_ids) - set(spice))
        if missing_spice:
            raise MetricError(f"spice scores missing for clips: {missing_spice}")
        mean_spice = sum(spice[cid] for cid in clip_ids) / len(clip_ids)
        spider = 100.0 * (mean_cider + mean_spice) / 2.0

    diversity: dict = {"vocab_size": metrics.vocab_size(flat_cands)}
    if all(c >= 2 for c in counts):
        diversity["mbleu_4"] = sum(metrics.mbleu_n(sets[cid], 4) for cid in clip_ids) / len(clip_ids)
    else:
        diversity["mbleu_4"] = None
    diversity["div_1"] = sum(metrics.div_n(sets[cid], 1) for cid in clip_ids) / len(clip_ids)
    diversity["div_2"] = sum(metrics.div_n(sets[cid], 2) for cid in clip_ids) / len(clip_ids)

    return {
        "scale_note": SCALE_NOTE,
        "num_clips": len(clip_ids),
        "captions_per_clip": sorted(counts),
        "fidelity": {
            "bleu_4": bleu,
            "cider": 100.0 * mean_cider,
            "spider": spider,
        },
        "diversity": diversity,
    }


def _report_table(report: dict) -> str:
    rows = [
        ("clips", report["num_clips"]),
        ("BLEU_4", report["fidelity"]["bleu_4"]),
        ("CIDEr", report["fidelity"]["cider"]),
        ("SPIDEr", report["fidelity"]["spider"]),
        ("vocab size", report["diversity"]["vocab_size"]),
        ("mBLEU_4", report["diversity"]["mbleu_4"]),
        ("div-1", report["diversity"]["div_1"]),
        ("div-2", report["diversity"]["div_2"]),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"# {report['scale_note']}"]
    for name, value in rows:
        if value is None:
            shown = "n/a"
        elif isinstance(value, float):
            shown = f"{value:.2f}"
        else:
            shown = str(value)
        lines.append(f"{name.ljust(width)}  {shown}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_dataset(config: ExperimentConfig, manifest: str, vocab: Vocabulary | None = None):
    if vocab is None:
        vocab = corpus.build_vocabulary(corpus.manifest_captions(manifest))
    clips = corpus.load_manifest(manifest, vocab, eager=config.data.eager_features)
    return clips, vocab


def _prepare_run_dir(out: str, config: ExperimentConfig) -> Path:
    run_dir = Path(out)
    for sub in ("checkpoints", "logs", "captions", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    config.echo(run_dir / "config.json")
    return run_dir


def cmd_toy_data(args, config: ExperimentConfig) -> int:
    clips = corpus.make_toy_dataset(seed=config.seed, n_clips=args.clips)
    out_dir = Path(args.out)
    manifest = corpus.write_manifest(clips, out_dir)
    vocab = corpus.vocabulary_for(clips)
    vocab.save(out_dir / "vocab.json")
    print(f"wrote {len(clips)} toy clips to {manifest} (vocab {len(vocab)} tokens)")
    return 0


def cmd_prepare(args, config: ExperimentConfig) -> int:
    mel = config.mel
    out_dir = Path(args.out)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for lineno, line in enumerate(Path(args.manifest).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            clip_id, audio_path = record["clip_id"], record["audio"]
            captions = record["captions"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{args.manifest}:{lineno}: malformed raw manifest line ({exc})")
        wave = features.load_waveform(Path(args.manifest).parent / audio_path, mel.sample_rate)
        mat = log_mel(wave, mel)
        rel = f"features/{clip_id}.npy"
        np.save(out_dir / rel, mat)
        lines.append(json.dumps({"clip_id": clip_id, "features": rel, "captions": captions}, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    print(f"wrote processed manifest {manifest}")
    return 0


def cmd_pretrain_gen(args, config: ExperimentConfig) -> int:
    run_dir = _prepare_run_dir(args.out, config)
    clips, vocab = _load_dataset(config, args.manifest)
    vocab.save(run_dir / "vocab.json")
    train_config = config.train.to_config(config.seed, config.augment.to_params())
    gen_config = config.generator.to_config(len(vocab), train_config.sigma, train_config.noise_mode)
    model, history = pretrain_generator(clips, vocab, gen_config, train_config)
    if config.generator.pretrained_encoder:
        model.load_encoder_weights(config.generator.pretrained_encoder)
    save_generator(run_dir / "checkpoints" / "generator_mle.pt", model)
    write_jsonl(run_dir / "logs" / "mle_log.jsonl", history)
    final = history[-1]["loss"] if history else float("nan")
    print(f"pretrained generator for {train_config.mle_epochs} epochs (final CE {final:.4f})")
    return 0


def cmd_pretrain_disc(args, config: ExperimentConfig) -> int:
    run_dir = _prepare_run_dir(args.out, config)
    generator, _ = load_generator(args.generator)
    clips, _ = _load_dataset(config, args.manifest, vocab=generator.vocab)
    train_config = config.train.to_config(config.seed, None)
    disc_config = config.discriminator.to_config(len(generator.vocab), config.generator)
    d_n, d_s, history = pretrain_discriminators(clips, generator, disc_config, train_config)
    _save_discriminator(run_dir / "checkpoints" / "dn.pt", "naturalness", d_n)
    _save_discriminator(run_dir / "checkpoints" / "ds.pt", "semantic", d_s)
    write_jsonl(run_dir / "logs" / "disc_log.jsonl", history)
    print(f"pretrained discriminators for {train_config.disc_pretrain_epochs} epochs")
    return 0


def cmd_train_gan(args, config: ExperimentConfig) -> int:
    run_dir = _prepare_run_dir(args.out, config)
    train_config = config.train.to_config(config.seed, None)
    if args.from_scratch:
        clips, vocab = _load_dataset(config, args.manifest)
        gen_config = config.generator.to_config(len(vocab), train_config.sigma, train_config.noise_mode)
        generator = build_generator(gen_config, vocab, derive_seed(config.seed, "scratch-gen"))
        disc_config = config.discriminator.to_config(len(vocab), config.generator)
        torch.manual_seed(derive_seed(config.seed, "scratch-disc"))
        d_n = NaturalnessDiscriminator(disc_config)
        d_s = SemanticDiscriminator(disc_config)
        d_s.load_audio_weights(generator.encoder.state_dict())
    else:
        if not (args.generator and args.dn and args.ds):
            raise ConfigError("train-gan needs --generator, --dn and --ds (or --from-scratch)")
        generator, _ = load_generator(args.generator)
        d_n = _load_discriminator(args.dn, "naturalness")
        d_s = _load_discriminator(args.ds, "semantic")
        clips, _ = _load_dataset(config, args.manifest, vocab=generator.vocab)
    val_clips = None
    if config.data.val_manifest:
        val_clips, _ = _load_dataset(config, config.data.val_manifest, vocab=generator.vocab)
    result = train_adversarial(clips, generator, d_n, d_s, train_config, val_clips=val_clips)
    save_generator(run_dir / "checkpoints" / "generator_gan.pt", result.generator)
    if result.best_state is not None:
        best = CaptionGenerator(result.generator.config, result.generator.vocab)
        best.load_state_dict(result.best_state)
        save_generator(
            run_dir / "checkpoints" / "generator_best.pt",
            best,
            extra={"val_cider": result.best_val_cider},
        )
    _save_discriminator(run_dir / "checkpoints" / "dn.pt", "naturalness", result.d_n)
    _save_discriminator(run_dir / "checkpoints" / "ds.pt", "semantic", result.d_s)
    write_jsonl(run_dir / "logs" / "adv_log.jsonl", result.history)
    print(
        f"adversarial training done: {result.g_steps} paired updates over "
        f"{train_config.adv_epochs} epochs (components {train_config.components.label})"
    )
    return 0


def cmd_generate(args, config: ExperimentConfig) -> int:
    generator, _ = load_generator(args.generator)
    clips, _ = _load_dataset(config, args.manifest, vocab=generator.vocab)
    count = args.beam_size if args.baseline else config.generate.num_samples
    results = generate_captions(
        generator,
        clips,
        num_samples=config.generate.num_samples,
        seed=config.seed,
        baseline=args.baseline,
        beam_size=args.beam_size,
    )
    path = write_captions(results, args.out, expected_count=count)
    mode = f"beam-{args.beam_size} baseline" if args.baseline else f"{count} noise samples"
    print(f"wrote {mode} captions for {len(results)} clips to {path}")
    return 0


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    generated = read_captions(args.captions)
    references = read_reference_tokens(args.references)
    spice = json.loads(Path(args.spice).read_text()) if args.spice else None
    report = evaluate_caption_sets(generated, references, spice)
    out_dir = Path(args.out)
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = _report_table(report)
    (reports / "metrics.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_stats(args, config: ExperimentConfig) -> int:
    train_refs = read_reference_tokens(args.train_manifest)
    train_caps = [cap for refs in train_refs.values() for cap in refs]
    if args.captions:
        eval_sets = read_captions(args.captions)
        eval_caps = [c.split() for caps in eval_sets.values() for c in caps]
        n_eval = len(eval_sets)
    else:
        eval_refs = read_reference_tokens(args.eval_manifest)
        eval_caps = [cap for refs in eval_refs.values() for cap in refs]
        n_eval = len(eval_refs)
    ratios = metrics.ngram_count_ratios(train_caps, eval_caps, len(train_refs), n_eval)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from collections import Counter

    train_counts: Counter = Counter()
    for cap in train_caps:
        for order in range(1, 4):
            train_counts.update(metrics.ngram_counts(cap, order))
    with open(out_dir / "count_ratios.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["order", "ngram", "train_count", "ratio"])
        for gram in sorted(ratios, key=lambda g: (len(g), g)):
            writer.writerow([len(gram), " ".join(gram), train_counts[gram], f"{ratios[gram]:.6f}"])

    thresholds = [int(t) for t in args.thresholds.split(",")]
    curve = metrics.vocab_by_threshold(eval_caps, thresholds)
    with open(out_dir / "vocab_by_threshold.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "vocab_size"])
        writer.writerows(curve)
    print(f"wrote {out_dir / 'count_ratios.csv'} and {out_dir / 'vocab_by_threshold.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML/JSON config file")
    parser.add_argument("--preset", choices=["full", "toy"], default="full")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--epochs", type=int, help="epoch count for this phase")
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--noise-mode", choices=["per-step", "fixed"])
    parser.add_argument("--num-samples", type=int)
    parser.add_argument(
        "--components", help="comma subset of nd,sd,le enabling reward components"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divcap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", help="emit a synthetic toy dataset")
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("prepare", help="extract log-mel features from raw audio")
    p.add_argument("--manifest", required=True, help="raw manifest with audio paths")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("pretrain-gen", help="MLE-pretrain the caption generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("pretrain-disc", help="pretrain both discriminators")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generator", required=True, help="pretrained generator checkpoint")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train-gan", help="adversarial training with SCST updates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--generator")
    p.add_argument("--dn")
    p.add_argument("--ds")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("generate", help="decode captions for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--baseline", action="store_true", help="beam search, noise disabled")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--out", required=True, help="output captions JSON path")
    _add_common(p)

    p = sub.add_parser("evaluate", help="fidelity + diversity metric report")
    p.add_argument("--captions", required=True)
    p.add_argument("--references", required=True, help="reference manifest")
    p.add_argument("--spice", help="optional external SPICE scores JSON")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("stats", help="n-gram count ratios and vocab threshold curves")
    p.add_argument("--train-manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--captions")
    group.add_argument("--eval-manifest")
    p.add_argument("--thresholds", default="0,1,2,3,4,5,10,20")
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def _config_overrides(args) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    train: dict = {}
    if args.sigma is not None:
        train["sigma"] = args.sigma
    if getattr(args, "lam", None) is not None:
        train["lam"] = args.lam
    if args.batch_size is not None:
        train["batch_size"] = args.batch_size
    if args.lr is not None:
        train["learning_rate"] = args.lr
    if args.noise_mode is not None:
        train["noise_mode"] = args.noise_mode
    if args.components is not None:
        train["components"] = [c.strip() for c in args.components.split(",") if c.strip()]
    if args.epochs is not None:
        key = {
            "pretrain-gen": "mle_epochs",
            "pretrain-disc": "disc_pretrain_epochs",
            "train-gan": "adv_epochs",
        }.get(args.command)
        if key:
            train[key] = args.epochs
    if train:
        overrides["train"] = train
    if args.num_samples is not None:
        overrides["generate"] = {"num_samples": args.num_samples}
    if getattr(args, "val_manifest", None):
        overrides.setdefault("data", {})["val_manifest"] = args.val_manifest
    return overrides


_COMMANDS = {
    "toy-data": cmd_toy_data,
    "prepare": cmd_prepare,
    "pretrain-gen": cmd_pretrain_gen,
    "pretrain-disc": cmd_pretrain_disc,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config, preset=args.preset, overrides=_config_overrides(args))
        torch.manual_seed(derive_seed(config.seed, f"cli-{args.command}"))
        return _COMMANDS[args.command](args, config)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:  # console entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
