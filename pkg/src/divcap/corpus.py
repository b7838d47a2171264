"""Dataset model: captions, vocabulary, manifests and the synthetic toy corpus.

Token ids are dense. The four special tokens occupy fixed slots so captions
can be inspected without a vocabulary at hand:

    <pad> = 0   batch padding
    <sos> = 1   start sentinel
    <eos> = 2   end sentinel
    <unk> = 3   out-of-vocabulary word
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
UNK_ID = 3

N_REFERENCES = 5
N_MEL_BINS = 64

_NORMALIZE_RE = re.compile(r"[^a-z0-9 ]+")
_SPACE_RE = re.compile(r"\s+")


class CorpusError(ValueError):
    """Raised for malformed captions, manifests or datasets."""


def normalize_text(raw: str) -> str:
    """Lowercase, strip punctuation (any non-alphanumeric) and collapse spaces."""
    text = _SPACE_RE.sub(" ", raw.lower())
    text = _NORMALIZE_RE.sub("", text)
    return _SPACE_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class Caption:
    """A token-id sequence bracketed by sentinels plus its surface form.

    ``tokens`` always starts with ``<sos>``. It ends with ``<eos>`` unless the
    sequence was cut off at the generator's length cap.
    """

    tokens: tuple[int, ...]
    text: str

    def __post_init__(self) -> None:
        if not self.tokens or self.tokens[0] != SOS_ID:
            raise CorpusError("caption must start with the start sentinel")
        body = self.tokens[1:]
        if SOS_ID in body:
            raise CorpusError("start sentinel may only appear first")
        if EOS_ID in body[:-1]:
            raise CorpusError("end sentinel may only appear last")

    @property
    def terminated(self) -> bool:
        return self.tokens[-1] == EOS_ID

    @property
    def content_ids(self) -> tuple[int, ...]:
        end = -1 if self.terminated else len(self.tokens)
        return self.tokens[1:end]

    @property
    def length(self) -> int:
        """Number of content tokens (sentinels excluded)."""
        return len(self.content_ids)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.text.split())


class Vocabulary:
    """Bidirectional token<->id map with training-corpus counts.

    Ids are dense (0..len-1); the specials occupy ids 0-3 and content tokens
    follow in first-seen order.
    """

    def __init__(self, tokens: Sequence[str], counts: Mapping[str, int]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary must start with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate token in vocabulary")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.counts: dict[str, int] = dict(counts)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def decode(self, ids: Iterable[int]) -> str:
        """Surface string for a sequence of content ids."""
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path: str | Path) -> None:
        payload = {"tokens": list(self.id_to_token), "counts": self.counts}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text())
        return cls(payload["tokens"], payload["counts"])


def build_vocabulary(captions: Iterable[str]) -> Vocabulary:
    """Build a vocabulary over normalized caption strings.

    Every distinct content token gets an id; counts reflect total occurrences
    in the input corpus.
    """
    tokens: list[str] = list(SPECIAL_TOKENS)
    counts: dict[str, int] = {}
    seen_any = False
    for raw in captions:
        seen_any = True
        for word in normalize_text(raw).split():
            if word not in counts:
                counts[word] = 0
                tokens.append(word)
            counts[word] += 1
    if not seen_any:
        raise CorpusError("cannot build a vocabulary from an empty collection")
    return Vocabulary(tokens, counts)


def normalize_and_tokenize(raw: str, vocab: Vocabulary) -> Caption:
    """Normalize ``raw`` and encode it with sentinels attached.

    Out-of-vocabulary words map to the unknown id. Raises ``CorpusError``
    when nothing is left after normalization.
    """
    text = normalize_text(raw)
    if not text:
        raise CorpusError(f"caption is empty after normalization: {raw!r}")
    ids = [SOS_ID] + [vocab.id_of(w) for w in text.split()] + [EOS_ID]
    return Caption(tuple(ids), text)


def caption_from_ids(ids: Sequence[int], vocab: Vocabulary) -> Caption:
    """Wrap generated ids (with leading ``<sos>``) into a Caption."""
    ids = tuple(ids)
    end = -1 if ids and ids[-1] == EOS_ID else len(ids)
    text = vocab.decode(ids[1:end])
    return Caption(ids, text)


class AudioClip:
    """One audio item: id, log-mel features and exactly five reference captions."""

    def __init__(
        self,
        clip_id: str,
        references: Sequence[Caption],
        features: np.ndarray | None = None,
        features_path: str | Path | None = None,
    ):
        if len(references) != N_REFERENCES:
            raise CorpusError(
                f"clip {clip_id!r} has {len(references)} captions, expected {N_REFERENCES}"
            )
        if features is None and features_path is None:
            raise CorpusError(f"clip {clip_id!r} has neither features nor a feature path")
        self.clip_id = clip_id
        self.references = tuple(references)
        self.features_path = Path(features_path) if features_path is not None else None
        self._features = self._validate(features) if features is not None else None

    def _validate(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != N_MEL_BINS or feats.shape[0] < 1:
            raise CorpusError(
                f"clip {self.clip_id!r}: feature matrix must be (frames, {N_MEL_BINS}), "
                f"got {feats.shape}"
            )
        return feats

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = self._validate(np.load(self.features_path))
        return self._features

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    def __repr__(self) -> str:  # pragma: no cover
        return f"AudioClip({self.clip_id!r}, refs={len(self.references)})"


def load_manifest(
    path: str | Path,
    vocab: Vocabulary,
    eager: bool = True,
) -> list[AudioClip]:
    """Load a JSON-Lines manifest into AudioClips.

    Each line is ``{"clip_id": str, "features": relative .npy path,
    "captions": [5 strings]}``; feature paths resolve against the manifest's
    directory. With ``eager=False`` feature arrays load on first access, but
    file existence is still checked up front.
    """
    path = Path(path)
    base = path.parent
    clips: list[AudioClip] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            clip_id = record["clip_id"]
            feat_rel = record["features"]
            raw_captions = record["captions"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        if len(raw_captions) != N_REFERENCES:
            raise CorpusError(
                f"{path}:{lineno}: clip {clip_id!r} has {len(raw_captions)} captions, "
                f"expected {N_REFERENCES}"
            )
        feat_path = base / feat_rel
        if not feat_path.exists():
            raise CorpusError(f"{path}:{lineno}: missing feature file {feat_path}")
        refs = [normalize_and_tokenize(c, vocab) for c in raw_captions]
        clip = AudioClip(clip_id, refs, features_path=feat_path)
        if eager:
            clip.features  # load and validate now
        clips.append(clip)
    return clips


def manifest_captions(path: str | Path) -> list[str]:
    """All caption strings from a manifest, in file order (for vocab building)."""
    texts: list[str] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            texts.extend(json.loads(line)["captions"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    return texts


def write_manifest(clips: Sequence[AudioClip], out_dir: str | Path) -> Path:
    """Write feature .npy files plus a manifest.jsonl under ``out_dir``."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in clips:
        rel = f"features/{clip.clip_id}.npy"
        np.save(out_dir / rel, clip.features)
        lines.append(
            json.dumps(
                {
                    "clip_id": clip.clip_id,
                    "features": rel,
                    "captions": [ref.text for ref in clip.references],
                },
                sort_keys=True,
            )
        )
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class CaptionSets:
    """Per-clip caption pools used by the discriminators."""

    paired: list[Caption] = field(default_factory=list)
    unpaired: list[Caption] = field(default_factory=list)
    generated: list[Caption] = field(default_factory=list)


def sample_unpaired(
    batch: Sequence[AudioClip],
    rng: np.random.Generator,
    per_clip: int = 1,
) -> dict[str, list[Caption]]:
    """Draw unpaired captions for every clip from OTHER clips in the batch.

    Each of the ``per_clip`` draws picks another clip uniformly, then one of
    its references uniformly. Requires at least two clips.
    """
    if len(batch) < 2:
        raise CorpusError("unpaired sampling needs a batch of at least 2 clips")
    out: dict[str, list[Caption]] = {}
    for i, clip in enumerate(batch):
        picks: list[Caption] = []
        for _ in range(per_clip):
            j = int(rng.integers(0, len(batch) - 1))
            if j >= i:
                j += 1
            other = batch[j]
            picks.append(other.references[int(rng.integers(0, len(other.references)))])
        out[clip.clip_id] = picks
    return out


# ---------------------------------------------------------------------------
# Synthetic toy corpus
# ---------------------------------------------------------------------------

TOY_CLASSES = ("rain", "dog", "engine", "bird", "siren")

# Dominant sentence family: one long shared prefix with a varying tail word.
# Maximum-likelihood training concentrates on it, which is what makes the
# beam-search baseline produce near-duplicate caption sets on this corpus.
_TOY_TAILS = ("distance", "background", "street", "room", "morning", "evening", "park", "area")
_TOY_MAIN = "a {w} sound is heard in the {tail}"
_TOY_ALTS = (
    "the {w} keeps going on outside",
    "someone hears a {w} far away",
    "people notice a loud {w} nearby",
    "a faint {w} starts and stops",
    "the steady {w} fills the room",
    "the {w} stops quite suddenly",
)

_TOY_MIN_FRAMES = 48
_TOY_MAX_FRAMES = 80
_TOY_BAND_WIDTH = 8


def toy_class_of(clip_id: str) -> str:
    """Declared sound class of a toy clip (encoded in its id)."""
    return clip_id.rsplit("-", 1)[1]


def make_toy_dataset(seed: int, n_clips: int) -> list[AudioClip]:
    """Deterministic synthetic dataset of class-patterned clips.

    Clip ``i`` belongs to class ``i % 5``. Its features carry a strong
    class-specific mel band on top of noise, and all five of its captions
    mention the class word: three from the dominant template family with
    distinct tail words, two from the alternative templates.
    """
    if n_clips < 2:
        raise CorpusError("toy dataset needs at least 2 clips")
    rng = np.random.default_rng(seed)
    texts_per_clip: list[list[str]] = []
    ids: list[str] = []
    feats: list[np.ndarray] = []
    for i in range(n_clips):
        cls = i % len(TOY_CLASSES)
        word = TOY_CLASSES[cls]
        ids.append(f"clip{i:04d}-{word}")

        frames = int(rng.integers(_TOY_MIN_FRAMES, _TOY_MAX_FRAMES + 1))
        mat = rng.normal(0.0, 0.3, size=(frames, N_MEL_BINS))
        lo = 4 + cls * 12
        band = rng.normal(3.0, 0.3, size=(frames, _TOY_BAND_WIDTH))
        mat[:, lo : lo + _TOY_BAND_WIDTH] += band
        feats.append(mat.astype(np.float32))

        tails = rng.choice(len(_TOY_TAILS), size=3, replace=False)
        alts = rng.choice(len(_TOY_ALTS), size=2, replace=False)
        captions = [_TOY_MAIN.format(w=word, tail=_TOY_TAILS[t]) for t in tails]
        captions += [_TOY_ALTS[a].format(w=word) for a in alts]
        texts_per_clip.append(captions)

    vocab = build_vocabulary(t for texts in texts_per_clip for t in texts)
    clips = []
    for clip_id, mat, texts in zip(ids, feats, texts_per_clip):
        refs = [normalize_and_tokenize(t, vocab) for t in texts]
        clips.append(AudioClip(clip_id, refs, features=mat))
    return clips


def vocabulary_for(clips: Sequence[AudioClip]) -> Vocabulary:
    """Rebuild the vocabulary implied by a clip collection's reference texts."""
    return build_vocabulary(ref.text for clip in clips for ref in clip.references)
