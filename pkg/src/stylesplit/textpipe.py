"""Tokenization, vocabulary, batching, and the synthetic labeled corpus.

The corpus generator produces sentences of the form

    STYLE_MARKER content-phrase flavor-token

where the marker comes from one of two disjoint sentiment lexicons, the
content phrase from a shared neutral template pool, and the flavor token
either from a shared neutral pool or (with probability `entanglement`) from
a sentiment-correlated sub-pool. Every sentence carries a ground-truth
reformulation with the marker swapped to a random opposite-class marker and
any entangled flavor token swapped to its opposite-class counterpart, so the
ideal style transfer is a one- or two-token edit with exact references.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

POSITIVE_MARKERS = (
    "wonderful", "amazing", "superb", "delightful", "excellent",
    "fantastic", "lovely", "charming", "pleasant", "marvelous",
)
NEGATIVE_MARKERS = (
    "terrible", "awful", "dreadful", "horrendous", "lousy",
    "miserable", "unpleasant", "disappointing", "gloomy", "wretched",
)

# paired sentiment-bearing content words: ENTANGLED_PAIRS[i] = (positive, negative)
ENTANGLED_PAIRS = (
    ("delicious", "stale"),
    ("fresh", "soggy"),
    ("crisp", "bland"),
    ("tender", "rubbery"),
    ("fragrant", "smelly"),
    ("juicy", "burnt"),
    ("savory", "greasy"),
    ("creamy", "watery"),
    ("zesty", "rancid"),
    ("hearty", "meager"),
)

NEUTRAL_FLAVOR = (
    "today", "yesterday", "tonight", "overall", "somehow",
    "apparently", "recently", "eventually", "meanwhile", "regardless",
)

CONTENT_TEMPLATES = (
    "the soup arrived after a short wait",
    "our table sat near the window",
    "the waiter described the daily specials",
    "we ordered two plates of noodles",
    "the kitchen closed at ten",
    "my cousin paid for the meal",
    "the bread basket was refilled twice",
    "a band played in the corner",
    "the menu listed seven desserts",
    "we parked behind the building",
    "the chef came out to chat",
    "rice and beans came with everything",
    "the patio overlooked a small garden",
    "our reservation was for eight people",
    "the coffee machine hissed all evening",
    "a long line formed by noon",
    "the tables were made of oak",
    "we split the bill three ways",
    "the lunch crowd thinned by two",
    "my soup bowl matched the plates",
    "the host walked us upstairs",
    "napkins were folded into triangles",
    "the salad came before the entree",
    "a cat slept by the door",
    "the portions filled the whole plate",
    "we waited twenty minutes for seats",
    "the music switched to jazz later",
    "the counter displayed rows of pastries",
    "our server brought extra forks",
    "the lighting dimmed after sunset",
    "a chalkboard announced the soup",
    "the booth fit six of us",
    "water glasses were refilled often",
    "the tea list covered two pages",
    "my receipt listed every item",
    "the doors opened at seven sharp",
    "a mural covered the back wall",
    "the parking lot held forty cars",
    "we shared a platter of dumplings",
    "the owner greeted regulars by name",
    "the fan spun slowly overhead",
    "my chair wobbled on the tile",
    "the window faced the main street",
    "a waiter recited the wine pairings",
    "the kitchen sent out small samples",
    "we ate outside under umbrellas",
    "the register sat beside the bar",
    "the staff wore matching aprons",
    "my cup held exactly two shots",
    "a shelf of cookbooks lined the hall",
    "the stairs led to a quiet loft",
    "our order arrived on wooden trays",
    "the bar stocked local bottles",
    "we found the place through a friend",
)


class Vocabulary:
    """Bijective token<->id map with reserved PAD/UNK/BOS/EOS ids."""

    def __init__(self, tokens: list[str], min_count: int = 1):
        self.min_count = min_count
        self.id_to_token = list(SPECIALS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens passed to Vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode_id(self, idx: int) -> str:
        return self.id_to_token[idx]

    def decode_ids(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Tokens with frequency >= min_count, ids in descending-frequency order.

    Ties break lexicographically; everything else encodes as UNK.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for sent in corpus for tok in sent)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count=min_count)


def encode_sentence(vocab: Vocabulary, tokens: list[str], max_len: int) -> np.ndarray:
    """BOS + ids + EOS, truncated so EOS is always the last non-pad, PAD-filled."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    ids = [vocab.encode_token(t) for t in tokens[: max_len - 2]]
    row = [BOS] + ids + [EOS]
    row.extend([PAD] * (max_len - len(row)))
    return np.array(row, dtype=np.int64)


@dataclass
class LabeledSentence:
    tokens: list[str]
    style_label: int                      # 1 = positive, 0 = negative
    reference: list[str] | None = None    # opposite-style ground truth


@dataclass
class Batch:
    ids: np.ndarray       # [B x T] int64, BOS ... EOS PAD*
    mask: np.ndarray      # [B x T] float64, 1 exactly on non-PAD positions
    styles: np.ndarray    # [B x 2] one-hot float64
    labels: np.ndarray    # [B] int64


def generate_synthetic_corpus(seed: int, n: int, entanglement: float) -> list[LabeledSentence]:
    """Deterministic labeled corpus with exact opposite-style references."""
    if n <= 0:
        raise ValueError(f"corpus size must be positive, got {n}")
    if not 0.0 <= entanglement <= 1.0:
        raise ValueError(f"entanglement must be in [0,1], got {entanglement}")
    rng = np.random.default_rng(seed)
    markers = (NEGATIVE_MARKERS, POSITIVE_MARKERS)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        marker = markers[label][int(rng.integers(len(markers[label])))]
        template = CONTENT_TEMPLATES[int(rng.integers(len(CONTENT_TEMPLATES)))].split()
        ref_marker = markers[1 - label][int(rng.integers(len(markers[1 - label])))]
        entangled = rng.random() < entanglement
        if entangled:
            pair = int(rng.integers(len(ENTANGLED_PAIRS)))
            flavor = ENTANGLED_PAIRS[pair][1 - label]       # tuple order is (pos, neg)
            ref_flavor = ENTANGLED_PAIRS[pair][label]
        else:
            flavor = NEUTRAL_FLAVOR[int(rng.integers(len(NEUTRAL_FLAVOR)))]
            ref_flavor = flavor
        tokens = [marker] + template + [flavor]
        reference = [ref_marker] + template + [ref_flavor]
        out.append(LabeledSentence(tokens, label, reference))
    return out


def make_batches(data: list[LabeledSentence], vocab: Vocabulary, max_len: int,
                 batch_size: int, seed: int) -> list[Batch]:
    """Seeded shuffle, fixed-size batches (last may be smaller), PAD-consistent masks."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not data:
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    batches = []
    for start in range(0, len(data), batch_size):
        chunk = [data[i] for i in order[start:start + batch_size]]
        batches.append(batch_from_sentences(chunk, vocab, max_len))
    return batches


def batch_from_sentences(chunk: list[LabeledSentence], vocab: Vocabulary, max_len: int) -> Batch:
    rows = [encode_sentence(vocab, s.tokens, max_len) for s in chunk]
    ids = np.stack(rows)
    # trim shared trailing padding so recurrent passes skip dead columns
    width = int((ids != PAD).sum(axis=1).max())
    ids = ids[:, :width]
    mask = (ids != PAD).astype(np.float64)
    labels = np.array([s.style_label for s in chunk], dtype=np.int64)
    styles = np.zeros((len(chunk), 2), dtype=np.float64)
    styles[np.arange(len(chunk)), labels] = 1.0
    return Batch(ids=ids, mask=mask, styles=styles, labels=labels)


# -- corpus files ----------------------------------------------------------------
#
# one sentence per line, space-separated tokens; parallel .labels file with one
# digit per line; optional parallel reference file. Line counts must match.

def write_corpus_files(out_dir: str | Path, train: list[LabeledSentence],
                       eval_set: list[LabeledSentence]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(path: Path, lines: list[str]) -> None:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

    dump(out / "train.txt", [" ".join(s.tokens) for s in train])
    dump(out / "train.labels", [str(s.style_label) for s in train])
    dump(out / "eval.txt", [" ".join(s.tokens) for s in eval_set])
    dump(out / "eval.labels", [str(s.style_label) for s in eval_set])
    dump(out / "eval.refs", [" ".join(s.reference) for s in eval_set])
    return written


def load_corpus(text_path: str | Path, labels_path: str | Path,
                refs_path: str | Path | None = None) -> list[LabeledSentence]:
    texts = Path(text_path).read_text(encoding="utf-8").splitlines()
    labels = Path(labels_path).read_text(encoding="utf-8").splitlines()
    if len(texts) != len(labels):
        raise ValueError(f"line count mismatch: {len(texts)} sentences vs {len(labels)} labels")
    refs = None
    if refs_path is not None:
        refs = Path(refs_path).read_text(encoding="utf-8").splitlines()
        if len(refs) != len(texts):
            raise ValueError(f"line count mismatch: {len(texts)} sentences vs {len(refs)} references")
    out = []
    for i, (line, lab) in enumerate(zip(texts, labels)):
        label = int(lab)
        if label not in (0, 1):
            raise ValueError(f"labels line {i + 1}: style label must be 0 or 1, got {lab!r}")
        ref = refs[i].split() if refs is not None else None
        out.append(LabeledSentence(line.split(), label, ref))
    return out
