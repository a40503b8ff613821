"""Decomposition-quality measures: probe accuracy, BLEU, latent preservation.

Three measurements of how well a trained model separated style from content:

* an external probe classifier retrained from scratch on frozen posterior
  means (held-out accuracy 0.5 means the style is gone, 1.0 means it leaked),
* corpus BLEU between greedy style transfers and ground-truth references,
* cosine distance and KL divergence between the latent code of an input and
  of its transferred output (0 means the semantic component survived).

Plus the rule-based style oracle for the synthetic corpus, transfer accuracy,
a deterministic 2-d PCA export of the latent space, and rerun aggregation.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from . import models
from .autodiff import Adam, Tensor, cross_entropy, kl_diag_gaussian, matmul
from .models import ModelParams, flip_code
from .textpipe import (
    NEGATIVE_MARKERS,
    POSITIVE_MARKERS,
    LabeledSentence,
    Vocabulary,
    batch_from_sentences,
)

_POS_SET = frozenset(POSITIVE_MARKERS)
_NEG_SET = frozenset(NEGATIVE_MARKERS)


def style_oracle(tokens: list[str]) -> int | None:
    """Label by marker-lexicon majority: 1 positive, 0 negative, None on tie/no match."""
    pos = sum(1 for t in tokens if t in _POS_SET)
    neg = sum(1 for t in tokens if t in _NEG_SET)
    if pos > neg:
        return 1
    if neg > pos:
        return 0
    return None


# -- probe classifier ------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.01
    holdout: float = 0.2
    hidden: int = 32


class ProbeClassifier:
    """Small MLP (d -> hidden -> 2) trained from scratch on frozen latents.

    Deliberately low capacity: the measurement asks whether style is easily
    recoverable, and a fixed probe keeps numbers comparable across models.
    """

    def __init__(self, dim: int, seed: int, config: ProbeConfig | None = None):
        self.config = config or ProbeConfig()
        rng = np.random.default_rng(seed)
        h = self.config.hidden
        b1 = 1.0 / math.sqrt(dim)
        b2 = 1.0 / math.sqrt(h)
        self.w1 = Tensor(rng.uniform(-b1, b1, size=(dim, h)), requires_grad=True)
        self.b1 = Tensor(np.zeros(h), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-b2, b2, size=(h, 2)), requires_grad=True)
        self.b2 = Tensor(np.zeros(2), requires_grad=True)

    def _params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _logits(self, x: Tensor) -> Tensor:
        return matmul((matmul(x, self.w1) + self.b1).tanh(), self.w2) + self.b2

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        opt = Adam(self._params(), lr=self.config.lr)
        data = Tensor(x)
        for _ in range(self.config.epochs):
            loss = cross_entropy(self._logits(data), y)
            loss.backward()
            opt.step()

    def predict(self, x: np.ndarray) -> np.ndarray:
        hidden = np.tanh(x @ self.w1.data + self.b1.data)
        logits = hidden @ self.w2.data + self.b2.data
        return logits.argmax(axis=1)


def train_probe(latents: list[tuple[np.ndarray, int]], seed: int,
                config: ProbeConfig | None = None) -> tuple[ProbeClassifier, float]:
    """Seeded 80/20 split, train on frozen latents, report held-out accuracy."""
    if len(latents) < 100:
        raise ValueError(f"probe needs >= 100 samples, got {len(latents)}")
    y_all = np.array([label for _, label in latents], dtype=np.int64)
    if len(np.unique(y_all)) < 2:
        raise ValueError("probe needs both labels present, got a single class")
    x_all = np.stack([np.asarray(vec, dtype=np.float64) for vec, _ in latents])
    config = config or ProbeConfig()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(latents))
    n_held = max(1, int(round(len(latents) * config.holdout)))
    held, kept = order[:n_held], order[n_held:]
    probe = ProbeClassifier(x_all.shape[1], seed, config)
    probe.fit(x_all[kept], y_all[kept])
    accuracy = float((probe.predict(x_all[held]) == y_all[held]).mean())
    return probe, accuracy


# -- BLEU ------------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Corpus BLEU-4: clipped modified n-gram precisions, brevity penalty.

    Higher-order precisions (n >= 2) get add-one smoothing on numerator and
    denominator; short sentences rarely share 4-grams and unsmoothed scores
    would collapse to zero. Identical corpora score exactly 1.0; zero unigram
    overlap scores exactly 0.0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        matches = 0
        total = 0
        for cand, ref in zip(candidates, references):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            ref_counts = _ngrams(ref, n)
            total += sum(counts.values())
            matches += sum(min(count, ref_counts[gram]) for gram, count in counts.items())
        if n == 1:
            if matches == 0:
                return 0.0
            precision = matches / total
        else:
            precision = (matches + 1) / (total + 1)
        log_sum += math.log(precision)
    brevity = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return brevity * math.exp(log_sum / 4.0)


# -- model-level measurements -------------------------------------------------------

def _encode_mu_logvar(params: ModelParams, sentences: list[LabeledSentence],
                      vocab: Vocabulary, max_len: int,
                      batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mus, logvars, labels = [], [], []
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        batch = batch_from_sentences(chunk, vocab, max_len)
        latent = models.encode(params, batch, deterministic=True)
        mus.append(latent.mu.data)
        logvars.append(latent.logvar.data)
        labels.append(batch.labels)
    return np.concatenate(mus), np.concatenate(logvars), np.concatenate(labels)


def transfer_greedy(params: ModelParams, sentences: list[LabeledSentence],
                    vocab: Vocabulary, max_len: int,
                    batch_size: int = 64) -> list[list[str]]:
    """Greedy-decode every sentence with its style code flipped."""
    outputs: list[list[str]] = []
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        batch = batch_from_sentences(chunk, vocab, max_len)
        latent = models.encode(params, batch, deterministic=True)
        ids = models.generate_greedy(params, latent.mu.data,
                                     flip_code(batch.styles), max_len)
        outputs.extend(vocab.decode_ids(row) for row in ids)
    return outputs


def transfer_accuracy(params: ModelParams, sentences: list[LabeledSentence],
                      vocab: Vocabulary, max_len: int) -> float:
    """Fraction of flipped-code decodes the rule oracle labels as the target style."""
    outputs = transfer_greedy(params, sentences, vocab, max_len)
    hits = 0
    for sent, out_tokens in zip(sentences, outputs):
        if style_oracle(out_tokens) == 1 - sent.style_label:
            hits += 1
    return hits / len(sentences)


def latent_preservation(params: ModelParams, sentences: list[LabeledSentence],
                        vocab: Vocabulary, max_len: int,
                        batch_size: int = 64) -> tuple[float, float]:
    """Mean cosine distance and KL between E(x) and E(transfer(x)).

    Encode deterministically, greedy-decode with the flipped code, re-encode
    the decode, and compare posteriors per example. Rows with a near-zero mu
    norm are skipped with a warning; more than 1% skipped is an error.
    """
    cos_vals, kl_vals = [], []
    skipped = 0
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        batch = batch_from_sentences(chunk, vocab, max_len)
        latent = models.encode(params, batch, deterministic=True)
        decoded = models.generate_greedy(params, latent.mu.data,
                                         flip_code(batch.styles), max_len)
        re_chunk = [LabeledSentence(vocab.decode_ids(row), 1 - s.style_label)
                    for row, s in zip(decoded, chunk)]
        re_batch = batch_from_sentences(re_chunk, vocab, max_len)
        re_latent = models.encode(params, re_batch, deterministic=True)
        mu1, lv1 = latent.mu.data, latent.logvar.data
        mu2, lv2 = re_latent.mu.data, re_latent.logvar.data
        for i in range(len(chunk)):
            n1, n2 = np.linalg.norm(mu1[i]), np.linalg.norm(mu2[i])
            if n1 <= 1e-12 or n2 <= 1e-12:
                skipped += 1
                continue
            cos_vals.append(1.0 - float(mu1[i] @ mu2[i]) / (n1 * n2))
            kl_vals.append(kl_diag_gaussian(mu1[i], lv1[i], mu2[i], lv2[i]))
    if skipped:
        warnings.warn(f"latent_preservation skipped {skipped} degenerate rows")
        if skipped > 0.01 * len(sentences):
            raise ValueError(f"{skipped}/{len(sentences)} degenerate latent rows (> 1%)")
    return float(np.mean(cos_vals)), float(np.mean(kl_vals))


# -- 2-d latent projection ------------------------------------------------------------

def _power_iteration(cov: np.ndarray, rng: np.random.Generator,
                     tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm <= tol:                       # direction annihilated: zero eigenvalue
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    eigenvalue = float(v @ cov @ v)
    return v, eigenvalue


def project_latents(latents: np.ndarray, labels: np.ndarray,
                    tol: float = 1e-10, max_iter: int = 1000,
                    seed: int = 0) -> list[tuple[float, float, int]]:
    """Center, find top-2 principal directions by power iteration, project.

    Deterministic: seeded start vectors and a sign convention (largest-
    magnitude component positive) make repeated calls bitwise identical.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] < 3:
        raise ValueError(f"projection needs >= 3 samples, got {latents.shape[0]}")
    centered = latents - latents.mean(axis=0)
    cov = centered.T @ centered / (latents.shape[0] - 1)
    rng = np.random.default_rng(seed)
    v1, lam1 = _power_iteration(cov, rng, tol, max_iter)
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_iteration(deflated, rng, tol, max_iter)
    if lam2 <= max(abs(lam1) * 1e-12, 1e-12):
        raise ValueError("latents are rank-deficient: fewer than 2 nonzero directions")
    for v in (v1, v2):
        if v[np.argmax(np.abs(v))] < 0:
            v *= -1.0
    coords = centered @ np.stack([v1, v2], axis=1)
    return [(float(x), float(y), int(l)) for (x, y), l in zip(coords, labels)]


# -- reports and aggregation -----------------------------------------------------------

@dataclass
class EvalReport:
    probe_accuracy: float
    bleu: float | None
    transfer_accuracy: float
    mean_cosine_distance: float
    mean_kl: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def aggregate_runs(reports: list[EvalReport]) -> tuple[EvalReport, EvalReport]:
    """Per-metric mean and sample standard deviation (n-1; zero for one run)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    means = {}
    stds = {}
    for f in fields(EvalReport):
        values = [getattr(r, f.name) for r in reports]
        if any(v is None for v in values):
            means[f.name] = None
            stds[f.name] = None
            continue
        arr = np.array(values, dtype=np.float64)
        means[f.name] = float(arr.mean())
        stds[f.name] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return EvalReport(**means), EvalReport(**stds)


def evaluate_model(params: ModelParams, sentences: list[LabeledSentence],
                   vocab: Vocabulary, max_len: int, probe_seed: int = 0
                   ) -> tuple[EvalReport, dict]:
    """Full measurement suite for one trained model on one labeled set.

    Returns the report plus raw artifacts (latents, transfers) for dumping.
    BLEU is None when the sentences carry no references.
    """
    mu, logvar, labels = _encode_mu_logvar(params, sentences, vocab, max_len)
    if np.ptp(mu, axis=0).max() < 1e-6:
        warnings.warn("encoder collapse: all posterior means within 1e-6 of each other")
    _, probe_acc = train_probe(list(zip(mu, labels)), probe_seed)
    transfers = transfer_greedy(params, sentences, vocab, max_len)
    refs = [s.reference for s in sentences]
    bleu = None
    if all(r is not None for r in refs):
        bleu = bleu_corpus(transfers, refs)
    hits = sum(1 for s, out in zip(sentences, transfers)
               if style_oracle(out) == 1 - s.style_label)
    t_acc = hits / len(sentences)
    mean_cos, mean_kl = latent_preservation(params, sentences, vocab, max_len)
    report = EvalReport(probe_accuracy=probe_acc, bleu=bleu, transfer_accuracy=t_acc,
                        mean_cosine_distance=mean_cos, mean_kl=mean_kl)
    artifacts = {"mu": mu, "logvar": logvar, "labels": labels, "transfers": transfers}
    return report, artifacts


def dump_latents(path, mu: np.ndarray, logvar: np.ndarray, labels: np.ndarray) -> None:
    """One line per example: label, d_z mu values, d_z logvar values (17 sig. digits)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(mu.shape[0]):
            parts = [str(int(labels[i]))]
            parts += [f"{v:.17g}" for v in mu[i]]
            parts += [f"{v:.17g}" for v in logvar[i]]
            fh.write(" ".join(parts) + "\n")


def dump_projection(path, projected: list[tuple[float, float, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,label\n")
        for x, y, label in projected:
            fh.write(f"{x:.17g},{y:.17g},{label}\n")
