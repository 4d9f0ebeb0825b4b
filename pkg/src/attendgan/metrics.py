"""Caption-quality and style-diversity metrics.

Quality metrics take aligned ``candidates`` (one token list per image) and
``references`` (a list of token lists per image) and return values on the
x100 reporting scale. Tokens may be any hashable items (words or ids).
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np


def ngrams(tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _check_aligned(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise ValueError(f"image {i} has no references")


# ---------------------------------------------------------------- BLEU


def bleu(candidates, references, max_n: int = 4) -> list:
    """Corpus BLEU-1..``max_n`` (x100), uniform weights, brevity penalty
    against the closest reference length (ties to the shorter)."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    _check_aligned(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            best = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    out = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            out.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        out.append(100.0 * bp * math.exp(log_sum / (n + 1)))
    return out


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand, ref, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over images of the best per-reference LCS F-measure (x100)."""
    _check_aligned(candidates, references)
    if not candidates:
        return 0.0
    scores = [max(rouge_l_sentence(c, r, beta) for r in refs) for c, refs in zip(candidates, references)]
    return 100.0 * float(np.mean(scores))


# ---------------------------------------------------------------- CIDEr-D


def cider_d(candidates, references, n: int = 4, sigma: float = 6.0) -> float:
    """Corpus CIDEr-D, reported as the conventional score (which already
    carries a x10 factor) times 10. Document frequencies come from the
    reference sets; orders with no n-grams in a caption contribute 0."""
    _check_aligned(candidates, references)
    if len(candidates) < 2:
        raise ValueError("CIDEr needs at least two images to estimate document frequencies")
    df = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_docs = math.log(len(references))

    def vectorize(tokens):
        vec = [dict() for _ in range(n)]
        norm = [0.0] * n
        for k in range(1, n + 1):
            for g, tf in ngrams(tokens, k).items():
                w = tf * (log_docs - math.log(max(1.0, df[g])))
                vec[k - 1][g] = w
                norm[k - 1] += w * w
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    def sim(hyp, ref):
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * sigma ** 2))
        out = []
        for k in range(n):
            val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            out.append(val * penalty)
        return np.array(out)

    per_image = []
    for cand, refs in zip(candidates, references):
        hyp = vectorize(cand)
        total = sum(sim(hyp, vectorize(r)) for r in refs)
        per_image.append(float(np.mean(total)) / len(refs) * 10.0)
    return 10.0 * float(np.mean(per_image))


cider = cider_d


def metric_by_name(name: str):
    """``fn(candidates, references) -> float`` for model selection."""
    table = {
        "cider": cider_d,
        "rouge_l": rouge_l,
        **{f"bleu{k}": (lambda c, r, k=k: bleu(c, r, k)[-1]) for k in range(1, 5)},
    }
    try:
        return table[name.lower()]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(table)}") from None


# ---------------------------------------------------------------- style usage


@dataclass
class StyleUsage:
    counts: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def unique(self) -> int:
        return len(self.counts)

    def probabilities(self) -> dict:
        tot = self.total
        return {a: c / tot for a, c in self.counts.items()} if tot else {}

    def ranked(self) -> list:
        """Adjectives by count descending, ties lexicographic."""
        return sorted(self.counts, key=lambda a: (-self.counts[a], a))


def extract_style_adjectives(captions, lexicon) -> StyleUsage:
    """Count every token that is a lexicon adjective of either polarity."""
    vocab = lexicon.adjectives() if hasattr(lexicon, "adjectives") else set(lexicon)
    return StyleUsage(Counter(t for cap in captions for t in cap if t in vocab))


def style_entropy(usage: StyleUsage) -> float:
    """Shannon entropy in bits; 0 for an empty distribution."""
    ent = 0.0
    for p in usage.probabilities().values():
        ent -= p * math.log2(p)
    return ent + 0.0


def top_k_mass(usage: StyleUsage, k: int = 4) -> float:
    """Percent of adjective mass on the ``k`` most frequent adjectives."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if usage.unique <= k:
        return 100.0
    probs = usage.probabilities()
    return 100.0 * sum(probs[a] for a in usage.ranked()[:k])


# ---------------------------------------------------------------- report


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider_d: float
    entropy: float
    top4: float
    top_adjectives: list
    images: int
    references: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        head = f"{'B-1':>7} {'B-2':>7} {'B-3':>7} {'B-4':>7} {'ROUGE-L':>8} {'CIDEr-D':>8} {'Entropy':>8} {'Top4%':>7}"
        row = (f"{self.bleu1:7.2f} {self.bleu2:7.2f} {self.bleu3:7.2f} {self.bleu4:7.2f} "
               f"{self.rouge_l:8.2f} {self.cider_d:8.2f} {self.entropy:8.4f} {self.top4:7.2f}")
        adjs = ", ".join(self.top_adjectives) if self.top_adjectives else "-"
        return f"{head}\n{row}\ntop adjectives: {adjs}\nimages: {self.images}  references: {self.references}"


def evaluate_corpus(candidates: dict, references: dict, lexicon, config: dict | None = None) -> MetricReport:
    """All metrics over images keyed by id. Both dicts must hold the same ids."""
    if set(candidates) != set(references):
        missing = sorted(set(references) ^ set(candidates))[:5]
        raise ValueError(f"candidate and reference image ids differ (e.g. {missing})")
    ids = sorted(candidates)
    cands = [list(candidates[i]) for i in ids]
    refs = [[list(r) for r in references[i]] for i in ids]
    b = bleu(cands, refs, 4)
    usage = extract_style_adjectives(cands, lexicon)
    return MetricReport(
        bleu1=b[0], bleu2=b[1], bleu3=b[2], bleu4=b[3],
        rouge_l=rouge_l(cands, refs),
        cider_d=cider_d(cands, refs) if len(ids) >= 2 else 0.0,
        entropy=style_entropy(usage),
        top4=top_k_mass(usage, 4),
        top_adjectives=usage.ranked()[:10],
        images=len(ids),
        references=sum(len(r) for r in refs),
        config=dict(config or {}),
    )
