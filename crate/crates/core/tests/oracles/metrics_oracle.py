"""Independent reference values for the metric fixtures in acceptance.rs.

METEOR comes from NLTK (exact and original-Porter stem stages, synonym
stage disabled, no lowercasing). BLEU comes from NLTK's corpus_bleu when
every candidate order has n-grams, and from a direct formula otherwise.
ROUGE-L and exact match are evaluated from their closed forms.

Run: python3 metrics_oracle.py
"""
import math
import warnings
from fractions import Fraction

from nltk.stem.porter import PorterStemmer
from nltk.translate.bleu_score import corpus_bleu
from nltk.translate.meteor_score import single_meteor_score


class NoSynonyms:
    def synsets(self, *_args, **_kwargs):
        return []


warnings.simplefilter("ignore")
STEMMER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)

FIXTURES = [
    [("a b c d", "a b c d e")],
    [("the cat sat on the mat today", "the cat sat on a mat today")],
    [("mov eax , 0xAB \\n int 0x80", "mov eax , 0xab \\n int 0x80")],
    [("push ebx", "push ebx")],
    [("a b c d e f", "a b c d e f g"), ("x y z w", "x y w z")],
    [("jump short to the label now", "jump to the label now")],
    [("xor ecx , ecx \\n mul ecx", "xor ecx , ecx")],
    [("the the the the", "the cat the mat")],
    [("moving the value into eax", "move the value into eax")],
    [("a b", "b a")],
    [("push eax", "push eax"), ("pop ebx from the stack", "pop ecx from the stack"), ("int 0x80", "int 0x80 ;")],
    [("decrement ecx by one and jump to loop", "decrement the ecx register and jump to loop")],
    [("store the byte in al", "load the word from esi")],
    [("jumps to the loop start", "jump to the loop start")],
]


def ngrams(toks, n):
    return [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]


def bleu_formula(pairs):
    num = [0] * 4
    den = [0] * 4
    c_len = r_len = 0
    for c, r in pairs:
        for n in range(1, 5):
            cg, rg = ngrams(c, n), ngrams(r, n)
            num[n - 1] += sum(min(cg.count(g), rg.count(g)) for g in set(cg))
            den[n - 1] += len(cg)
        c_len += len(c)
        r_len += len(r)
    logs = []
    for m, t in zip(num, den):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    if not logs or c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * math.exp(sum(logs) / len(logs))


def bleu(pairs):
    value = bleu_formula(pairs)
    if all(len(c) >= 4 for c, _ in pairs):
        nl = 100 * corpus_bleu([[r] for _, r in pairs], [c for c, _ in pairs])
        if value > 0:
            assert abs(nl - value) < 1e-9, (pairs, nl, value)
    return value


def rouge_l(pairs, beta=1.2):
    total = 0.0
    for c, r in pairs:
        prev = [0] * (len(r) + 1)
        for x in c:
            cur = [0] * (len(r) + 1)
            for j, y in enumerate(r):
                cur[j + 1] = prev[j] + 1 if x == y else max(cur[j], prev[j + 1])
            prev = cur
        lcs = prev[-1]
        if lcs:
            p, rec = lcs / len(c), lcs / len(r)
            total += (1 + beta**2) * p * rec / (rec + beta**2 * p)
    return 100 * total / len(pairs)


def meteor(pairs):
    total = 0.0
    for c, r in pairs:
        total += single_meteor_score(r, c, preprocess=lambda s: s, stemmer=STEMMER, wordnet=NoSynonyms())
    return 100 * total / len(pairs)


def norm(t):
    body = t[1:] if t.startswith("-") else t
    if body[:2].lower() == "0x" and len(body) > 2 and all(ch in "0123456789abcdefABCDEF" for ch in body[2:]):
        return t.lower()
    return t


def acc(pairs):
    hits = sum(1 for c, r in pairs if [norm(x) for x in c] == [norm(x) for x in r])
    return 100 * Fraction(hits, len(pairs))


for fx in FIXTURES:
    pairs = [(c.split(), r.split()) for c, r in fx]
    print(f"{bleu(pairs):.10f} {rouge_l(pairs):.10f} {meteor(pairs):.10f} {float(acc(pairs)):.10f}  # {fx}")
