"""Reference scorer for golden_corpus.jsonl; writes golden_report.json.

Written directly from the metric definitions, without sharing code with the
Rust implementation.
"""
import json
import math
import sys
from collections import Counter
from fractions import Fraction
from pathlib import Path

HERE = Path(__file__).parent
STRIP = set(".,;:!?")


def tok(s):
    return "".join(c for c in s.lower() if c not in STRIP).split()


def ngrams(ws, n):
    return Counter(tuple(ws[i:i + n]) for i in range(len(ws) - n + 1))


def bleu(corpus):
    match = [0] * 4
    total = [0] * 4
    c = r = 0
    for hyp, refs in corpus:
        c += len(hyp)
        # closest reference length, shorter wins ties
        r += min((abs(len(x) - len(hyp)), len(x)) for x in refs)[1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            best = Counter()
            for ref in refs:
                best |= ngrams(ref, n)
            match[n - 1] += sum(min(k, best[g]) for g, k in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    out = []
    for n in range(1, 5):
        ps = [Fraction(match[k], total[k]) if total[k] else Fraction(0) for k in range(n)]
        if any(p == 0 for p in ps):
            out.append(0.0)
        else:
            out.append(100 * bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge_l(corpus, beta=1.2):
    scores = []
    for hyp, refs in corpus:
        if not hyp:
            scores.append(0.0)
            continue
        ps = [lcs(hyp, r) / len(hyp) for r in refs]
        rs = [lcs(hyp, r) / len(r) for r in refs]
        p, rec = max(ps), max(rs)
        scores.append(0.0 if p == 0 or rec == 0 else (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return 100 * sum(scores) / len(scores)


def meteor_one(hyp, ref, alpha=0.9, beta=3.0, gamma=0.5):
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(hyp):
        for j, x in enumerate(ref):
            if not used[j] and x == w:
                used[j] = True
                pairs.append((i, j))
                break
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, r = m / len(hyp), m / len(ref)
    f = p * r / (alpha * p + (1 - alpha) * r)
    return f * (1 - gamma * (chunks / m) ** beta)


def meteor(corpus):
    return 100 * sum(max(meteor_one(h, r) for r in refs) for h, refs in corpus) / len(corpus)


def cider_d(corpus, sigma=6.0):
    def counts(ws):
        c = Counter()
        for n in range(1, 5):
            c.update(ngrams(ws, n))
        return c

    df = Counter()
    for _, refs in corpus:
        df.update(set(g for r in refs for g in counts(r)))
    log_docs = math.log(len(corpus))

    def vec(ws):
        v = [dict() for _ in range(4)]
        for g, k in counts(ws).items():
            v[len(g) - 1][g] = k * (log_docs - math.log(max(1.0, df[g])))
        norms = [math.sqrt(sum(x * x for x in o.values())) for o in v]
        return v, norms, max(len(ws) - 1, 0)

    total = 0.0
    for hyp, refs in corpus:
        vh, nh, lh = vec(hyp)
        acc = 0.0
        for ref in refs:
            vr, nr, lr = vec(ref)
            pen = math.exp(-((lh - lr) ** 2) / (2 * sigma ** 2))
            per = []
            for n in range(4):
                dot = sum(min(x, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, x in vh[n].items())
                if nh[n] and nr[n]:
                    dot /= nh[n] * nr[n]
                per.append(dot * pen)
            acc += sum(per) / 4
        total += 10 * acc / len(refs)
    return 100 * total / len(corpus)


def main():
    rows = [json.loads(l) for l in (HERE / "golden_corpus.jsonl").read_text().splitlines() if l.strip()]
    corpus = [(tok(r["hyp"]), [tok(x) for x in r["refs"]]) for r in rows]
    b = bleu(corpus)
    report = {
        "bleu": b,
        "meteor": meteor(corpus),
        "rouge_l": rouge_l(corpus),
        "cider_d": cider_d(corpus),
    }
    report["s_star_m"] = (b[3] + report["meteor"] + report["rouge_l"] + report["cider_d"]) / 4
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if "--check" in sys.argv:
        print(text)
    else:
        (HERE / "golden_report.json").write_text(text)


if __name__ == "__main__":
    main()
