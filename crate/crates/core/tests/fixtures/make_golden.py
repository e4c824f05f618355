"""Regenerates the golden audit reports from golden_dump.csv.

Independent sample-level implementation; run from this directory.
"""
import csv
import json
import math


def load(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    k_t = sum(1 for k in rows[0] if k.startswith("p_"))
    probs = [[float(r[f"p_{a}"]) for a in range(k_t)] for r in rows]
    t = [int(r["y_t_star"]) for r in rows]
    s = [int(r["y_s_star"]) for r in rows]
    return probs, t, s, k_t, max(s) + 1


def mean(xs):
    return sum(xs) / len(xs)


def report(probs, t, s, k_t, k_s, mode, soft_probs):
    n = len(t)
    if mode == "hard":
        probs = [[1.0 if a == max(range(k_t), key=lambda j: (p[j], -j)) else 0.0 for a in range(k_t)] for p in probs]
    groups = [c for c in range(k_s) if c in s]

    def rows(pred):
        return [i for i in range(n) if pred(i)]

    dp_l2 = 0.0
    for a in range(k_t):
        overall = mean([probs[i][a] for i in range(n)])
        for c in groups:
            dp_l2 += (mean([probs[i][a] for i in rows(lambda i: s[i] == c)]) - overall) ** 2
    dp_mi = 0.0
    for a in range(k_t):
        p_a = sum(probs[i][a] for i in range(n)) / n
        for c in groups:
            idx = rows(lambda i: s[i] == c)
            p_ac = sum(probs[i][a] for i in idx) / n
            if p_ac > 0:
                dp_mi += p_ac * math.log(p_ac / (p_a * len(idx) / n))
    eo_l2 = 0.0
    eo_mi = 0.0
    for b in range(k_t):
        cls = rows(lambda i: t[i] == b)
        if not cls:
            continue
        for c in range(k_s):
            idx = rows(lambda i: t[i] == b and s[i] == c)
            if not idx:
                continue
            for a in range(k_t):
                eo_l2 += (mean([probs[i][a] for i in idx]) - mean([probs[i][a] for i in cls])) ** 2
                p_ac = sum(probs[i][a] for i in idx) / len(cls)
                p_a = mean([probs[i][a] for i in cls])
                if p_ac > 0:
                    eo_mi += p_ac * math.log(p_ac / (p_a * len(idx) / len(cls)))

    def iou(idx):
        vals = []
        for a in range(k_t):
            inter = sum(probs[i][a] * (t[i] == a) for i in idx)
            union = sum(probs[i][a] + (t[i] == a) - probs[i][a] * (t[i] == a) for i in idx)
            if union > 0:
                vals.append(inter / union)
        return mean(vals)

    overall = iou(range(n))
    per_group = [iou(rows(lambda i: s[i] == c)) if c in groups else None for c in range(k_s)]
    present = [g for g in per_group if g is not None]
    l_iou = sum((g - overall) ** 2 for g in present)
    m = mean(present)
    sigma = math.sqrt(sum((g - m) ** 2 for g in present) / (len(present) - 1))

    def argmax(p):
        return max(range(k_t), key=lambda j: (p[j], -j))

    acc = sum(argmax(probs[i]) == t[i] for i in range(n)) / n
    pos = [soft_probs[i][1] for i in range(n) if t[i] == 1]
    neg = [soft_probs[i][1] for i in range(n) if t[i] == 0]
    auc = sum((x > y) + 0.5 * (x == y) for x in pos for y in neg) / (len(pos) * len(neg))
    return {
        "mode": mode, "n_samples": n, "k_t": k_t, "k_s": k_s, "accuracy": acc, "auc": auc,
        "l_iou": l_iou, "l2_eo": eo_l2, "mi_eo": eo_mi, "l2_dp": dp_l2, "mi_dp": dp_mi,
        "iou_overall": overall, "iou_per_group": per_group, "sigma_iou": sigma, "warnings": [],
    }


probs, t, s, k_t, k_s = load("golden_dump.csv")
for mode in ["soft", "hard"]:
    with open(f"golden_report_{mode}.json", "w") as f:
        json.dump(report(probs, t, s, k_t, k_s, mode, probs), f, indent=2)
        f.write("\n")
