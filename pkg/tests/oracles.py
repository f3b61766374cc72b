"""Independent scalar-loop oracles.

Everything here is written with explicit Python loops over plain floats --
no tensor ops, no numpy vectorization on the math path -- so the oracles
share no code with the implementations they check.
"""

import math


def cosine_oracle(a, b, eps=1e-12):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return dot / ((math.sqrt(na) + eps) * (math.sqrt(nb) + eps))


def prm_oracle(clean_layers, adv_layers):
    """clean_layers/adv_layers: lists of token matrices (lists of lists)."""
    total = 0.0
    for lc, la in zip(clean_layers, adv_layers):
        for p in range(len(lc)):
            total += cosine_oracle(lc[p], la[p])
    return total


def global_prm_oracle(clean_layers, adv_layers):
    total = 0.0
    for lc, la in zip(clean_layers, adv_layers):
        flat_c = []
        flat_a = []
        for row_c, row_a in zip(lc, la):
            for v in row_c:
                flat_c.append(v)
            for v in row_a:
                flat_a.append(v)
        total += cosine_oracle(flat_c, flat_a)
    return total


def nrd_oracle(clean_layers, adv_layers):
    total = 0.0
    for lc, la in zip(clean_layers, adv_layers):
        sq = 0.0
        for row_c, row_a in zip(lc, la):
            for x, y in zip(row_c, row_a):
                sq += (x - y) * (x - y)
        total += math.sqrt(sq)
    return -total


def dr_oracle(adv_layers):
    total = 0.0
    for la in adv_layers:
        vals = []
        for row in la:
            for v in row:
                vals.append(v)
        mean = sum(vals) / len(vals)
        var = 0.0
        for v in vals:
            var += (v - mean) * (v - mean)
        total += math.sqrt(var / len(vals))
    return total


def cross_entropy_oracle(logits_row, label):
    m = logits_row[0]
    for v in logits_row:
        if v > m:
            m = v
    s = 0.0
    for v in logits_row:
        s += math.exp(v - m)
    return (math.log(s) + m) - logits_row[label]


def mean_cross_entropy_oracle(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        total += cross_entropy_oracle(row, lab)
    return total / len(labels)


def softmax_oracle(row):
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def population_std_oracle(values):
    mean = sum(values) / len(values)
    var = 0.0
    for v in values:
        var += (v - mean) * (v - mean)
    return math.sqrt(var / len(values))


def miou_oracle(pred, true, class_set):
    """pred/true: nested lists of equal shape (any depth flattened here)."""

    def flat(x):
        out = []
        stack = [x]
        while stack:
            v = stack.pop()
            if isinstance(v, (list, tuple)):
                stack.extend(v)
            else:
                out.append(int(v))
        return out

    p = flat(pred)
    t = flat(true)
    ious = []
    for c in class_set:
        inter = 0
        union = 0
        for a, b in zip(p, t):
            pa = a == c
            tb = b == c
            if pa and tb:
                inter += 1
            if pa or tb:
                union += 1
        if union > 0:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def zero_shot_oracle(embedding, table):
    """Argmax over cosine similarity, lowest index on ties."""
    best = None
    best_idx = -1
    for i, row in enumerate(table):
        c = cosine_oracle(embedding, row)
        if best is None or c > best:
            best = c
            best_idx = i
    return best_idx
