"""Brute-force reference implementations used to check the fast paths.

Everything here is written with explicit Python loops, exact rational
arithmetic or textbook formulas and shares no code with the modules it
checks.
"""
import math
from fractions import Fraction


def matmul(a, b):
    rows, inner, cols = len(a), len(b), len(b[0]) if len(b) else 0
    return [[sum(a[i][t] * b[t][j] for t in range(inner)) for j in range(cols)] for i in range(rows)]


def softmax_row(row):
    top = max(row)
    ex = [math.exp(x - top) for x in row]
    total = sum(ex)
    return [e / total for e in ex]


def attention_head(q, k, v):
    """Dense softmax(q k^T / sqrt(dk)) v with triple loops; returns (out, probs)."""
    dk = len(q[0])
    probs = []
    for qi in q:
        logits = [sum(qi[t] * kj[t] for t in range(dk)) / math.sqrt(dk) for kj in k]
        probs.append(softmax_row(logits))
    out = [[sum(p[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))] for p in probs]
    return out, probs


def joint_block_attention(prompt, video, wq, wk, wv, wo, k_ref=None, v_ref=None, lam=1.0):
    """Residual multi-head joint attention, optionally with appended scaled reference keys.

    Inputs are nested lists / arrays; ``wq[h]`` is (d, dk). Returns
    (outputs, head-averaged map, per-head maps).
    """
    x = [list(map(float, r)) for r in prompt] + [list(map(float, r)) for r in video]
    heads = len(wq)
    per_head, merged = [], [[] for _ in x]
    for h in range(heads):
        q = matmul(x, [list(r) for r in wq[h]])
        k = matmul(x, [list(r) for r in wk[h]])
        v = matmul(x, [list(r) for r in wv[h]])
        if k_ref is not None and len(k_ref[h]):
            k = k + [[lam * float(c) for c in row] for row in k_ref[h]]
            v = v + [[float(c) for c in row] for row in v_ref[h]]
        out, probs = attention_head(q, k, v)
        per_head.append(probs)
        for i, row in enumerate(out):
            merged[i].extend(row)
    proj = matmul(merged, [list(r) for r in wo])
    y = [[x[i][c] + proj[i][c] for c in range(len(x[0]))] for i in range(len(x))]
    rows, cols = len(per_head[0]), len(per_head[0][0])
    avg = [[sum(per_head[h][i][j] for h in range(heads)) / heads for j in range(cols)] for i in range(rows)]
    return y, avg, per_head


def subject_saliency(maps, m, n, subjects):
    """value(j) = mean over maps of sum_s (A[s, m+j] + A[m+j, s]), summed exactly."""
    out = []
    for j in range(n):
        total = Fraction(0)
        for a in maps:
            for s in subjects:
                total += Fraction(float(a[s][m + j])) + Fraction(float(a[m + j][s]))
        out.append(float(total) / len(maps))
    return out


def select_per_frame(values, frames, frame_size, q):
    """Full-sort selection: per frame the ceil(q*hw) largest, ties to the lower index."""
    k = math.ceil(Fraction(q) * frame_size)
    chosen = []
    for f in range(frames):
        idx = range(f * frame_size, (f + 1) * frame_size)
        ranked = sorted(idx, key=lambda i: (-values[i], i))
        chosen.extend(sorted(ranked[:k]))
    return chosen


def top_fifth_mean(values):
    n = len(values)
    k = -(-n // 5)
    top = sorted(values, reverse=True)[:k]
    return float(sum(Fraction(float(x)) for x in top)) / k


def central_difference(f, x, step=1e-3):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    import numpy as np

    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f(x)
        x[i] = orig - step
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * step)
    return g


def pearson(x, y):
    """Textbook product-moment formula from raw sums."""
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    sxy = sum(a * b for a, b in zip(x, y))
    den = math.sqrt(n * sxx - sx * sx) * math.sqrt(n * syy - sy * sy)
    return (n * sxy - sx * sy) / den


def suppression_loss(q_prompt, k_prompt, video, wq, wk, subjects):
    """Top-fifth mean over subject rows/columns of the head-averaged reference-prompt map."""
    heads = len(wq)
    m = len(q_prompt[0])
    vid = [list(map(float, r)) for r in video]
    n = len(vid)
    maps = []
    for h in range(heads):
        q = [list(map(float, r)) for r in q_prompt[h]] + matmul(vid, [list(r) for r in wq[h]])
        k = [list(map(float, r)) for r in k_prompt[h]] + matmul(vid, [list(r) for r in wk[h]])
        dummy = [[0.0] for _ in k]
        maps.append(attention_head(q, k, dummy)[1])
    avg = [[sum(maps[h][i][j] for h in range(heads)) / heads for j in range(m + n)] for i in range(m + n)]
    pooled = [avg[s][m + j] for s in subjects for j in range(n)] + [avg[m + j][s] for s in subjects for j in range(n)]
    return top_fifth_mean(pooled)
