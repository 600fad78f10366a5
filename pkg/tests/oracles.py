"""Scalar-loop reference implementations.

Everything here is written with explicit Python loops and math-module
scalars, independent of the vectorized code paths it checks.
"""

import math


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def posterior_oracle(points, grid_shape, stride, sigma, margin, background):
    """Materialize every likelihood and normalize per cell.

    Returns rows = [background, point 1..L] as nested lists; the background
    row is all zeros when disabled.
    """
    rows, cols = grid_shape
    num = len(points)
    k_total = rows * cols
    out = [[0.0] * k_total for _ in range(num + 1)]
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            cx = (c + 0.5) * stride
            cy = (r + 0.5) * stride
            liks = []
            dists = []
            for (px, py) in points:
                d2 = (cx - px) ** 2 + (cy - py) ** 2
                dists.append(math.sqrt(d2))
                liks.append(math.exp(-d2 / (2.0 * sigma * sigma)))
            if background:
                m = min(dists)
                bg = math.exp(-((margin - m) ** 2) / (2.0 * sigma * sigma))
                total = bg + sum(liks)
                out[0][k] = bg / total
                for i, lik in enumerate(liks):
                    out[i + 1][k] = lik / total
            else:
                total = sum(liks)
                for i, lik in enumerate(liks):
                    out[i + 1][k] = lik / total
    return out


def bayesian_loss_oracle(density_rows, posterior_rows):
    """Direct evaluation: |sum P0 D| + sum_i |1 - sum Pi D| with scalar loops."""
    flat = [v for row in density_rows for v in row]
    bg = sum(p * d for p, d in zip(posterior_rows[0], flat))
    loss = abs(bg)
    for point_row in posterior_rows[1:]:
        expected = sum(p * d for p, d in zip(point_row, flat))
        loss += abs(1.0 - expected)
    return loss


def infonce_oracle(v, v_pos, negatives, temperature):
    """Plain exp/normalize InfoNCE over cosine similarities of flat vectors."""
    s_pos = cosine(v, v_pos)
    numer = math.exp(s_pos / temperature)
    denom = numer
    for neg in negatives:
        denom += math.exp(cosine(v, neg) / temperature)
    return -math.log(numer / denom)


def compact_oracle(prototypes_flat):
    """Double loop over ordered pairs i != j of |cosine|."""
    s = len(prototypes_flat)
    total = 0.0
    for i in range(s):
        for j in range(s):
            if i != j:
                total += abs(cosine(prototypes_flat[i], prototypes_flat[j]))
    return total


def weighted_sum_oracle(prototypes, weights):
    """tokens[n][c] = sum_s weights[s] * prototypes[s][n][c], element by element."""
    s_count = len(prototypes)
    n_count = len(prototypes[0])
    c_count = len(prototypes[0][0])
    out = [[0.0] * c_count for _ in range(n_count)]
    for n in range(n_count):
        for c in range(c_count):
            acc = 0.0
            for s in range(s_count):
                acc += weights[s] * prototypes[s][n][c]
            out[n][c] = acc
    return out


def attention_oracle(query, key, value, wq, bq, wk, bk, wv, bv, wo, bo, num_heads):
    """Hand-rolled multi-head attention with explicit loops.

    Weight matrices follow the Linear convention y = x W^T + b, given as
    nested lists of shape (out, in).
    """

    def linear(rows_in, weight, bias):
        out_dim = len(weight)
        result = []
        for row in rows_in:
            out_row = []
            for o in range(out_dim):
                acc = bias[o]
                for i, x in enumerate(row):
                    acc += weight[o][i] * x
                out_row.append(acc)
            result.append(out_row)
        return result

    channels = len(wq)
    head_dim = channels // num_heads
    q = linear(query, wq, bq)
    k = linear(key, wk, bk)
    v = linear(value, wv, bv)
    tq, tk = len(q), len(k)

    concat = [[0.0] * channels for _ in range(tq)]
    for h in range(num_heads):
        lo = h * head_dim
        for iq in range(tq):
            scores = []
            for ik in range(tk):
                acc = 0.0
                for d in range(head_dim):
                    acc += q[iq][lo + d] * k[ik][lo + d]
                scores.append(acc / math.sqrt(head_dim))
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            norm = sum(exps)
            probs = [e / norm for e in exps]
            for d in range(head_dim):
                acc = 0.0
                for ik in range(tk):
                    acc += probs[ik] * v[ik][lo + d]
                concat[iq][lo + d] = acc
    return linear(concat, wo, bo)


def linear_oracle(rows, weight, bias):
    out_dim = len(weight)
    result = []
    for row in rows:
        out_row = []
        for o in range(out_dim):
            acc = bias[o]
            for i, x in enumerate(row):
                acc += weight[o][i] * x
            out_row.append(acc)
        result.append(out_row)
    return result


def layer_norm_oracle(rows, weight, bias, eps=1e-5):
    out = []
    for row in rows:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        scale = math.sqrt(var + eps)
        out.append([(x - mu) / scale * w + b
                    for x, w, b in zip(row, weight, bias)])
    return out


def ffn_oracle(rows, w1, b1, w2, b2):
    hidden = [[max(0.0, x) for x in row] for row in linear_oracle(rows, w1, b1)]
    return linear_oracle(hidden, w2, b2)


def add_rows(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def decoder_layer_oracle(tokens, feats, pos, params, num_heads):
    """Replicate one two-stage decoder layer with scalar loops.

    `params` maps sublayer names to (weights...) tuples pulled from the
    trained layer; see the caller for the exact packing.
    """
    t_norm = layer_norm_oracle(tokens, *params["token_norm_attn"])
    a1 = attention_oracle(t_norm, add_rows(feats, pos), feats,
                          *params["token_attn"], num_heads=num_heads)
    t1 = add_rows(tokens, a1)
    t2 = add_rows(t1, ffn_oracle(layer_norm_oracle(t1, *params["token_norm_ffn"]),
                                 *params["token_ffn"]))
    f_query = add_rows(layer_norm_oracle(feats, *params["feat_norm_attn"]), pos)
    a2 = attention_oracle(f_query, t2, t2, *params["feat_attn"], num_heads=num_heads)
    f1 = add_rows(feats, a2)
    f2 = add_rows(f1, ffn_oracle(layer_norm_oracle(f1, *params["feat_norm_ffn"]),
                                 *params["feat_ffn"]))
    return t2, f2


def ranking_oracle(vectors, query_index, k):
    """Full scan of cosine distances, ascending, ties by gallery order."""
    scored = []
    for i, vec in enumerate(vectors):
        if i == query_index:
            continue
        scored.append((1.0 - cosine(vectors[query_index], vec), i))
    scored.sort(key=lambda t: (t[0], t[1]))
    return scored[:k]


def point_filter_oracle(points, origin, crop_size):
    """Per-point membership test for the crop window."""
    ox, oy = origin
    kept = []
    for (x, y) in points:
        lx, ly = x - ox, y - oy
        if 0 <= lx < crop_size and 0 <= ly < crop_size:
            kept.append((lx, ly))
    return kept


def mae_mse_oracle(gts, preds):
    q = len(gts)
    abs_sum = 0.0
    sq_sum = 0.0
    for g, p in zip(gts, preds):
        abs_sum += abs(g - p)
        sq_sum += (g - p) ** 2
    return abs_sum / q, math.sqrt(sq_sum / q)
