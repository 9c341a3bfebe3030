"""Naive scalar-loop reference implementations.

Everything here works on plain nested Python lists of floats and uses
explicit loops only.  Nothing is imported from the rest of the package so
these functions stay an independent ground truth for the vectorized code.

Matrix convention: a matrix is a list of rows; ``W`` of shape [out x in]
maps a vector ``x`` of length ``in`` to ``sum_k W[r][k] * x[k]``.
"""

import math

PCC_EPS = 1e-12


def _matvec(W, x):
    out = []
    for r in range(len(W)):
        acc = 0.0
        for k in range(len(x)):
            acc += W[r][k] * x[k]
        out.append(acc)
    return out


def _dot(a, b):
    acc = 0.0
    for k in range(len(a)):
        acc += a[k] * b[k]
    return acc


def oracle_mean_std(x):
    n = len(x)
    mean = 0.0
    for value in x:
        mean += value
    mean /= n
    var = 0.0
    for value in x:
        var += (value - mean) * (value - mean)
    return mean, math.sqrt(var / n)


def oracle_pcc(u, w):
    """Pearson correlation with population moments; 0 for a constant input."""
    n = len(u)
    mu, su = oracle_mean_std(u)
    mw, sw = oracle_mean_std(w)
    cov = 0.0
    for k in range(n):
        cov += (u[k] - mu) * (w[k] - mw)
    cov /= n
    denom = su * sw
    if denom <= PCC_EPS:
        return 0.0
    return cov / denom


def _softmax(xs):
    top = max(xs)
    exps = [math.exp(x - top) for x in xs]
    total = sum(exps)
    return [e / total for e in exps]


def oracle_route(context, I, params, n_itr, trace=None):
    """Context-guided dynamic routing, one loop per pseudocode line.

    ``params`` holds ``W_u`` (list over high-level capsules of [d_c x d_c]),
    ``W_m`` [d_c x d_w], ``W_v`` [d_w x d_c], ``W_f`` [d_w x N_v*d_w] and
    ``b_f`` [d_w].  When ``trace`` is a list, per-iteration copies of
    ``b``, ``c`` and ``rho`` are appended to it.
    """
    W_u, W_m, W_v = params["W_u"], params["W_m"], params["W_v"]
    n_u = len(I)
    n_v = len(W_u)

    u = [list(row) for row in I]
    m = [list(context) for _ in range(n_v)]

    b = [[0.0] * n_v for _ in range(n_u)]
    u_hat = [[None] * n_v for _ in range(n_u)]
    rho = [[0.0] * n_v for _ in range(n_u)]
    guide = [_matvec(W_m, m[j]) for j in range(n_v)]
    for i in range(n_u):
        for j in range(n_v):
            b[i][j] = 0.0
            u_hat[i][j] = _matvec(W_u[j], u[i])
            rho[i][j] = math.tanh(oracle_pcc(u[i], guide[j]))

    v = [None] * n_v
    for _ in range(n_itr):
        c = [[0.0] * n_v for _ in range(n_u)]
        for i in range(n_u):
            row = _softmax(b[i])
            for j in range(n_v):
                c[i][j] = row[j]

        for j in range(n_v):
            d_c = len(W_u[j])
            acc = [0.0] * d_c
            for i in range(n_u):
                weight = c[i][j] + rho[i][j]
                for k in range(d_c):
                    acc[k] += weight * u_hat[i][j][k]
            v[j] = acc
            proj = _matvec(W_v, v[j])
            m[j] = [m[j][k] * proj[k] for k in range(len(proj))]

        guide = [_matvec(W_m, m[j]) for j in range(n_v)]
        for i in range(n_u):
            for j in range(n_v):
                rho[i][j] = math.tanh(oracle_pcc(u[i], guide[j]))
                b[i][j] = b[i][j] + rho[i][j] * _dot(u_hat[i][j], v[j])

        if trace is not None:
            trace.append({
                "b": [row[:] for row in b],
                "c": [row[:] for row in c],
                "rho": [row[:] for row in rho],
            })

    flat = []
    for j in range(n_v):
        flat.extend(m[j])
    out = _matvec(params["W_f"], flat)
    return [out[k] + params["b_f"][k] for k in range(len(out))]


def oracle_squash(s):
    sq = _dot(s, s)
    if sq == 0.0:
        return [0.0] * len(s)
    norm = math.sqrt(sq)
    scale = sq / (1.0 + sq) / norm
    return [x * scale for x in s]


def oracle_route_conventional(I, params, n_itr):
    """Routing-by-agreement with squashing; the context never enters."""
    W_u, W_v = params["W_u"], params["W_v"]
    n_u = len(I)
    n_v = len(W_u)
    b = [[0.0] * n_v for _ in range(n_u)]
    u_hat = [[_matvec(W_u[j], I[i]) for j in range(n_v)] for i in range(n_u)]
    v = [None] * n_v
    for _ in range(n_itr):
        c = [_softmax(b[i]) for i in range(n_u)]
        for j in range(n_v):
            d_c = len(W_u[j])
            s = [0.0] * d_c
            for i in range(n_u):
                for k in range(d_c):
                    s[k] += c[i][j] * u_hat[i][j][k]
            v[j] = oracle_squash(s)
        for i in range(n_u):
            for j in range(n_v):
                b[i][j] += _dot(u_hat[i][j], v[j])
    flat = []
    for j in range(n_v):
        flat.extend(_matvec(W_v, v[j]))
    out = _matvec(params["W_f"], flat)
    return [out[k] + params["b_f"][k] for k in range(len(out))]


def oracle_attention(Q, K, V, WQ, WK, WV, WC, n_heads, mask=None):
    """Multi-head scaled dot-product attention over row vectors.

    Q is [Tq x d], K and V are [Tk x d]; the projection matrices are
    [d x d] applied on the right (``x @ W``).  Each head uses a contiguous
    block of d/n_heads columns and scores are divided by sqrt(d).
    ``mask[q][k]`` true blocks that key for that query.
    """
    d = len(WQ)
    dh = d // n_heads

    def right(x, W):
        return [sum(x[a] * W[a][col] for a in range(len(x))) for col in range(len(W[0]))]

    q = [right(row, WQ) for row in Q]
    k = [right(row, WK) for row in K]
    v = [right(row, WV) for row in V]
    concat = [[0.0] * d for _ in Q]
    for h in range(n_heads):
        lo = h * dh
        for t in range(len(Q)):
            scores = []
            for s in range(len(K)):
                if mask is not None and mask[t][s]:
                    scores.append(-math.inf)
                    continue
                acc = 0.0
                for a in range(lo, lo + dh):
                    acc += q[t][a] * k[s][a]
                scores.append(acc / math.sqrt(d))
            weights = _softmax(scores)
            for a in range(lo, lo + dh):
                acc = 0.0
                for s in range(len(K)):
                    acc += weights[s] * v[s][a]
                concat[t][a] = acc
    return [right(row, WC) for row in concat]


def oracle_ffn(X, W1, b1, W2, b2):
    """Position-wise linear -> relu -> linear; weights are [in x out]."""
    out = []
    for row in X:
        hidden = []
        for col in range(len(W1[0])):
            acc = b1[col]
            for a in range(len(row)):
                acc += row[a] * W1[a][col]
            hidden.append(acc if acc > 0.0 else 0.0)
        result = []
        for col in range(len(W2[0])):
            acc = b2[col]
            for a in range(len(hidden)):
                acc += hidden[a] * W2[a][col]
            result.append(acc)
        out.append(result)
    return out


def oracle_layer_norm(x, gain, bias, eps=1e-6):
    mean, std = oracle_mean_std(x)
    denom = math.sqrt(std * std + eps)
    return [(x[k] - mean) / denom * gain[k] + bias[k] for k in range(len(x))]


def oracle_gate(m_g, m_r, W_g, W_r):
    pre_g = _matvec(W_g, m_g)
    pre_r = _matvec(W_r, m_r)
    out = []
    for k in range(len(m_g)):
        alpha = 1.0 / (1.0 + math.exp(-(pre_g[k] + pre_r[k])))
        out.append(alpha * m_g[k] + (1.0 - alpha) * m_r[k])
    return out


def _ngram_counts(tokens, n):
    counts = {}
    for start in range(len(tokens) - n + 1):
        key = tuple(tokens[start:start + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def oracle_bleu(hypotheses, references):
    """Corpus 4-gram BLEU, brevity penalty, no smoothing, scaled to 100."""
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h = _ngram_counts(hyp, n)
            r = _ngram_counts(ref, n)
            for gram, count in h.items():
                matches[n - 1] += min(count, r.get(gram, 0))
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_sum = 0.0
    for n in range(4):
        if matches[n] == 0 or totals[n] == 0:
            return 0.0
        log_sum += math.log(matches[n] / totals[n])
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / 4.0)
