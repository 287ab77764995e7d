"""Scalar-loop reference forward pass used as an independent oracle.

Deliberately naive: python loops over samples, positions and heads, numpy
only for small dot products. Reads the same named parameters as the
library but shares none of its code.
"""

import math

import numpy as np


def _p(params, name):
    return params.tensors[name].detach().numpy().astype(float)


def _layer_norm_row(x, w, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + eps) * w[i] + b[i] for i, v in enumerate(x)])


def embed_ref(params, tokens, weights, masked):
    emb, pos, mask = _p(params, "embeddings"), _p(params, "pos"), _p(params, "mask")
    offsets = params.offsets.numpy()
    B, P = len(tokens), len(tokens[0])
    out = np.zeros((B, P, params.config.d))
    for b in range(B):
        for i in range(P):
            if masked[b][i]:
                out[b, i] = mask + pos[i]
            else:
                out[b, i] = weights[b][i] * emb[offsets[i] + tokens[b][i]] + pos[i]
    return out


def encode_ref(params, x):
    cfg = params.config
    d, nh = cfg.d, cfg.n_heads
    dh = d // nh
    x = np.array(x, dtype=float)
    B, P, _ = x.shape
    for l in range(cfg.n_layers):
        g = lambda n: _p(params, f"blocks.{l}.{n}")
        y = x.copy()
        for b in range(B):
            h = [_layer_norm_row(x[b, i], g("ln1.weight"), g("ln1.bias")) for i in range(P)]
            q = [hi @ g("attn.wq") for hi in h]
            k = [hi @ g("attn.wk") for hi in h]
            v = [hi @ g("attn.wv") for hi in h]
            for i in range(P):
                att_out = np.zeros(d)
                for head in range(nh):
                    sl = slice(head * dh, (head + 1) * dh)
                    logits = [float(q[i][sl] @ k[j][sl]) / math.sqrt(dh) for j in range(P)]
                    m = max(logits)
                    e = [math.exp(z - m) for z in logits]
                    s = sum(e)
                    for j in range(P):
                        att_out[sl] += e[j] / s * v[j][sl]
                y[b, i] = x[b, i] + att_out @ g("attn.wo")
        z = y.copy()
        for b in range(B):
            for i in range(P):
                h = _layer_norm_row(y[b, i], g("ln2.weight"), g("ln2.bias"))
                hidden = np.maximum(h @ g("ff.w1") + g("ff.b1"), 0.0)
                z[b, i] = y[b, i] + hidden @ g("ff.w2") + g("ff.b2")
        x = z
    return x


def unit(v):
    return v / math.sqrt(sum(c * c for c in v))


def generate_ref(params, H, b, k):
    return unit(H[b, k] @ _p(params, "w_out"))


def label_scores_ref(params, H):
    N = params.schema.n_features
    emb = _p(params, "embeddings")
    off = params.offsets.numpy()[N]
    tau = float(_p(params, "tau")[0])
    out = []
    for b in range(H.shape[0]):
        g = generate_ref(params, H, b, N)
        out.append(tuple(float(g @ unit(emb[off + v + 1])) / tau for v in (0, 1)))
    return out


def training_loss_ref(params, tokens, labels, masked_sets, loss_weights, alpha):
    """Weighted sampled-softmax loss, one sample and one field at a time."""
    N = params.schema.n_features
    B = len(tokens)
    emb = _p(params, "embeddings")
    offsets = params.offsets.numpy()
    tau = float(_p(params, "tau")[0])
    full = [list(tokens[b]) + [labels[b] + 1] for b in range(B)]
    masked = [[(i in masked_sets[b]) or i == N for i in range(N + 1)] for b in range(B)]
    H = encode_ref(params, embed_ref(params, full, [[1.0] * (N + 1)] * B, masked))
    scores = label_scores_ref(params, H)
    total = 0.0
    for b in range(B):
        field_sum = 0.0
        for k in sorted(masked_sets[b]):
            g = generate_ref(params, H, b, k)
            cands = sorted({tokens[bb][k] for bb in range(B)})
            logits = [float(g @ unit(emb[offsets[k] + c])) / tau for c in cands]
            target = logits[cands.index(tokens[b][k])]
            m = max(logits)
            field_sum += -(target - m - math.log(sum(math.exp(z - m) for z in logits)))
        s0, s1 = scores[b]
        target = s1 if labels[b] == 1 else s0
        m = max(s0, s1)
        label_loss = -(target - m - math.log(math.exp(s0 - m) + math.exp(s1 - m)))
        total += loss_weights[b] * field_sum + alpha * label_loss
    return total / B
