"""Independent float64 forward pass written with plain Python loops.

Shares no code with earlyexit.model; used as an oracle for the numpy path.
"""
import math


def _mat(a):
    return [[float(v) for v in row] for row in a]


def _vec(a):
    return [float(v) for v in a]


def layer_norm(x, w, b, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    s = math.sqrt(var + eps)
    return [(x[i] - mu) / s * w[i] + b[i] for i in range(n)]


def matvec(x, m):
    # x (d_in) times m (d_in x d_out)
    cols = len(m[0])
    return [sum(x[i] * m[i][j] for i in range(len(x))) for j in range(cols)]


def gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def block(xs, p, n_heads):
    d = len(xs[0])
    dh = d // n_heads
    a = [layer_norm(x, _vec(p.ln1_weight), _vec(p.ln1_bias)) for x in xs]
    q = [matvec(v, _mat(p.w_q)) for v in a]
    k = [matvec(v, _mat(p.w_k)) for v in a]
    val = [matvec(v, _mat(p.w_v)) for v in a]
    out = []
    for t in range(len(xs)):
        heads = []
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = [sum(qi * ki for qi, ki in zip(q[t][sl], k[s][sl])) / math.sqrt(dh)
                      for s in range(t + 1)]
            m = max(scores)
            e = [math.exp(sc - m) for sc in scores]
            z = sum(e)
            mix = [0.0] * dh
            for s in range(t + 1):
                for j in range(dh):
                    mix[j] += e[s] / z * val[s][sl][j]
            heads.extend(mix)
        attn = matvec(heads, _mat(p.w_o))
        out.append([xs[t][i] + attn[i] for i in range(d)])
    res = []
    for x in out:
        f = layer_norm(x, _vec(p.ln2_weight), _vec(p.ln2_bias))
        hid = [gelu(v + b) for v, b in zip(matvec(f, _mat(p.w_in)), _vec(p.b_in))]
        ff = matvec(hid, _mat(p.w_out))
        bo = _vec(p.b_out)
        res.append([x[i] + ff[i] + bo[i] for i in range(d)])
    return res


def embed(model, token_ids, prefix=None):
    rows = [_vec(r) for r in prefix] if prefix is not None else []
    rows += [_vec(model.token_embedding[t]) for t in token_ids]
    pos = model.position_embedding
    return [[r[i] + float(pos[p][i]) for i in range(len(r))] for p, r in enumerate(rows)]


def hidden(model, token_ids, layer, prefix=None):
    xs = embed(model, token_ids, prefix)
    for i in range(layer):
        xs = block(xs, model.layers[i], model.config.n_heads)
    return xs


def logits(model, token_ids, layer=None, prefix=None):
    layer = model.config.n_layers if layer is None else layer
    last = hidden(model, token_ids, layer, prefix)[-1]
    normed = layer_norm(last, _vec(model.final_norm_weight), _vec(model.final_norm_bias))
    return matvec(normed, _mat(model.unembedding))


def argmax(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best
