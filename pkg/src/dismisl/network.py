"""Dense-network numerics for the tile scorer and the risk head.

The scorer is applied to each tile independently (a width-1 convolution over
the tile axis is a dense layer per row). Pooled scores feed a small MLP whose
scalar output is the patient's log relative hazard. Everything runs in
float64; gradients are written out by hand.
"""

from dataclasses import dataclass, field, replace
import json
import struct

import numpy as np

from . import pooling as pl
from .errors import DegenerateBatchError, FormatError, ShapeError
from .survival import cox_nll, cox_nll_grad

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def arrays(self):
        return [self.weights, self.bias]


@dataclass
class AttentionLayer:
    """logit = vector . tanh(weights @ h + bias), shared across windows."""

    weights: np.ndarray  # (att_dim, hidden_dim)
    bias: np.ndarray  # (att_dim,)
    vector: np.ndarray  # (att_dim,)

    def arrays(self):
        return [self.weights, self.bias, self.vector]


@dataclass
class ModelParams:
    scorer: list
    head: list
    attention: AttentionLayer = None

    @property
    def d(self):
        return self.scorer[0].in_dim

    @property
    def head_in(self):
        return self.head[0].in_dim

    def layers(self):
        out = list(self.scorer) + list(self.head)
        if self.attention is not None:
            out.append(self.attention)
        return out

    def arrays(self):
        """Every parameter array in declaration order."""
        return [a for layer in self.layers() for a in layer.arrays()]

    def with_arrays(self, arrays):
        arrays = list(arrays)
        it = iter(arrays)
        scorer = [DenseLayer(next(it), next(it), l.activation) for l in self.scorer]
        head = [DenseLayer(next(it), next(it), l.activation) for l in self.head]
        att = None
        if self.attention is not None:
            att = AttentionLayer(next(it), next(it), next(it))
        if len(arrays) != len(self.arrays()):
            raise ShapeError("parameter array count mismatch")
        return ModelParams(scorer, head, att)

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def dims(self):
        return {
            "d": self.d,
            "scorer_hidden": self.scorer[0].out_dim,
            "head_in": self.head_in,
            "head_hidden": [l.out_dim for l in self.head[:-1]],
            "attention_dim": None if self.attention is None else int(self.attention.bias.shape[0]),
        }


def _layer(rng, in_dim, out_dim, activation):
    w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
    return DenseLayer(w, np.zeros(out_dim), activation)


def init_params(d, head_in, seed, scorer_hidden=128, head_hidden=(128,), attention_dim=None):
    """Gaussian weights with std 1/sqrt(fan_in); zero biases."""
    if min(d, head_in, scorer_hidden) < 1 or any(h < 1 for h in head_hidden):
        raise ShapeError("all layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    scorer = [_layer(rng, d, scorer_hidden, "relu"), _layer(rng, scorer_hidden, 1, "identity")]
    widths = [head_in, *head_hidden]
    head = [_layer(rng, a, b, "relu") for a, b in zip(widths, widths[1:])]
    head.append(_layer(rng, widths[-1], 1, "identity"))
    att = None
    if attention_dim:
        att = AttentionLayer(
            rng.standard_normal((attention_dim, scorer_hidden)) / np.sqrt(scorer_hidden),
            np.zeros(attention_dim),
            rng.standard_normal(attention_dim) / np.sqrt(attention_dim),
        )
    return ModelParams(scorer, head, att)


def init_for_strategy(strategy, d, seed, scorer_hidden=128, head_hidden=(128,), attention_dim=64):
    att = attention_dim if strategy.kind == "attention_percentile" else None
    return init_params(d, strategy.arity(d), seed, scorer_hidden, tuple(head_hidden), att)


def _features(bag):
    feats = bag.features if hasattr(bag, "features") else bag
    return np.asarray(feats, dtype=np.float64)


# -- forward ------------------------------------------------------------------

def _scorer_forward(params, x):
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ShapeError(f"bag has {x.shape[-1]} feature columns, scorer expects {params.d}")
    l1, l2 = params.scorer
    hidden = x @ l1.weights.T
    hidden += l1.bias
    np.maximum(hidden, 0.0, out=hidden)
    scores = hidden @ l2.weights[0] + l2.bias[0]
    return hidden, scores


def score_tiles(params, bag):
    """One score per tile; row i of the bag determines score i alone."""
    return _scorer_forward(params, _features(bag))[1]


def _head_forward(params, pooled):
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape[-1] != params.head_in:
        raise ShapeError(f"pooled vector has length {pooled.shape[-1]}, head expects {params.head_in}")
    acts = [pooled]
    a = pooled
    for layer in params.head:
        a = a @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            a = np.maximum(a, 0.0)
        acts.append(a)
    return acts


def head_forward(params, pooled):
    """Risk score for one pooled vector (or a batch of them, row-wise)."""
    out = _head_forward(params, pooled)[-1][..., 0]
    return float(out) if np.ndim(out) == 0 else out


_CHUNK_ROWS = 1 << 16


def _scored_bags(params, bags):
    """(features, hidden, scores) per bag, converting and scoring a chunk of
    bags at a time so small bags share one matrix product."""
    group, rows = [], 0
    for bag in bags:
        x = _features(bag)
        if x.ndim != 2 or x.shape[1] != params.d:
            raise ShapeError(f"bag has {x.shape[-1]} feature columns, scorer expects {params.d}")
        if group and rows + x.shape[0] > _CHUNK_ROWS:
            yield from _score_group(params, group)
            group, rows = [], 0
        group.append(x)
        rows += x.shape[0]
    if group:
        yield from _score_group(params, group)


def _score_group(params, xs):
    hidden, scores = _scorer_forward(params, np.concatenate(xs) if len(xs) > 1 else xs[0])
    cuts = np.cumsum([x.shape[0] for x in xs])[:-1]
    return zip(xs, np.split(hidden, cuts), np.split(scores, cuts))


def _pool_forward(params, strategy, x, scored=None):
    """Pooled vector plus the slice of activations the backward pass needs.

    Selection strategies keep only the selected tiles; mean pooling keeps the
    bag and recomputes its activations on the way back.
    """
    if strategy.kind == "mean_feature":
        if x.shape[1] != params.d:
            raise ShapeError(f"bag has {x.shape[1]} feature columns, model expects {params.d}")
        return x.mean(axis=0), None
    hidden, scores = scored if scored is not None else _scorer_forward(params, x)
    if strategy.kind == "mean_score":
        return np.array([scores.mean()]), {"x": x}
    idx = pl.selected_tiles(strategy, scores)
    rows, inv = np.unique(idx.reshape(-1), return_inverse=True)
    cache = {"rows": rows, "inv": inv.reshape(idx.shape), "x": x[rows], "hidden": hidden[rows]}
    s_sel = scores[idx]
    if strategy.kind == "attention_percentile":
        w, _, act = pl.attention_weights(params.attention, hidden[idx])
        cache.update(att_w=w, att_act=act, s_sel=s_sel)
        return (w * s_sel).sum(axis=1), cache
    return s_sel.reshape(-1), cache


def _forward_all(params, strategy, bags):
    if strategy.kind == "mean_feature":
        return [_pool_forward(params, strategy, _features(b)) for b in bags]
    return [_pool_forward(params, strategy, x, (h, s)) for x, h, s in _scored_bags(params, bags)]


def pooled_features(params, strategy, bags):
    return np.stack([p for p, _ in _forward_all(params, strategy, bags)])


def predict_risk(params, strategy, bags):
    if len(bags) == 0:
        return np.zeros(0)
    return head_forward(params, pooled_features(params, strategy, bags))


# -- backward -----------------------------------------------------------------

def _pool_backward(params, strategy, cache, dpooled, grads):
    """Accumulate scorer and attention gradients for one patient."""
    if cache is None:
        return
    dh = None
    if strategy.kind == "mean_score":
        x = cache["x"]
        hidden, _ = _scorer_forward(params, x)
        ds = np.full(x.shape[0], dpooled[0] / x.shape[0])
    else:
        x, hidden, inv = cache["x"], cache["hidden"], cache["inv"]
        if strategy.kind == "attention_percentile":
            w, act, s_sel = cache["att_w"], cache["att_act"], cache["s_sel"]
            att = params.attention
            out = (w * s_sel).sum(axis=1, keepdims=True)
            g = dpooled[:, None]
            ds_sel = g * w
            dlogit = g * w * (s_sel - out)
            dact = dlogit[..., None] * att.vector
            dz = dact * (1.0 - act ** 2)
            h_sel = hidden[inv]
            ga = grads.attention
            ga.vector += np.einsum("wk,wka->a", dlogit, act)
            ga.weights += np.einsum("wka,wkh->ah", dz, h_sel)
            ga.bias += dz.sum(axis=(0, 1))
            dh = np.zeros_like(hidden)
            np.add.at(dh, inv.reshape(-1), (dz @ att.weights).reshape(-1, hidden.shape[1]))
            dpooled = ds_sel
        # a tile picked by several windows collects every window's gradient
        ds = np.zeros(hidden.shape[0])
        np.add.at(ds, inv.reshape(-1), np.asarray(dpooled).reshape(-1))

    l1, l2 = params.scorer
    g1, g2 = grads.scorer
    g2.weights[0] += ds @ hidden
    g2.bias[0] += ds.sum()
    dh_rows = ds[:, None] * l2.weights[0]
    if dh is not None:
        dh_rows += dh
    # relu passes gradient exactly where the hidden unit is positive
    dpre = dh_rows * (hidden > 0)
    g1.weights += dpre.T @ x
    g1.bias += dpre.sum(axis=0)


def backward(params, bags, strategy, time, event):
    """Cox loss of a batch and its gradient with respect to every parameter.

    Selection strategies route gradient only to the tiles picked in the
    forward pass. Per-patient contributions are reduced in batch order.
    """
    if len(bags) == 0:
        raise DegenerateBatchError("empty batch")
    event = np.asarray(event)
    if not event.any():
        raise DegenerateBatchError("batch has no observed events; Cox loss is constant")
    forward = _forward_all(params, strategy, bags)
    pooled = np.stack([p for p, _ in forward])
    caches = [c for _, c in forward]
    acts = _head_forward(params, pooled)
    risk = acts[-1][:, 0]
    loss = cox_nll(risk, time, event)
    grads = params.zeros_like()

    delta = cox_nll_grad(risk, time, event)[:, None]
    for i in range(len(params.head) - 1, -1, -1):
        layer, g = params.head[i], grads.head[i]
        if layer.activation == "relu":
            delta = delta * (acts[i + 1] > 0)
        g.weights += delta.T @ acts[i]
        g.bias += delta.sum(axis=0)
        delta = delta @ layer.weights
    for b in range(len(bags)):
        _pool_backward(params, strategy, caches[b], delta[b], grads)
    return loss, grads


def batch_loss(params, bags, strategy, time, event):
    return cox_nll(predict_risk(params, strategy, bags), time, event)


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_init(params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return AdamState([z.copy() for z in zeros], zeros, 0, lr, beta1, beta2, eps, weight_decay)


def adam_step(params, grads, state):
    """One bias-corrected Adam update with L2 weight decay folded into the gradient."""
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ShapeError("parameter, gradient and state structures differ")
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), replace(state, m=new_m, v=new_v, step=t)


# -- checkpoints ------------------------------------------------------------------

_CKPT_MAGIC = b"DMSM"
_CKPT_HEAD = struct.Struct("<4sHI")


def save_checkpoint(path, params, strategy, metadata=None):
    """JSON header then every parameter as little-endian float64, in order."""
    header = {
        "dims": params.dims(),
        "activations": {
            "scorer": [l.activation for l in params.scorer],
            "head": [l.activation for l in params.head],
        },
        "pooling": strategy.to_dict(),
        "shapes": [list(a.shape) for a in params.arrays()],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(_CKPT_MAGIC, 1, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path):
    """Returns (params, strategy, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEAD.size:
        raise FormatError("header", "checkpoint too short")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise FormatError("magic", f"expected {_CKPT_MAGIC!r}, got {magic!r}")
    if version != 1:
        raise FormatError("version", f"unsupported checkpoint version {version}")
    header = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen].decode("utf-8"))
    payload = raw[_CKPT_HEAD.size + hlen:]
    shapes = [tuple(s) for s in header["shapes"]]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(payload) != 8 * total:
        raise FormatError("payload", f"expected {8 * total} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, off = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[off:off + size].reshape(s).copy())
        off += size
    dims = header["dims"]
    strategy = pl.PoolingStrategy.from_dict(header["pooling"])
    template = init_params(
        dims["d"], dims["head_in"], 0, dims["scorer_hidden"], tuple(dims["head_hidden"]), dims["attention_dim"]
    )
    for layer, act in zip(template.scorer, header["activations"]["scorer"]):
        layer.activation = act
    for layer, act in zip(template.head, header["activations"]["head"]):
        layer.activation = act
    return template.with_arrays(arrays), strategy, header["metadata"]
