"""Bag-to-feature aggregation.

Every strategy maps a bag's tile scores (and, for some, its features or the
scorer's hidden embedding) to a fixed-length vector. Selection strategies read
actual instances off the ascending stable sort of the scores; ties are broken
by the lower original tile index.
"""

from dataclasses import dataclass
import functools
import math

import numpy as np

from .errors import InsufficientInstancesError, ValidationError

SCENARIOS = {
    1: (0, 100),
    2: (0, 0.1, 99.9, 100),
    3: (0, 0.1, 1, 99, 99.9, 100),
    4: (0, 0.1, 1, 5, 95, 99, 99.9, 100),
    5: (0, 0.1, 1, 5, 10, 90, 95, 99, 99.9, 100),
    6: (0, 0.1, 1, 5, 10, 25, 75, 90, 95, 99, 99.9, 100),
    7: (0, 0.1, 1, 5, 10, 25, 50, 75, 90, 95, 99, 99.9, 100),
}


@dataclass(frozen=True)
class PercentileScheme:
    percentiles: tuple
    k: int = 1

    def __post_init__(self):
        ps = tuple(float(p) for p in self.percentiles)
        object.__setattr__(self, "percentiles", ps)
        if not ps:
            raise ValidationError("percentile list must be non-empty")
        if any(not 0 <= p <= 100 for p in ps):
            raise ValidationError(f"percentiles must lie in [0, 100]: {ps}")
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValidationError(f"percentiles must be strictly increasing: {ps}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValidationError(f"neighborhood k must be odd and >= 1, got {self.k}")

    def __len__(self):
        return len(self.percentiles)


def scenario_preset(scenario_id, k=1):
    if scenario_id not in SCENARIOS:
        raise ValidationError(f"scenario must be one of 1..7, got {scenario_id!r}")
    return PercentileScheme(SCENARIOS[scenario_id], k)


KINDS = ("percentile", "mean_score", "max_top_k", "top_bottom_k", "mean_feature", "attention_percentile")


@dataclass(frozen=True)
class PoolingStrategy:
    kind: str
    scheme: PercentileScheme = None
    k: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown pooling kind {self.kind!r}")
        if self.kind in ("percentile", "attention_percentile") and self.scheme is None:
            raise ValidationError(f"{self.kind} pooling needs a percentile scheme")
        if self.kind in ("max_top_k", "top_bottom_k") and (self.k is None or self.k < 1):
            raise ValidationError(f"{self.kind} pooling needs k >= 1")

    def arity(self, d=None):
        if self.kind == "percentile":
            return len(self.scheme) * self.scheme.k
        if self.kind == "attention_percentile":
            return len(self.scheme)
        if self.kind == "mean_score":
            return 1
        if self.kind == "max_top_k":
            return self.k
        if self.kind == "top_bottom_k":
            return 2 * self.k
        if d is None:
            raise ValidationError("mean_feature arity depends on the feature dimension d")
        return d

    @property
    def uses_scores(self):
        return self.kind != "mean_feature"

    @property
    def min_instances(self):
        if self.kind in ("percentile", "attention_percentile"):
            return self.scheme.k
        if self.kind in ("max_top_k", "top_bottom_k"):
            return self.k
        return 1

    def to_dict(self):
        out = {"kind": self.kind}
        if self.scheme is not None:
            out["percentiles"] = list(self.scheme.percentiles)
            out["k"] = self.scheme.k
        elif self.k is not None:
            out["k"] = self.k
        return out

    @classmethod
    def from_dict(cls, doc):
        """Parse ``{"kind": "percentile", "percentiles": [...], "k": 3}``.

        ``"scenario": 1..7`` may replace the explicit percentile list.
        """
        doc = dict(doc)
        kind = doc.pop("kind", "percentile")
        if kind in ("percentile", "attention_percentile"):
            k = int(doc.pop("k", 1))
            if "scenario" in doc:
                scheme = scenario_preset(int(doc.pop("scenario")), k)
            elif "percentiles" in doc:
                scheme = PercentileScheme(tuple(doc.pop("percentiles")), k)
            else:
                raise ValidationError(f"{kind} strategy needs 'scenario' or 'percentiles'")
            strat = cls(kind, scheme=scheme)
        elif kind in ("max_top_k", "top_bottom_k"):
            strat = cls(kind, k=int(doc.pop("k")))
        else:
            strat = cls(kind)
        if doc:
            raise ValidationError(f"unexpected strategy fields: {sorted(doc)}")
        return strat

    def label(self):
        if self.kind in ("percentile", "attention_percentile"):
            base = "dismisl" if self.kind == "percentile" else "attention"
            preset = next((s for s, ps in SCENARIOS.items() if ps == self.scheme.percentiles), None)
            where = f"s{preset}" if preset else f"p{len(self.scheme)}"
            return f"{base}_{where}_k{self.scheme.k}"
        if self.k is not None:
            return f"{self.kind}_{self.k}"
        return self.kind


def percentile_strategy(scenario_id, k=1):
    return PoolingStrategy("percentile", scheme=scenario_preset(scenario_id, k))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def percentile_indices(n, scheme):
    """Sorted-order positions read for each percentile, shape (|percentiles|, k).

    The centre is round(p/100 * (n-1)) (half up); the k-wide window around it
    is shifted, not clipped, to stay inside [0, n-1].
    """
    return _percentile_indices(int(n), scheme).copy()


@functools.lru_cache(maxsize=256)
def _percentile_indices(n, scheme):
    if n < 1:
        raise ValidationError("n must be >= 1")
    k = scheme.k
    if n < k:
        raise InsufficientInstancesError(f"{n} tiles cannot fill a window of {k}")
    half = (k - 1) // 2
    rows = []
    for p in scheme.percentiles:
        # p * (n-1) / 100 keeps exact products exact, e.g. 50 * 4 / 100 == 2
        c = _round_half_up(p * (n - 1) / 100.0)
        start = min(max(c - half, 0), n - k)
        rows.append(np.arange(start, start + k))
    return np.array(rows, dtype=np.int64)


def sort_order(scores):
    return np.argsort(scores, kind="stable")


def selected_tiles(strategy, scores):
    """Original tile indices read by a selection strategy, in output order.

    Percentile strategies return an array shaped (|percentiles|, k).
    """
    n = scores.shape[0]
    if n < strategy.min_instances:
        raise InsufficientInstancesError(
            f"{strategy.kind} needs at least {strategy.min_instances} tiles, bag has {n}"
        )
    order = sort_order(scores)
    if strategy.kind in ("percentile", "attention_percentile"):
        return order[_percentile_indices(n, strategy.scheme)]
    if strategy.kind == "max_top_k":
        return order[::-1][: strategy.k]
    if strategy.kind == "top_bottom_k":
        return np.concatenate([order[: strategy.k], order[::-1][: strategy.k]])
    raise ValidationError(f"{strategy.kind} is not a selection strategy")


def attention_weights(attention, hidden_rows):
    """Softmax attention over the last-but-one axis of ``hidden_rows``.

    logits = a . tanh(U h + b); returns (weights, logits, tanh activations).
    """
    act = np.tanh(hidden_rows @ attention.weights.T + attention.bias)
    logits = act @ attention.vector
    shifted = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=-1, keepdims=True)
    return w, logits, act


def attention_pool(scheme, scores, hidden, attention):
    """Per-window softmax-weighted sum of the k window scores.

    One attention parameter set is shared by all percentile locations.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if hidden.shape[0] != scores.shape[0]:
        raise ValidationError("hidden embedding rows must match the number of scores")
    idx = selected_tiles(PoolingStrategy("attention_percentile", scheme=scheme), scores)
    w, _, _ = attention_weights(attention, hidden[idx])
    return (w * scores[idx]).sum(axis=1)


def pool(strategy, scores, bag=None, hidden=None, attention=None):
    """Pooled feature vector of length ``strategy.arity(d)``."""
    if strategy.kind == "mean_feature":
        if bag is None:
            raise ValidationError("mean_feature pooling needs the bag features")
        feats = bag.features if hasattr(bag, "features") else bag
        return np.asarray(feats, dtype=np.float64).mean(axis=0)
    scores = np.asarray(scores, dtype=np.float64)
    if bag is not None:
        n_rows = bag.n if hasattr(bag, "n") else np.shape(bag)[0]
        if n_rows != scores.shape[0]:
            raise ValidationError(f"{scores.shape[0]} scores for a bag of {n_rows} tiles")
    if strategy.kind == "mean_score":
        return np.array([scores.mean()])
    if strategy.kind == "attention_percentile":
        if hidden is None or attention is None:
            raise ValidationError("attention pooling needs hidden embeddings and attention parameters")
        return attention_pool(strategy.scheme, scores, hidden, attention)
    return scores[selected_tiles(strategy, scores)].reshape(-1)
