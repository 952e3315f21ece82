"""Diff-Net forward pass: encoders, attention-over-attention, highway head, loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .text import FEATURE_NAMES, FeatureAnnotation, StoryInstance, Vocabulary, init_embeddings, instance_features

AOA_MODES = ("modified", "original", "dot")


@dataclass
class ModelConfig:
    embed_dim: int = 300
    hidden: int = 200
    enriched: int = 0  # 0 means "same as hidden"
    dropout: float = 0.5
    activation: str = "selu"
    aoa_mode: str = "modified"
    use_match: bool = True
    use_diff: bool = True
    use_cosine_loss: bool = True
    use_features: bool = True
    features: tuple = FEATURE_NAMES
    external_feature_dim: int = 0
    l2: float = 0.001

    def __post_init__(self):
        self.features = tuple(self.features)
        if self.enriched == 0:
            self.enriched = self.hidden
        if min(self.embed_dim, self.hidden, self.enriched) <= 0:
            raise ValueError("embed_dim, hidden and enriched must be positive")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(T.ACTIVATIONS)}, got {self.activation!r}")
        if self.aoa_mode not in AOA_MODES:
            raise ValueError(f"aoa_mode must be one of {AOA_MODES}, got {self.aoa_mode!r}")
        unknown = set(self.features) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.external_feature_dim < 0:
            raise ValueError("external_feature_dim must be >= 0")

    @property
    def enabled_features(self) -> tuple:
        if not self.use_features:
            return ()
        return tuple(f for f in FEATURE_NAMES if f in self.features)

    @property
    def ending_input_dim(self) -> int:
        return self.embed_dim + len(self.enabled_features)

    @property
    def hybrid_dim(self) -> int:
        return (2 * self.hidden + self.enriched * self.use_match + self.enriched * self.use_diff
                + self.external_feature_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------ params


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _lstm_params(rng, n_in, hid, prefix):
    b = np.zeros(4 * hid)
    b[hid:2 * hid] = 1.0  # forget gate
    return {
        f"{prefix}_wx": _glorot(rng, n_in, 4 * hid),
        f"{prefix}_wh": _glorot(rng, hid, 4 * hid),
        f"{prefix}_b": b,
    }


def init_params(config: ModelConfig, vocab_size: int, rng: np.random.Generator,
                embedding: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """All trainable weights, in a fixed key order.

    Weight matrices are stored input-major, so a layer is ``x @ W + b``.
    """
    e, h, r, d = config.embed_dim, config.hidden, config.enriched, config.hybrid_dim
    if embedding is None:
        embedding = init_embeddings(vocab_size, e, rng)
    elif embedding.shape != (vocab_size, e):
        raise ValueError(f"embedding shape {embedding.shape} != ({vocab_size}, {e})")
    params = {"embedding": np.array(embedding, dtype=np.float64)}
    params.update(_lstm_params(rng, e, h, "story_fw"))
    params.update(_lstm_params(rng, e, h, "story_bw"))
    params.update(_lstm_params(rng, config.ending_input_dim, h, "end_fw"))
    params.update(_lstm_params(rng, config.ending_input_dim, h, "end_bw"))
    params["enrich_story_w"] = _glorot(rng, 2 * h, r)
    params["enrich_story_b"] = np.zeros(r)
    params["enrich_end_w"] = _glorot(rng, 2 * h, r)
    params["enrich_end_b"] = np.zeros(r)
    params["hw_gate_w"] = _glorot(rng, d, d)
    params["hw_gate_b"] = np.zeros(d)
    params["hw_w"] = _glorot(rng, d, d)
    params["hw_b"] = np.zeros(d)
    params["score_w"] = _glorot(rng, d, 1)[:, 0]
    params["score_b"] = np.zeros(())
    return params


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# ------------------------------------------------------------------ inputs


@dataclass
class EncodedInstance:
    """Token ids and feature matrices for one story, ready for the model."""

    id: str
    story: np.ndarray
    endings: tuple
    features: tuple
    label: int
    external: tuple | None = None


def encode_instance(inst: StoryInstance, vocab: Vocabulary, config: ModelConfig,
                    external: Mapping | None = None) -> EncodedInstance:
    f1, f2 = instance_features(inst)
    ext = None
    if config.external_feature_dim:
        if external is None:
            raise ValueError("external_feature_dim > 0 but no external features were given")
        try:
            ext = (external[(inst.id, 1)], external[(inst.id, 2)])
        except KeyError as exc:
            raise ValueError(f"missing external features for {exc.args[0]}") from None
    enabled = config.enabled_features
    return EncodedInstance(
        id=inst.id,
        story=vocab.encode(inst.story_tokens),
        endings=(vocab.encode(inst.ending1), vocab.encode(inst.ending2)),
        features=(f1.matrix(enabled), f2.matrix(enabled)),
        label=inst.label,
        external=ext,
    )


# ---------------------------------------------------------------- layers


def embed_with_features(ids, features, embedding: Tensor, rate: float,
                        rng: np.random.Generator | None, training: bool) -> Tensor:
    """Embedding lookup, optional feature columns, then dropout."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = embedding.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")
    x = T.gather_rows(embedding, ids)
    if features is not None:
        if isinstance(features, FeatureAnnotation):
            features = features.matrix()
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != len(ids):
            raise ValueError(f"{features.shape[0]} feature rows for {len(ids)} tokens")
        if features.shape[1]:
            x = T.concat([x, features], axis=-1)
    if training and rate > 0:
        x = T.mul(x, T.dropout_mask(x.shape, rate, rng, training))
    return x


def encode_contextual(embedded: Tensor, params: Mapping[str, Tensor], prefix: str):
    """Bi-LSTM states (T×2h) and their max-over-time pooling (2h)."""
    if embedded.shape[0] == 0:
        raise ValueError("cannot encode an empty sequence")
    seq = _encode_many([embedded], params, prefix)[0]
    return seq, T.max_over_time(seq)


def enrich(seq: Tensor, w: Tensor, b: Tensor, activation: str = "selu") -> Tensor:
    if seq.value.ndim != 2 or seq.shape[1] != w.shape[0]:
        raise T.ShapeError(f"enrich: sequence {seq.shape} does not match weight {w.shape}")
    return T.ACTIVATIONS[activation](T.add(T.matmul(seq, w), b))


@dataclass
class AttentionTrace:
    sim: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray


def negate(sim: Tensor) -> Tensor:
    return T.scalar_mul(sim, -1.0)


def _np_softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def modified_aoa(td1: Tensor, td2: Tensor, eta=None, mode: str = "modified"):
    """Attend over the rows of ``td2`` using their agreement with ``td1``.

    Returns the attended ``td2`` vector and an :class:`AttentionTrace`.
    ``mode`` selects cosine/max (``modified``), dot/mean (``original``) or a
    plain dot-product max attention (``dot``).
    """
    td1, td2 = T.as_tensor(td1), T.as_tensor(td2)
    if td1.value.ndim != 2 or td2.value.ndim != 2 or td1.shape[0] == 0 or td2.shape[0] == 0:
        raise ValueError(f"attention needs non-empty matrices, got {td1.shape} and {td2.shape}")
    if mode == "modified":
        sim = T.cosine_matrix(td1, td2)
    elif mode in ("original", "dot"):
        if td1.shape[1] != td2.shape[1]:
            raise T.ShapeError(f"dot similarity: incompatible shapes {td1.shape} and {td2.shape}")
        sim = T.matmul(td1, T.transpose(td2))
    else:
        raise ValueError(f"unknown aoa mode {mode!r}")
    if eta is not None:
        sim = eta(sim)

    if mode == "dot":
        gamma = T.softmax(T.reduce_max(sim, axis=0))
        alpha_v = _np_softmax(sim.value, axis=0)
        beta_v = _np_softmax(sim.value.max(axis=1))
    else:
        alpha = T.softmax(sim, axis=0)
        pooled = T.reduce_max(sim, axis=1) if mode == "modified" else T.reduce_mean(sim, axis=1)
        beta = T.softmax(pooled)
        gamma = T.softmax(T.matmul(T.transpose(alpha), beta))
        alpha_v, beta_v = alpha.value, beta.value
    out = T.matmul(gamma, td2)
    return out, AttentionTrace(sim=sim.value.copy(), alpha=alpha_v.copy(), beta=beta_v.copy(),
                               gamma=gamma.value.copy())


def match_repr(r_story: Tensor, r_ending: Tensor, mode: str = "modified"):
    return modified_aoa(r_story, r_ending, None, mode)


def diff_repr(r_other: Tensor, r_this: Tensor, mode: str = "modified"):
    return modified_aoa(r_other, r_this, negate, mode)


def highway_head(x: Tensor, params: Mapping[str, Tensor], activation: str = "selu") -> Tensor:
    """One highway layer followed by the output activation."""
    act = T.ACTIVATIONS[activation]
    if x.shape != (params["hw_w"].shape[0],):
        raise T.ShapeError(f"highway: input {x.shape} does not match weight {params['hw_w'].shape}")
    gate = T.sigmoid(T.add(T.matmul(x, params["hw_gate_w"]), params["hw_gate_b"]))
    transformed = act(T.add(T.matmul(x, params["hw_w"]), params["hw_b"]))
    carry = T.mul(T.sub(np.ones(x.shape), gate), x)
    return act(T.add(T.mul(gate, transformed), carry))


# ------------------------------------------------------------------ scoring


@dataclass
class PairOutput:
    probs: Tensor
    scores: Tensor
    hybrid: tuple
    traces: dict = field(default_factory=dict)

    @property
    def p(self) -> np.ndarray:
        return self.probs.value


def _encode_many(seqs: Sequence[Tensor], params: Mapping[str, Tensor], prefix: str):
    """Bi-LSTM over several sequences at once; returns per-sequence states."""
    lengths = [x.shape[0] for x in seqs]
    if min(lengths) == 0:
        raise ValueError("cannot encode an empty sequence")
    x = T.pad_stack(seqs)
    fw = T.lstm_sequence(x, params[f"{prefix}_fw_wx"], params[f"{prefix}_fw_wh"], params[f"{prefix}_fw_b"],
                         lengths=lengths)
    bw = T.lstm_sequence(x, params[f"{prefix}_bw_wx"], params[f"{prefix}_bw_wh"], params[f"{prefix}_bw_b"],
                         reverse=True, lengths=lengths)
    both = T.concat([fw, bw], axis=-1)
    return [T.take_sequence(both, i, n) for i, n in enumerate(lengths)]


def score_batch(batch: Sequence[EncodedInstance], params: Mapping[str, Tensor], config: ModelConfig,
                rng: np.random.Generator | None = None, training: bool = False) -> list[PairOutput]:
    """Score several instances, sharing one padded LSTM pass per encoder."""
    act = config.activation
    emb = params["embedding"]
    endings = []
    for inst in batch:
        for ids, feats in zip(inst.endings, inst.features):
            if len(ids) == 0:
                raise ValueError(f"instance {inst.id!r}: empty ending")
            endings.append(embed_with_features(ids, feats, emb, config.dropout, rng, training))
    end_states = _encode_many(endings, params, "end")

    story_states = {}
    if config.use_match:
        with_story = [i for i, inst in enumerate(batch) if len(inst.story)]
        if with_story:
            xs = [embed_with_features(batch[i].story, None, emb, config.dropout, rng, training) for i in with_story]
            story_states = dict(zip(with_story, _encode_many(xs, params, "story")))

    outputs = []
    for i, inst in enumerate(batch):
        seqs = end_states[2 * i:2 * i + 2]
        ctx = [T.max_over_time(s) for s in seqs]
        rich = [enrich(s, params["enrich_end_w"], params["enrich_end_b"], act) for s in seqs]
        r_story = None
        if i in story_states:
            r_story = enrich(story_states[i], params["enrich_story_w"], params["enrich_story_b"], act)
        traces = {}
        hybrid = []
        for k in range(2):
            parts = [ctx[k]]
            if config.use_match:
                if r_story is None:
                    parts.append(Tensor(np.zeros(config.enriched)))
                else:
                    m, traces[f"match{k + 1}"] = match_repr(r_story, rich[k], config.aoa_mode)
                    parts.append(m)
            if config.use_diff:
                d, traces[f"diff{k + 1}"] = diff_repr(rich[1 - k], rich[k], config.aoa_mode)
                parts.append(d)
            if config.external_feature_dim:
                parts.append(Tensor(inst.external[k]))
            hybrid.append(highway_head(T.concat(parts), params, act))
        scores = T.concat([T.reshape(T.add(T.matmul(o, params["score_w"]), params["score_b"]), (1,))
                           for o in hybrid])
        outputs.append(PairOutput(probs=T.softmax(scores), scores=scores, hybrid=tuple(hybrid), traces=traces))
    return outputs


def score_pair(inst: EncodedInstance, params: Mapping[str, Tensor], config: ModelConfig,
               rng: np.random.Generator | None = None, training: bool = False) -> PairOutput:
    """Probability of each ending being the real one."""
    return score_batch([inst], params, config, rng, training)[0]


def score_all(data: Sequence[EncodedInstance], params: Mapping[str, Tensor], config: ModelConfig,
              chunk: int = 64):
    """Yield ``(instance, output)`` for inference over a whole dataset."""
    for start in range(0, len(data), chunk):
        part = data[start:start + chunk]
        yield from zip(part, score_batch(part, params, config))


def predict(p: np.ndarray) -> int:
    """Arg-max ending (1 or 2); ties go to ending 1."""
    return 1 if p[0] >= p[1] else 2


# --------------------------------------------------------------------- loss


@dataclass
class LossParts:
    total: Tensor
    cce: float
    cosine: float
    l2: float


def l2_penalty(embedding: Tensor, weight: float) -> Tensor:
    return T.scalar_mul(T.total(T.mul(embedding, embedding)), weight)


def instance_terms(out: PairOutput, label: int, config: ModelConfig):
    """Cross-entropy and cosine terms for one instance, as tensors."""
    onehot = np.zeros(2)
    onehot[label - 1] = 1.0
    cce = T.scalar_mul(T.total(T.mul(T.log_softmax(out.scores), onehot)), -1.0)
    cos = T.cosine(out.hybrid[0], out.hybrid[1])
    return cce, cos


def loss(out: PairOutput, label: int, embedding: Tensor, config: ModelConfig) -> LossParts:
    cce, cos = instance_terms(out, label, config)
    l2 = l2_penalty(embedding, config.l2)
    total = T.add(cce, l2)
    if config.use_cosine_loss:
        total = T.add(total, cos)
    return LossParts(total=total, cce=float(cce.value), cosine=float(cos.value), l2=float(l2.value))


def batch_loss(batch: Sequence[EncodedInstance], params: Mapping[str, Tensor], config: ModelConfig,
               rng: np.random.Generator | None, training: bool):
    """Mean per-instance loss plus one embedding penalty.

    Returns ``(total, stats)`` where stats holds the mean components and the
    number of correct predictions.
    """
    terms = []
    cce_sum = cos_sum = 0.0
    correct = 0
    for inst, out in zip(batch, score_batch(batch, params, config, rng, training)):
        cce, cos = instance_terms(out, inst.label, config)
        cce_sum += float(cce.value)
        cos_sum += float(cos.value)
        correct += predict(out.p) == inst.label
        terms.append(T.add(cce, cos) if config.use_cosine_loss else cce)
    data = terms[0]
    for t in terms[1:]:
        data = T.add(data, t)
    data = T.scalar_mul(data, 1.0 / len(batch))
    l2 = l2_penalty(params["embedding"], config.l2)
    n = len(batch)
    stats = {"cce": cce_sum / n, "cosine": cos_sum / n, "l2": float(l2.value), "correct": correct}
    return T.add(data, l2), stats


# --------------------------------------------------------- gradient check


def tiny_problem(seed: int = 0, vocab_size: int = 20, story_len: int = 6, ending_len: int = 3,
                 **overrides):
    """A random instance and parameters for the gradient check."""
    rng = np.random.default_rng(seed)
    cfg = dict(embed_dim=8, hidden=4, dropout=0.0)
    cfg.update(overrides)
    config = ModelConfig(**cfg)
    story = rng.integers(2, vocab_size, size=story_len)
    e1 = rng.integers(2, vocab_size, size=ending_len)
    e2 = rng.integers(2, vocab_size, size=ending_len)
    feats = tuple(rng.integers(0, 2, size=(ending_len, len(config.enabled_features))).astype(float)
                  for _ in range(2))
    ext = None
    if config.external_feature_dim:
        ext = tuple(rng.normal(size=config.external_feature_dim) for _ in range(2))
    inst = EncodedInstance(id="tiny", story=story, endings=(e1, e2), features=feats, label=1, external=ext)
    # wider embedding init than the default so every path carries signal
    embedding = rng.normal(scale=0.5, size=(vocab_size, config.embed_dim))
    params = init_params(config, vocab_size, rng, embedding=embedding)
    for k, v in params.items():
        if k.endswith("_b") and k != "score_b":
            params[k] = v + rng.normal(scale=0.1, size=v.shape)
    return config, inst, params


def gradient_check(seed: int = 0, step: float = 1e-5, **overrides) -> float:
    config, inst, params = tiny_problem(seed, **overrides)

    def f(p):
        return loss(score_pair(inst, p, config), inst.label, p["embedding"], config).total

    return T.finite_diff_check(f, params, step)
