"""Mini-batch Adam training with per-epoch decay, clipping and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import (EncodedInstance, ModelConfig, as_constants, batch_loss, encode_instance, init_params, predict,
                    score_all)
from .text import StoryInstance, Vocabulary, load_embeddings

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.8
    clip_norm: float = 5.0
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    def lr_at(self, epoch: int) -> float:
        """``lr * lr_decay**epoch``, evaluated exactly on the decimal values and rounded once."""
        return float(Fraction(repr(self.lr)) * Fraction(repr(self.lr_decay)) ** epoch)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- optimizer


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float = 5.0) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their global l2 norm exceeds ``clip_norm``."""
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; returns new parameter arrays and advances ``state``."""
    state.t += 1
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise T.ShapeError(f"adam: gradient {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = beta1 * m + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = state.m[k] / (1 - beta1 ** state.t)
        v_hat = state.v[k] / (1 - beta2 ** state.t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_epoch: int
    log: list
    steps: list
    vocab: Vocabulary | None = None
    init_eval: dict | None = None


def _rngs(seed: int):
    init, shuffle, drop = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in (init, shuffle, drop))


def gradients(batch: Sequence[EncodedInstance], params: Mapping[str, np.ndarray], config: ModelConfig,
              rng: np.random.Generator | None = None, training: bool = False):
    tape = T.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    total, stats = batch_loss(batch, leaves, config, rng, training)
    tape.backward(total)
    return {k: leaf.grad for k, leaf in leaves.items()}, float(total.value), stats


def quick_eval(params: Mapping[str, np.ndarray], config: ModelConfig, data: Sequence[EncodedInstance]) -> dict:
    """Accuracy and mean hybrid-representation cosine with dropout off."""
    consts = as_constants(params)
    correct = 0
    cos = 0.0
    for inst, out in score_all(data, consts, config):
        correct += predict(out.p) == inst.label
        cos += float(T.cosine(out.hybrid[0], out.hybrid[1]).value)
    return {"accuracy": correct / len(data), "cosine": cos / len(data)}


def train(params: Mapping[str, np.ndarray], config: ModelConfig, data: Sequence[EncodedInstance],
          tcfg: TrainConfig, eval_data: Sequence[EncodedInstance] | None = None,
          log_path=None) -> TrainResult:
    if not data:
        raise ValueError("cannot train on an empty dataset")
    _, shuffle_rng, drop_rng = _rngs(tcfg.seed)
    params = {k: np.array(v) for k, v in params.items()}
    state = AdamState()
    records, steps = [], []
    init_eval = quick_eval(params, config, eval_data) if eval_data else None
    best, best_epoch, best_acc = dict(params), -1, -1.0
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            lr = tcfg.lr_at(epoch)
            order = shuffle_rng.permutation(len(data))
            sums = {"loss": 0.0, "cce": 0.0, "cosine": 0.0, "l2": 0.0}
            correct = 0
            for start in range(0, len(data), tcfg.batch_size):
                batch = [data[i] for i in order[start:start + tcfg.batch_size]]
                grads, total, stats = gradients(batch, params, config, drop_rng, training=True)
                pre = global_norm(grads)
                grads = clip_gradients(grads, tcfg.clip_norm)
                steps.append({"epoch": epoch, "grad_norm": pre, "clipped_norm": global_norm(grads)})
                params = adam_step(params, grads, state, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
                n = len(batch)
                sums["loss"] += total * n
                sums["cce"] += stats["cce"] * n
                sums["cosine"] += stats["cosine"] * n
                sums["l2"] += stats["l2"] * n
                correct += stats["correct"]
            rec = {"epoch": epoch, "lr": lr}
            rec.update({k: v / len(data) for k, v in sums.items()})
            rec["train_acc"] = correct / len(data)
            if eval_data:
                ev = quick_eval(params, config, eval_data)
                rec["eval_acc"], rec["eval_cosine"] = ev["accuracy"], ev["cosine"]
                if ev["accuracy"] > best_acc:
                    best, best_epoch, best_acc = dict(params), epoch, ev["accuracy"]
            else:
                rec["eval_acc"] = None
                best, best_epoch = dict(params), epoch
            records.append(rec)
            log.info("epoch %d lr %.6g loss %.4f train_acc %.3f eval_acc %s", epoch, lr, rec["loss"],
                     rec["train_acc"], rec["eval_acc"])
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return TrainResult(params=params, best_params=best, best_epoch=best_epoch, log=records, steps=steps,
                       init_eval=init_eval)


def prepare(instances: Sequence[StoryInstance], vocab: Vocabulary, config: ModelConfig,
            external: Mapping | None = None) -> list[EncodedInstance]:
    return [encode_instance(inst, vocab, config, external) for inst in instances]


def fit(train_set: Sequence[StoryInstance], config: ModelConfig, tcfg: TrainConfig,
        eval_set: Sequence[StoryInstance] | None = None, embeddings_path=None,
        external: Mapping | None = None, log_path=None) -> TrainResult:
    """Build the vocabulary, initialise weights from ``tcfg.seed`` and train."""
    if not train_set:
        raise ValueError("cannot train on an empty dataset")
    vocab = Vocabulary.build(train_set)
    init_rng, _, _ = _rngs(tcfg.seed)
    embedding = None
    if embeddings_path is not None:
        emb = load_embeddings(embeddings_path, vocab, init_rng, dim=config.embed_dim)
        if emb.values.shape[1] != config.embed_dim:
            raise ValueError(f"embedding file has dimension {emb.values.shape[1]}, config says {config.embed_dim}")
        log.info("embeddings: %d found, %d OOV", emb.found, emb.oov)
        embedding = emb.values
    params = init_params(config, len(vocab), init_rng, embedding)
    data = prepare(train_set, vocab, config, external)
    dev = prepare(eval_set, vocab, config, external) if eval_set else None
    result = train(params, config, data, tcfg, dev, log_path=log_path)
    result.vocab = vocab
    return result


# --------------------------------------------------------------- checkpoints

MAGIC = b"DIFFNET\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    vocab: Vocabulary
    seed: int
    epoch: int
    train_config: dict | None = None


def save_checkpoint(params: Mapping[str, np.ndarray], path, config: ModelConfig, vocab: Vocabulary,
                    seed: int, epoch: int, train_config: TrainConfig | None = None) -> None:
    """Header (JSON) + float64 little-endian payload + sha256 of both."""
    header = {
        "fingerprint": config.fingerprint(),
        "config": config.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "seed": seed,
        "epoch": epoch,
        "vocab": vocab.itos,
        "params": [[k, list(np.shape(v))] for k, v in params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    body = MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, head_len = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + head_len])
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint does not match stored config")
    if expected is not None and expected.fingerprint() != header["fingerprint"]:
        stored, wanted = config.to_dict(), expected.to_dict()
        diff = sorted(k for k in wanted if stored.get(k) != wanted[k])
        raise CheckpointError(f"{path}: model config mismatch in field(s) {', '.join(diff)}")
    offset = start + head_len
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointError(f"{path}: payload size does not match header")
    return Checkpoint(params=params, config=config, vocab=Vocabulary(list(header["vocab"])),
                      seed=header["seed"], epoch=header["epoch"], train_config=header["train_config"])
