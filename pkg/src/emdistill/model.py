"""Tiny transformer encoder-classifier.

Teacher and student share this implementation and differ only in
configuration. Every forward pass records the activation trace
(embeddings, per-layer pre-softmax attention scores, per-layer hidden
states, logits) that the distillation losses consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class ModelInputError(ValueError):
    """Bad tokens, labels or checkpoint for the configured model."""


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int
    num_heads: int
    hidden_size: int
    ff_size: int
    vocab_size: int
    max_seq_len: int
    num_classes: int
    seed: int = 0
    init_std: float = 0.1

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ModelInputError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )

    def param_count(self) -> int:
        """Closed-form number of scalar parameters."""
        d, f, L = self.hidden_size, self.ff_size, self.num_layers
        per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
        return (
            self.vocab_size * d
            + self.max_seq_len * d
            + L * per_layer
            + d * self.num_classes
            + self.num_classes
        )


@dataclass
class ActivationTrace:
    """Per-forward-pass record of the tensors distillation losses need.

    attention_scores hold the PRE-softmax scaled dot-product scores,
    shape (heads, len, len) per layer; hidden_states hold each layer's
    final output, shape (len, hidden).
    """

    embeddings: Tensor
    attention_scores: list = field(default_factory=list)
    hidden_states: list = field(default_factory=list)
    logits: Tensor | None = None


class TransformerModel:
    """Encoder with learned positional embeddings and first-token pooling."""

    def __init__(self, config: TransformerConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._momentum: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(config.seed)
        d, f = config.hidden_size, config.ff_size

        def p(name, shape, zero=False):
            data = (
                np.zeros(shape)
                if zero
                else rng.normal(0.0, config.init_std, size=shape)
            )
            self.params[name] = Parameter(data, name)

        p("tok_emb", (config.vocab_size, d))
        p("pos_emb", (config.max_seq_len, d))
        for i in range(config.num_layers):
            for nm in ("wq", "wk", "wv", "wo"):
                p(f"layer{i}.{nm}", (d, d))
                p(f"layer{i}.{nm}_b", (d,), zero=True)
            p(f"layer{i}.ln1_g", (d,))
            self.params[f"layer{i}.ln1_g"].tensor.data[:] = 1.0
            p(f"layer{i}.ln1_b", (d,), zero=True)
            p(f"layer{i}.ff1", (d, f))
            p(f"layer{i}.ff1_b", (f,), zero=True)
            p(f"layer{i}.ff2", (f, d))
            p(f"layer{i}.ff2_b", (d,), zero=True)
            p(f"layer{i}.ln2_g", (d,))
            self.params[f"layer{i}.ln2_g"].tensor.data[:] = 1.0
            p(f"layer{i}.ln2_b", (d,), zero=True)
        p("cls_w", (d, config.num_classes))
        p("cls_b", (config.num_classes,), zero=True)

    def parameters(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _attention(self, x: Tensor, layer: int, trace: ActivationTrace) -> Tensor:
        cfg = self.config
        l = x.shape[0]
        h = cfg.num_heads
        dk = cfg.hidden_size // h
        P = self.params

        def proj(nm):
            y = T.add_rowvec(
                T.matmul(x, P[f"layer{layer}.{nm}"].tensor),
                P[f"layer{layer}.{nm}_b"].tensor,
            )
            y = T.reshape(y, (l, h, dk))
            return T.transpose(y, (1, 0, 2))  # (h, l, dk)

        q, k, v = proj("wq"), proj("wk"), proj("wv")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
        trace.attention_scores.append(scores)
        attn = T.softmax_row(scores)
        ctx = T.matmul(attn, v)  # (h, l, dk)
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (l, cfg.hidden_size))
        return T.add_rowvec(
            T.matmul(ctx, P[f"layer{layer}.wo"].tensor),
            P[f"layer{layer}.wo_b"].tensor,
        )

    def forward(self, tokens) -> tuple[Tensor, ActivationTrace]:
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ModelInputError("empty token sequence")
        if tokens.ndim != 1 or tokens.size > cfg.max_seq_len:
            raise ModelInputError(
                f"tokens must be 1-d of length <= {cfg.max_seq_len}"
            )
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ModelInputError(
                f"token id out of range [0, {cfg.vocab_size})"
            )
        P = self.params
        l = tokens.size
        emb = T.add(
            T.embedding_lookup(P["tok_emb"].tensor, tokens),
            T.embedding_lookup(P["pos_emb"].tensor, np.arange(l)),
        )
        trace = ActivationTrace(embeddings=emb)
        x = emb
        for i in range(cfg.num_layers):
            att = self._attention(x, i, trace)
            x = T.layer_norm(
                T.add(x, att), P[f"layer{i}.ln1_g"].tensor, P[f"layer{i}.ln1_b"].tensor
            )
            ff = T.add_rowvec(
                T.matmul(
                    T.gelu(
                        T.add_rowvec(
                            T.matmul(x, P[f"layer{i}.ff1"].tensor),
                            P[f"layer{i}.ff1_b"].tensor,
                        )
                    ),
                    P[f"layer{i}.ff2"].tensor,
                ),
                P[f"layer{i}.ff2_b"].tensor,
            )
            x = T.layer_norm(
                T.add(x, ff), P[f"layer{i}.ln2_g"].tensor, P[f"layer{i}.ln2_b"].tensor
            )
            trace.hidden_states.append(x)
        # first-token pooling via a constant selector row
        sel = np.zeros((1, l))
        sel[0, 0] = 1.0
        pooled = T.matmul(Tensor(sel), x)  # (1, d)
        logits = T.reshape(
            T.add_rowvec(T.matmul(pooled, P["cls_w"].tensor), P["cls_b"].tensor),
            (cfg.num_classes,),
        )
        trace.logits = logits
        return logits, trace

    def cross_entropy(self, logits: Tensor, label: int) -> Tensor:
        if not 0 <= label < self.config.num_classes:
            raise ModelInputError(
                f"label {label} out of range for {self.config.num_classes} classes"
            )
        onehot = np.zeros(self.config.num_classes)
        onehot[label] = 1.0
        picked = T.mul(T.log_softmax_row(logits), Tensor(onehot))
        return T.scale(T.tsum(picked), -1.0)

    def sgd_step(self, learning_rate: float, momentum: float = 0.9):
        """SGD-with-momentum update from accumulated grads; clears grads."""
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self._momentum.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
                self._momentum[name] = buf
            buf *= momentum
            buf += p.grad
            p.tensor.data -= learning_rate * buf
            p.zero_grad()

    def predict(self, tokens) -> int:
        logits, _ = self.forward(tokens)
        return int(np.argmax(logits.data))

    # checkpoint format: npz of parameter arrays plus a json config entry
    def save(self, path):
        arrays = {name: p.data for name, p in self.params.items()}
        arrays["__config__"] = np.frombuffer(
            json.dumps(asdict(self.config), sort_keys=True).encode(), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        with np.load(path) as data:
            cfg = TransformerConfig(**json.loads(bytes(data["__config__"]).decode()))
            model = cls(cfg)
            for name, p in model.params.items():
                if name not in data:
                    raise ModelInputError(f"checkpoint missing parameter {name}")
                if data[name].shape != p.data.shape:
                    raise ModelInputError(
                        f"checkpoint shape mismatch for {name}: "
                        f"{data[name].shape} vs {p.data.shape}"
                    )
                p.tensor.data[...] = data[name]
        return model


class SgdMomentum:
    """SGD with momentum over an explicit parameter list."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self._buffers):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            p.tensor.data -= self.learning_rate * buf
            p.zero_grad()


def train_step(model: TransformerModel, batch, labels, learning_rate: float) -> float:
    """One SGD-with-momentum step on mean cross-entropy; returns the loss."""
    if len(batch) == 0:
        raise ModelInputError("empty batch")
    losses = []
    for tokens, label in zip(batch, labels):
        logits, _ = model.forward(tokens)
        losses.append(model.cross_entropy(logits, int(label)))
    total = losses[0]
    for lo in losses[1:]:
        total = T.add(total, lo)
    mean_loss = T.scale(total, 1.0 / len(losses))
    value = mean_loss.item()
    T.backward(mean_loss)
    model.sgd_step(learning_rate)
    return value


def evaluate(model: TransformerModel, dataset) -> float:
    """Classification accuracy over (tokens, label) pairs."""
    correct = sum(model.predict(tokens) == label for tokens, label in dataset)
    return correct / len(dataset)
