"""Tiny neural autoregressive LM: a windowed MLP next-token predictor.

Position t is predicted from the embeddings of the previous
``context_window`` tokens (left-padded with a dedicated pad row at the
start of a block), concatenated and pushed through ``depth`` tanh layers
to a softmax over the vocabulary.  Everything is float64 numpy with
hand-written backprop, so gradients can be validated against central
finite differences and eval is a pure function of (parameters, block).

Training is plain SGD (optional momentum); the per-block mean NLLs a
training step returns are measured on the incoming parameters, before
the update.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..corpus import TokenBlock
from ..errors import ConfigError, CorruptionError, FormatError, TrainingError

CKPT_MAGIC = b"LFRT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int
    context_window: int = 8
    width: int = 32
    depth: int = 1
    learning_rate: float = 0.1
    momentum: float = 0.0
    eval_window: int | None = None  # M: score only the final M positions
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.context_window < 1:
            raise ConfigError("context_window must be >= 1")
        if self.width < 1 or self.depth < 1:
            raise ConfigError("width and depth must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.eval_window is not None and self.eval_window < 1:
            raise ConfigError("eval_window must be >= 1 when set")


class TinyLM:
    def __init__(self, config: TinyLMConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        V, w, H = config.vocab_size, config.context_window, config.width
        s = config.init_scale
        self.params: dict[str, np.ndarray] = {}
        self.params["emb"] = rng.normal(0.0, s, (V + 1, H))  # row V is the pad
        in_dim = w * H
        for i in range(config.depth):
            self.params[f"W{i}"] = rng.normal(0.0, s, (in_dim, H))
            self.params[f"b{i}"] = np.zeros(H)
            in_dim = H
        self.params["W_out"] = rng.normal(0.0, s, (H, V))
        self.params["b_out"] = np.zeros(V)
        self._velocity: dict[str, np.ndarray] | None = None

    @property
    def pad_id(self) -> int:
        return self.config.vocab_size

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward / backward ---------------------------------------------------

    def _contexts(self, tokens: np.ndarray) -> np.ndarray:
        """Window indices per predicted position: (B, L-1, w)."""
        B, L = tokens.shape
        w = self.config.context_window
        padded = np.concatenate(
            [np.full((B, w - 1), self.pad_id, dtype=np.int64), tokens[:, :-1].astype(np.int64)],
            axis=1,
        )
        return sliding_window_view(padded, w, axis=1)

    def _forward(self, tokens: np.ndarray):
        """Per-position NLLs over the scored window, plus the backprop cache.

        Only scored positions (all L-1, or the final eval_window M) flow
        through the network, so a small window cuts compute and memory
        proportionally.
        """
        B, L = tokens.shape
        if L < 2:
            raise TrainingError("blocks must have at least 2 tokens to predict")
        T = L - 1
        M = self.config.eval_window
        start = 0 if M is None or M >= T else T - M
        idx = self._contexts(tokens)[:, start:]
        h = self.params["emb"][idx].reshape(B, T - start, -1)
        activations = [h]
        for i in range(self.config.depth):
            h = np.tanh(h @ self.params[f"W{i}"] + self.params[f"b{i}"])
            activations.append(h)
        logits = h @ self.params["W_out"] + self.params["b_out"]
        zmax = logits.max(axis=-1, keepdims=True)
        logz = zmax + np.log(np.exp(logits - zmax).sum(axis=-1, keepdims=True))
        targets = tokens[:, 1 + start :].astype(np.int64)
        logp = np.take_along_axis(logits - logz, targets[..., None], axis=-1)[..., 0]
        nll = -logp
        cache = (idx, activations, logits, logz, targets)
        return nll, cache

    def _backward(self, cache, position_weight: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(position_weight * nll) w.r.t. every parameter."""
        idx, activations, logits, logz, targets = cache
        B, T, _ = logits.shape
        probs = np.exp(logits - logz)
        dlogits = probs * position_weight[..., None]
        dlogits[np.arange(B)[:, None], np.arange(T)[None, :], targets] -= position_weight
        grads: dict[str, np.ndarray] = {}
        h_last = activations[-1]
        grads["W_out"] = np.einsum("bth,btv->hv", h_last, dlogits)
        grads["b_out"] = dlogits.sum(axis=(0, 1))
        dh = dlogits @ self.params["W_out"].T
        for i in range(self.config.depth - 1, -1, -1):
            da = dh * (1.0 - activations[i + 1] ** 2)  # tanh'
            grads[f"W{i}"] = np.einsum("bti,bth->ih", activations[i], da)
            grads[f"b{i}"] = da.sum(axis=(0, 1))
            dh = da @ self.params[f"W{i}"].T
        H = self.config.width
        demb = np.zeros_like(self.params["emb"])
        np.add.at(demb, idx.reshape(-1), dh.reshape(-1, H))
        grads["emb"] = demb
        return grads

    def loss_and_grads(self, tokens: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean NLL over scored positions and its gradients (no update)."""
        tokens = np.atleast_2d(tokens)
        nll, cache = self._forward(tokens)
        weight = np.full(nll.shape, 1.0 / nll.size)
        loss = float((nll * weight).sum())
        return loss, self._backward(cache, weight)

    # -- learner contract -------------------------------------------------------

    def train_on(self, block_ids, tokens: np.ndarray, step: int = 0) -> np.ndarray:
        """One SGD step on the batch; returns pre-update mean NLL per block."""
        tokens = np.atleast_2d(tokens)
        nll, cache = self._forward(tokens)
        per_block = nll.mean(axis=1)
        if not np.all(np.isfinite(per_block)):
            raise TrainingError(f"non-finite loss at step {step}")

        weight = np.full(nll.shape, 1.0 / nll.size)
        grads = self._backward(cache, weight)

        lr, mu = self.config.learning_rate, self.config.momentum
        if mu > 0:
            if self._velocity is None:
                self._velocity = {k: np.zeros_like(p) for k, p in self.params.items()}
            for k, g in grads.items():
                self._velocity[k] = mu * self._velocity[k] - lr * g
                self.params[k] += self._velocity[k]
        else:
            for k, g in grads.items():
                self.params[k] -= lr * g
        return per_block

    def eval_nll(self, block: TokenBlock | np.ndarray) -> np.ndarray:
        """Per-token NLLs for one block; pure in (parameters, block)."""
        tokens = block.tokens if isinstance(block, TokenBlock) else np.asarray(block)
        nll, _ = self._forward(np.atleast_2d(tokens))
        return nll[0].copy()

    def eval_mean_nlls(self, block_ids, tokens: np.ndarray) -> np.ndarray:
        tokens = np.atleast_2d(tokens)
        nll, _ = self._forward(tokens)
        return nll.mean(axis=1)

    def hidden_states(self, tokens: np.ndarray) -> np.ndarray:
        """Final hidden-layer activations per position, shape (L-1, width)."""
        tokens = np.atleast_2d(np.asarray(tokens))
        idx = self._contexts(tokens)
        h = self.params["emb"][idx].reshape(tokens.shape[0], tokens.shape[1] - 1, -1)
        for i in range(self.config.depth):
            h = np.tanh(h @ self.params[f"W{i}"] + self.params[f"b{i}"])
        return h[0]

    # -- checkpoints --------------------------------------------------------------

    def save(self, path: Path | str) -> None:
        names = sorted(self.params)
        header = {
            "version": CKPT_VERSION,
            "config": asdict(self.config),
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        blob = json.dumps(header).encode()
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "TinyLM":
        data = Path(path).read_bytes()
        if len(data) < 12 or data[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a learner checkpoint")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[12 : 12 + hlen].decode())
        config = TinyLMConfig(**header["config"])
        model = cls(config)
        off = 12 + hlen
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            nbytes = int(np.prod(shape)) * 8
            if off + nbytes > len(data):
                raise CorruptionError(f"{path}: truncated parameter block")
            model.params[spec["name"]] = (
                np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape).copy()
            )
            off += nbytes
        if off != len(data):
            raise CorruptionError(f"{path}: {len(data) - off} trailing bytes")
        return model
