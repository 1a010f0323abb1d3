"""Objectives, hand-derived backpropagation, optimizers and the training loop.

Two objectives are supported:

* ``autoregressive``: position ``i`` predicts token ``i + 1`` under a causal
  attention mask.
* ``bidirectional``: a random subset of positions is replaced by the mask token
  and predicted from the full (unmasked-attention) corrupted sequence. Only
  mask corruption is used; there is no random-token / keep split.

The loss is the mean cross-entropy over predicted positions in the batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import scores
from .errors import EmptyInputError
from .transformer import (
    ForwardTrace,
    ModelParams,
    merge_heads,
    split_heads,
    compose_wqk,
    forward,
    gelu_grad,
)

log = logging.getLogger(__name__)

Gradients = ModelParams

_OBJECTIVE_ALIASES = {
    "autoregressive": "autoregressive",
    "ar": "autoregressive",
    "causal": "autoregressive",
    "bidirectional": "bidirectional",
    "mlm": "bidirectional",
    "masked": "bidirectional",
}


def normalize_objective(name: str) -> str:
    try:
        return _OBJECTIVE_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}") from None


# --------------------------------------------------------------------------
# tokenization and batching


class CharTokenizer:
    """Byte-level vocabulary over the bytes present in a text, plus a mask token.

    Ids ``0 .. n-1`` map to the sorted distinct bytes; the mask token is id ``n``.
    """

    def __init__(self, byte_values: Sequence[int]):
        self.byte_values = sorted(set(int(b) for b in byte_values))
        self._index = {b: i for i, b in enumerate(self.byte_values)}
        self.mask_id = len(self.byte_values)

    @classmethod
    def from_text(cls, text: str | bytes) -> "CharTokenizer":
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        if not data:
            raise EmptyInputError("cannot build a vocabulary from an empty corpus")
        return cls(set(data))

    @property
    def vocab_size(self) -> int:
        return len(self.byte_values) + 1

    def encode(self, text: str | bytes) -> np.ndarray:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        try:
            return np.fromiter((self._index[b] for b in data), dtype=np.int64, count=len(data))
        except KeyError as exc:
            raise ValueError(f"byte {exc.args[0]} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            out += b"?" if i == self.mask_id else bytes([self.byte_values[i]])
        return out.decode("utf-8", errors="replace")


def char_tokenizer(text: str | bytes) -> tuple[np.ndarray, CharTokenizer]:
    """Encode ``text`` and return ``(token_ids, tokenizer)``."""
    tok = CharTokenizer.from_text(text)
    return tok.encode(text), tok


def make_windows(sequence: np.ndarray, seq_len: int) -> np.ndarray:
    """Cut ``sequence`` into ``floor(len / seq_len)`` non-overlapping windows."""
    sequence = np.asarray(sequence, dtype=np.int64)
    count = len(sequence) // seq_len
    if count == 0:
        raise EmptyInputError(f"corpus of {len(sequence)} tokens is shorter than seq_len {seq_len}")
    return sequence[: count * seq_len].reshape(count, seq_len)


def make_batches(sequence: np.ndarray, seq_len: int, batch_size: int,
                 seed: int | np.random.Generator = 0) -> list[np.ndarray]:
    """One epoch of shuffled ``(batch_size, seq_len)`` batches.

    A trailing partial batch is dropped unless it is the only one.
    """
    windows = make_windows(sequence, seq_len)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    n_full = len(windows) // batch_size
    if n_full == 0:
        return [windows[order]]
    return [windows[order[i * batch_size:(i + 1) * batch_size]] for i in range(n_full)]


# --------------------------------------------------------------------------
# objectives


@dataclass
class Batch:
    inputs: np.ndarray    # (B, N) token ids fed to the model
    targets: np.ndarray   # (B, N) target id per position, -1 where not predicted
    causal: bool

    @property
    def num_predictions(self) -> int:
        return int((self.targets >= 0).sum())


def mask_tokens(tokens, mask_prob: float, mask_id: int,
                seed: int | np.random.Generator = 0) -> tuple[np.ndarray, np.ndarray]:
    """Select each position independently with probability ``mask_prob``.

    Returns ``(masked_tokens, selected_indices)``. If the draw selects nothing,
    one uniformly chosen position is forced so every sequence contributes.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in (0, 1), got {mask_prob}")
    tokens = np.asarray(tokens, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    selected = rng.random(tokens.shape[0]) < mask_prob
    if not selected.any():
        selected[rng.integers(tokens.shape[0])] = True
    masked = tokens.copy()
    masked[selected] = mask_id
    return masked, np.flatnonzero(selected)


def autoregressive_batch(sequences) -> Batch:
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    targets = np.full_like(seqs, -1)
    targets[:, :-1] = seqs[:, 1:]
    return Batch(seqs, targets, causal=True)


def bidirectional_batch(sequences, mask_prob: float, mask_id: int,
                        rng: np.random.Generator) -> Batch:
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    inputs = seqs.copy()
    targets = np.full_like(seqs, -1)
    for b in range(seqs.shape[0]):
        inputs[b], idx = mask_tokens(seqs[b], mask_prob, mask_id, rng)
        targets[b, idx] = seqs[b, idx]
    return Batch(inputs, targets, causal=False)


def make_objective_batch(sequences, objective: str, mask_prob: float = 0.15,
                         mask_id: int | None = None,
                         rng: np.random.Generator | None = None) -> Batch:
    objective = normalize_objective(objective)
    if objective == "autoregressive":
        return autoregressive_batch(sequences)
    if mask_id is None:
        raise ValueError("bidirectional objective needs a mask_id")
    return bidirectional_batch(sequences, mask_prob, mask_id,
                               rng if rng is not None else np.random.default_rng(0))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over positions with ``target >= 0`` and its logit gradient."""
    valid = targets >= 0
    count = int(valid.sum())
    if count == 0:
        raise EmptyInputError("batch has no predicted positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -float(picked[valid].sum()) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, safe_t[..., None],
                      np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1.0, axis=-1)
    grad *= valid[..., None] / count
    return loss, grad


# --------------------------------------------------------------------------
# backward pass


@dataclass
class LayerBackward:
    """Per-layer gradients exposed for the gradient lab.

    ``dO``: loss gradient at the concatenated head outputs ``A_h X W_v,h``.
    ``dA``: gradient w.r.t. the normalized attention weights.
    ``dS``: gradient w.r.t. the scaled raw scores (after masking/softmax backprop).
    """
    dO: np.ndarray   # (B, N, d)
    dA: np.ndarray   # (B, H, N, N)
    dS: np.ndarray   # (B, H, N, N)


def zeros_like_params(params: ModelParams) -> Gradients:
    g = params.copy()
    for name, value in params.named_tensors():
        g.set(name, np.zeros_like(value))
    return g


def backward(params: ModelParams, trace: ForwardTrace,
             dlogits: np.ndarray) -> tuple[Gradients, list[LayerBackward]]:
    """Reverse-mode pass through the full model given ``dL/dlogits``."""
    cfg = params.config
    H = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.model_dim)
    grads = zeros_like_params(params)
    hooks: list[LayerBackward] = [None] * len(params.layers)  # type: ignore[list-item]

    X_L = trace.X[-1]
    grads.W_u = np.einsum("bnd,bnv->dv", X_L, dlogits)
    dX = dlogits @ params.W_u.T

    for l in range(len(params.layers) - 1, -1, -1):
        lp, lt, gl = params.layers[l], trace.layers[l], grads.layers[l]
        # MLP residual: X_next = X_hat + gelu(X_hat W1) W2
        gl.W_2 = np.einsum("bnf,bnd->fd", lt.H_act, dX)
        dH = (dX @ lp.W_2.T) * gelu_grad(lt.H_pre)
        gl.W_1 = np.einsum("bnd,bnf->df", lt.X_hat, dH)
        dX_hat = dX + dH @ lp.W_1.T
        # attention residual: X_hat = X + O [W_o]
        if lp.W_o is not None:
            gl.W_o = np.einsum("bni,bnj->ij", lt.O, dX_hat)
            dO = dX_hat @ lp.W_o.T
        else:
            dO = dX_hat
        dOh = split_heads(dO, H)
        dA = dOh @ lt.V.transpose(0, 1, 3, 2)
        dV = lt.A.transpose(0, 1, 3, 2) @ dOh
        dS = lt.A * (dA - np.sum(dA * lt.A, axis=-1, keepdims=True))
        dQ = (dS @ lt.K) * scale
        dK = (dS.transpose(0, 1, 3, 2) @ lt.Q) * scale
        dQm, dKm, dVm = merge_heads(dQ), merge_heads(dK), merge_heads(dV)
        X = lt.X_in
        gl.W_q = np.einsum("bni,bnj->ij", X, dQm)
        gl.W_k = np.einsum("bni,bnj->ij", X, dKm)
        gl.W_v = np.einsum("bni,bnj->ij", X, dVm)
        dX = dX_hat + dQm @ lp.W_q.T + dKm @ lp.W_k.T + dVm @ lp.W_v.T
        hooks[l] = LayerBackward(dO, dA, dS)

    tokens = trace.tokens
    n = tokens.shape[1]
    grads.W_p = np.zeros_like(params.W_p)
    grads.W_p[:n] = dX.sum(axis=0)
    grads.W_e = np.zeros_like(params.W_e)
    np.add.at(grads.W_e, tokens.reshape(-1), dX.reshape(-1, dX.shape[-1]))
    return grads, hooks


def loss_and_grads(params: ModelParams, batch: Batch,
                   return_hooks: bool = False):
    """Mean cross-entropy of ``batch`` and exact gradients for every parameter.

    With ``return_hooks=True`` also returns the per-layer :class:`LayerBackward`
    list and the forward trace.
    """
    trace = forward(params, batch.inputs, causal=batch.causal)
    loss, dlogits = cross_entropy(trace.logits, batch.targets)
    grads, hooks = backward(params, trace, dlogits)
    if return_hooks:
        return loss, grads, hooks, trace
    return loss, grads


def batch_loss(params: ModelParams, batch: Batch) -> float:
    trace = forward(params, batch.inputs, causal=batch.causal)
    return cross_entropy(trace.logits, batch.targets)[0]


def gradient_check(params: ModelParams, batch: Batch, h: float = 1e-5) -> dict[str, float]:
    """Compare :func:`loss_and_grads` with central finite differences.

    Returns per tensor ``max|analytic - numeric| / max|numeric|``. Costs two
    forward passes per scalar parameter, so keep the model tiny.
    """
    _, grads = loss_and_grads(params, batch)
    errors = {}
    for name, value in params.named_tensors():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up = batch_loss(params, batch)
            value[idx] = old - h
            down = batch_loss(params, batch)
            value[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        scale = float(np.abs(numeric).max())
        diff = float(np.abs(grads.get(name) - numeric).max())
        errors[name] = diff / scale if scale > 0 else diff
    return errors



# --------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr = lr

    def step(self, params: ModelParams, grads: Gradients, lr_scale: float = 1.0) -> None:
        for name, g in grads.named_tensors():
            params.set(name, params.get(name) - self.lr * lr_scale * g)


class Adam:
    """Adam with bias correction; ``weight_decay`` is decoupled (AdamW)."""

    def __init__(self, lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Gradients, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        lr = self.lr * lr_scale
        for name, g in grads.named_tensors():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params.get(name)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + lr * self.weight_decay * p
            params.set(name, p - update)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainingConfig:
    objective: str = "bidirectional"
    mask_prob: float = 0.15
    optimizer: str = "adam"
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    steps: int = 1000
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0
    score_every: int = 100
    gamma: float = scores.DEFAULT_GAMMA
    mask_id: int | None = None

    def __post_init__(self):
        self.objective = normalize_objective(self.objective)
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("batch_size", "seq_len", "score_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("steps and warmup_steps must be >= 0")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr)
        return Adam(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class Checkpoint:
    step: int
    loss: float
    report: scores.ScoreReport


@dataclass
class TrainingLog:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def csv_rows(self) -> list[tuple[int, float, int, float, float]]:
        return [(c.step, c.loss, p.layer, p.s, p.d)
                for c in self.checkpoints for p in c.report.per_layer]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "checkpoints": [{"step": c.step, "loss": c.loss, "report": c.report.to_dict()}
                            for c in self.checkpoints],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def score_model(params: ModelParams, gamma: float) -> scores.ScoreReport:
    return scores.layer_summary([compose_wqk(params, l) for l in range(len(params.layers))],
                                gamma)


def _epoch_stream(corpus: np.ndarray, cfg: TrainingConfig,
                  rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    epoch = 0
    while True:
        for batch in make_batches(corpus, cfg.seq_len, cfg.batch_size, rng):
            yield epoch, batch
        epoch += 1


Callback = Callable[[Checkpoint, ModelParams], None]


def train(params: ModelParams, corpus, config: TrainingConfig,
          callbacks: Sequence[Callback] = ()) -> TrainingLog:
    """Train ``params`` in place and return the checkpoint log.

    A checkpoint is logged at step 0 (loss of the first batch before any
    update) and after every ``score_every`` updates plus the final one. Its
    ``loss`` is the mean pre-update batch loss over the steps it covers.
    Callbacks receive the checkpoint and a deep copy of the parameters.
    ``epoch_losses`` holds the mean batch loss of every completed epoch.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise EmptyInputError("empty corpus")
    mask_id = config.mask_id if config.mask_id is not None else params.config.vocab_size - 1
    shuffle_ss, mask_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    mask_rng = np.random.default_rng(mask_ss)
    opt = config.make_optimizer()
    log_out = TrainingLog(config=asdict(config))

    def checkpoint(step: int, loss: float) -> None:
        cp = Checkpoint(step, loss, score_model(params, config.gamma))
        log_out.checkpoints.append(cp)
        for cb in callbacks:
            cb(cp, params.copy())

    stream = _epoch_stream(corpus, config, shuffle_rng)
    window: list[float] = []
    epoch_acc: list[float] = []
    current_epoch = 0
    if config.steps == 0:
        _, seqs = next(stream)
        batch = make_objective_batch(seqs, config.objective, config.mask_prob, mask_id, mask_rng)
        checkpoint(0, batch_loss(params, batch))
        return log_out

    for step in range(config.steps):
        epoch, seqs = next(stream)
        if epoch != current_epoch:
            log_out.epoch_losses.append(float(np.mean(epoch_acc)))
            epoch_acc = []
            current_epoch = epoch
        batch = make_objective_batch(seqs, config.objective, config.mask_prob, mask_id, mask_rng)
        loss, grads = loss_and_grads(params, batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if step == 0:
            checkpoint(0, loss)
        window.append(loss)
        epoch_acc.append(loss)
        lr_scale = min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else 1.0
        opt.step(params, grads, lr_scale)
        done = step + 1
        if done % config.score_every == 0 or done == config.steps:
            checkpoint(done, float(np.mean(window)))
            log.debug("step %d loss %.4f", done, log_out.checkpoints[-1].loss)
            window = []
    return log_out


def speedup(candidate_epoch_losses: Sequence[float],
            baseline_epoch_losses: Sequence[float]) -> float | None:
    """Fraction of epochs saved by ``candidate`` to reach the baseline's final loss.

    ``(E - e) / E`` where ``E`` is the baseline's number of epochs and ``e`` is
    the first (1-based) epoch at which the candidate's loss is at or below the
    baseline's final loss. ``None`` if the candidate never gets there.
    """
    if not baseline_epoch_losses:
        raise EmptyInputError("baseline has no completed epochs")
    target = baseline_epoch_losses[-1]
    total = len(baseline_epoch_losses)
    for i, loss in enumerate(candidate_epoch_losses[:total], start=1):
        if loss <= target:
            return (total - i) / total
    return None


# --------------------------------------------------------------------------
# synthetic corpus

_NOUNS = ["cat", "dog", "bird", "fish", "tree", "river", "house", "child", "king", "queen",
          "stone", "road", "ship", "horse", "garden", "window"]
_VERBS = ["sees", "likes", "finds", "takes", "follows", "wants", "holds", "paints"]
_ADJS = ["red", "old", "small", "quiet", "green", "happy", "dark", "tall"]
_PREPS = ["near", "under", "behind", "with"]
_DETS = ["the", "a", "every"]


def synthetic_corpus(n_bytes: int = 100_000, seed: int = 0) -> str:
    """Deterministic English-like text of exactly ``n_bytes`` characters.

    Sentences follow ``det [adj] noun verb det [adj] noun [prep det noun] .``
    with word choices drawn from fixed lexicons; adjective and noun choices
    are coupled so tokens carry predictive structure in both directions.
    """
    rng = np.random.default_rng(seed)
    noun_adj = {n: rng.choice(len(_ADJS), size=2, replace=False) for n in _NOUNS}

    def phrase() -> list[str]:
        noun = _NOUNS[rng.integers(len(_NOUNS))]
        words = [_DETS[rng.integers(len(_DETS))]]
        if rng.random() < 0.6:
            words.append(_ADJS[noun_adj[noun][rng.integers(2)]])
        words.append(noun)
        return words

    parts: list[str] = []
    size = 0
    while size < n_bytes:
        words = phrase() + [_VERBS[rng.integers(len(_VERBS))]] + phrase()
        if rng.random() < 0.4:
            words += [_PREPS[rng.integers(len(_PREPS))]] + phrase()
        sentence = " ".join(words) + ". "
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts)[:n_bytes]
