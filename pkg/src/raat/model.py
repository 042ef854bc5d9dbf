"""A tiny autoregressive language model with exact analytic gradients.

The model embeds each token, concatenates the embedding with the running
mean of all embeddings so far (a causal bag-of-context), pushes that through
one tanh layer, and projects to token logits. A second linear head over the
final input position's hidden state classifies which of the four context
kinds the prompt carries. Everything is float64 and deterministic; gradients
are hand-derived and verified against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError
from .seeding import rng

RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "[SEP]")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)
N_KINDS = 4

CHECKPOINT_VERSION = 1
# Serialization order for parameter arrays; also the canonical flattening
# order for norms and finite differences.
PARAM_FIELDS = ("emb", "w1", "b1", "w2", "b2", "wc", "bc")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    """Token <-> id table. Ids 0-4 are reserved; the rest follow corpus order."""

    tokens: list[str]

    def __post_init__(self) -> None:
        if list(self.tokens[: len(RESERVED_TOKENS)]) != list(RESERVED_TOKENS):
            raise DataError("vocab must start with the reserved tokens")
        self.index: dict[str, int] = {t.lower(): i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i >= len(RESERVED_TOKENS))


def build_vocab(texts: Iterable[str], min_freq: int = 1) -> Vocab:
    """Collect corpus tokens in first-appearance order, dropping rare ones."""
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    reserved_lower = {t.lower() for t in RESERVED_TOKENS}
    kept = [
        tok for tok, n in counts.items() if n >= min_freq and tok not in reserved_lower
    ]
    return Vocab(tokens=list(RESERVED_TOKENS) + kept)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ModelParams:
    emb: np.ndarray  # (V, d)   token embeddings
    w1: np.ndarray   # (h, 2d)  hidden layer over [e_t ; mean(e_1..e_t)]
    b1: np.ndarray   # (h,)
    w2: np.ndarray   # (V, h)   token logits
    b2: np.ndarray   # (V,)
    wc: np.ndarray   # (4, h)   context-kind logits at the last input position
    bc: np.ndarray   # (4,)

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def add_scaled(self, other: "ModelParams", scale: float) -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs

    def scale(self, factor: float) -> None:
        for a in self.arrays():
            a *= factor

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def allfinite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(vocab_size: int, embed_dim: int, hidden_dim: int, seed: int) -> ModelParams:
    """Weights ~ U(-0.1, 0.1) drawn in a fixed order; biases zero."""
    gen = rng(seed, "init")

    def u(*shape: int) -> np.ndarray:
        return gen.uniform(-0.1, 0.1, size=shape)

    return ModelParams(
        emb=u(vocab_size, embed_dim),
        w1=u(hidden_dim, 2 * embed_dim),
        b1=np.zeros(hidden_dim),
        w2=u(vocab_size, hidden_dim),
        b2=np.zeros(vocab_size),
        wc=u(N_KINDS, hidden_dim),
        bc=np.zeros(N_KINDS),
    )


# ---------------------------------------------------------------------------
# Forward / backward


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class ForwardTrace:
    """Every intermediate needed to backpropagate exactly."""

    ids: np.ndarray     # (T,) fed token ids
    e: np.ndarray       # (T, d) embeddings
    m: np.ndarray       # (T, 2d) [e_t ; causal mean]
    hid: np.ndarray     # (T, h) tanh activations
    logits: np.ndarray  # (T, V) next-token logits


def run_forward(params: ModelParams, ids: Sequence[int]) -> ForwardTrace:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot run the model on an empty sequence")
    e = params.emb[idx]                                   # (T, d)
    mu = np.cumsum(e, axis=0) / np.arange(1, idx.size + 1)[:, None]
    m = np.concatenate([e, mu], axis=1)                   # (T, 2d)
    hid = np.tanh(m @ params.w1.T + params.b1)            # (T, h)
    logits = hid @ params.w2.T + params.b2                # (T, V)
    return ForwardTrace(ids=idx, e=e, m=m, hid=hid, logits=logits)


def teacher_forced_ids(input_ids: Sequence[int], answer_ids: Sequence[int]) -> list[int]:
    """The fed sequence: prompt plus all answer tokens except the last.

    The final answer token is only ever a prediction target, so it is never
    fed back in.
    """
    if not input_ids:
        raise ValueError("input_ids must be non-empty")
    if not answer_ids:
        raise ValueError("answer_ids must be non-empty")
    return list(input_ids) + list(answer_ids[:-1])


def gen_loss_from_trace(
    trace: ForwardTrace, n_input: int, answer_ids: Sequence[int]
) -> float:
    """Mean negative log-likelihood of the answer tokens."""
    a = len(answer_ids)
    positions = np.arange(n_input - 1, n_input - 1 + a)
    logp = log_softmax(trace.logits[positions])
    return float(-logp[np.arange(a), np.asarray(answer_ids)].mean())


def cls_logits_from_trace(params: ModelParams, trace: ForwardTrace, n_input: int) -> np.ndarray:
    return params.wc @ trace.hid[n_input - 1] + params.bc


def cls_loss_from_logits(cls_logits: np.ndarray, kind_index: int) -> float:
    return float(-log_softmax(cls_logits)[kind_index])


@dataclass
class SampleForward:
    """One prompt+answer pass with both losses on hand."""

    trace: ForwardTrace
    n_input: int
    answer_ids: list[int]
    kind_index: int
    gen_loss: float
    cls_logits: np.ndarray
    cls_loss: float


def forward_sample(
    params: ModelParams,
    input_ids: Sequence[int],
    answer_ids: Sequence[int],
    kind_index: int,
) -> SampleForward:
    trace = run_forward(params, teacher_forced_ids(input_ids, answer_ids))
    n_input = len(input_ids)
    cls_logits = cls_logits_from_trace(params, trace, n_input)
    return SampleForward(
        trace=trace,
        n_input=n_input,
        answer_ids=list(answer_ids),
        kind_index=kind_index,
        gen_loss=gen_loss_from_trace(trace, n_input, answer_ids),
        cls_logits=cls_logits,
        cls_loss=cls_loss_from_logits(cls_logits, kind_index),
    )


def accumulate_gradients(
    params: ModelParams,
    sample: SampleForward,
    grads: ModelParams,
    w_gen: float,
    w_cls: float,
) -> None:
    """Add d(w_gen * gen_loss + w_cls * cls_loss)/dθ into ``grads``.

    The causal-mean path means embedding k receives mean-gradient mass from
    every later position; that is the suffix cumulative sum below.
    """
    trace = sample.trace
    t_len, vocab = trace.logits.shape
    d = params.embed_dim
    a = len(sample.answer_ids)
    n_input = sample.n_input

    dlogits = np.zeros((t_len, vocab))
    if w_gen != 0.0:
        positions = np.arange(n_input - 1, n_input - 1 + a)
        p = softmax(trace.logits[positions])
        p[np.arange(a), np.asarray(sample.answer_ids)] -= 1.0
        dlogits[positions] = (w_gen / a) * p

    dh = dlogits @ params.w2  # (T, h)

    if w_cls != 0.0:
        pc = softmax(sample.cls_logits)
        pc[sample.kind_index] -= 1.0
        dcls = w_cls * pc
        grads.wc += np.outer(dcls, trace.hid[n_input - 1])
        grads.bc += dcls
        dh[n_input - 1] += params.wc.T @ dcls

    grads.w2 += dlogits.T @ trace.hid
    grads.b2 += dlogits.sum(axis=0)

    da = dh * (1.0 - trace.hid**2)  # tanh'
    grads.w1 += da.T @ trace.m
    grads.b1 += da.sum(axis=0)

    dm = da @ params.w1  # (T, 2d)
    de = dm[:, :d].copy()
    dmu_scaled = dm[:, d:] / np.arange(1, t_len + 1)[:, None]
    de += np.cumsum(dmu_scaled[::-1], axis=0)[::-1]
    np.add.at(grads.emb, trace.ids, de)


def generate(
    params: ModelParams, input_ids: Sequence[int], max_len: int = 8
) -> list[int]:
    """Greedy decoding until the end token or the length cap."""
    ids = list(input_ids)
    out: list[int] = []
    for _ in range(max_len):
        trace = run_forward(params, ids)
        nxt = int(np.argmax(trace.logits[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def prompt_hidden(params: ModelParams, input_ids: Sequence[int]) -> np.ndarray:
    """Hidden state at the last input position (the classification probe)."""
    return run_forward(params, input_ids).hid[-1].copy()


def classify(params: ModelParams, input_ids: Sequence[int]) -> np.ndarray:
    trace = run_forward(params, input_ids)
    return params.wc @ trace.hid[-1] + params.bc


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, vocab: Vocab, seed: int) -> None:
    """Two JSON header lines (shape, vocab) then raw little-endian float64."""
    if len(vocab) != params.vocab_size:
        raise DataError("vocab size does not match the embedding table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "d": params.embed_dim,
        "h": params.hidden_dim,
        "V": params.vocab_size,
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(
            json.dumps(vocab.tokens[len(RESERVED_TOKENS):], ensure_ascii=False).encode("utf-8")
            + b"\n"
        )
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _param_shapes(v: int, d: int, h: int) -> list[tuple[int, ...]]:
    return [(v, d), (h, 2 * d), (h,), (v, h), (v,), (N_KINDS, h), (N_KINDS,)]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Vocab, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    try:
        head_end = blob.index(b"\n")
        vocab_end = blob.index(b"\n", head_end + 1)
        header = json.loads(blob[:head_end])
        extra_tokens = json.loads(blob[head_end + 1 : vocab_end])
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header") from exc
    if not isinstance(header, dict) or header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint format_version "
            f"{header.get('format_version') if isinstance(header, dict) else header!r}"
        )
    try:
        seed = int(header["seed"])
        v, d, h = int(header["V"]), int(header["d"]), int(header["h"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: checkpoint header missing shape fields") from exc
    if not isinstance(extra_tokens, list):
        raise DataError(f"{path}: checkpoint vocab line must be a list")
    vocab = Vocab(tokens=list(RESERVED_TOKENS) + [str(t) for t in extra_tokens])
    if len(vocab) != v:
        raise DataError(f"{path}: header V={v} but vocab holds {len(vocab)} tokens")

    shapes = _param_shapes(v, d, h)
    need = 8 * sum(int(np.prod(s)) for s in shapes)
    payload = blob[vocab_end + 1 :]
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    arrays: list[np.ndarray] = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += count * 8
    params = ModelParams(*arrays)
    if not params.allfinite():
        raise DataError(f"{path}: checkpoint holds non-finite values")
    return params, vocab, seed


# ---------------------------------------------------------------------------
# Gradient verification


def combined_loss(
    params: ModelParams,
    input_ids: Sequence[int],
    answer_ids: Sequence[int],
    kind_index: int,
    w_gen: float = 1.0,
    w_cls: float = 1.0,
) -> float:
    sample = forward_sample(params, input_ids, answer_ids, kind_index)
    return w_gen * sample.gen_loss + w_cls * sample.cls_loss


def finite_difference(
    params: ModelParams, loss_fn: Callable[[ModelParams], float], eps: float = 1e-6
) -> ModelParams:
    """Central differences over every entry of every parameter array."""
    grads = params.zeros_like()
    for arr, out in zip(params.arrays(), grads.arrays()):
        flat = arr.reshape(-1)
        gflat = out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(params)
            flat[i] = orig - eps
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return grads


def max_relative_error(analytic: ModelParams, numeric: ModelParams) -> float:
    """max |a - f| / max(1, |f|) over all parameter entries."""
    worst = 0.0
    for a, f in zip(analytic.arrays(), numeric.arrays()):
        denom = np.maximum(1.0, np.abs(f))
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def gradient_check(
    seed: int = 0,
    embed_dim: int = 4,
    hidden_dim: int = 4,
    eps: float = 1e-6,
    n_cases: int = 3,
) -> float:
    """Analytic vs. finite-difference gradients on a miniature model.

    Returns the worst relative error across a few random prompt/answer/kind
    cases with both loss terms active.
    """
    vocab_size = len(RESERVED_TOKENS) + 7
    params = init_params(vocab_size, embed_dim, hidden_dim, seed)
    gen = rng(seed, "gradcheck")
    worst = 0.0
    for case in range(n_cases):
        n_prompt = int(gen.integers(2, 6))
        body = [int(t) for t in gen.integers(5, vocab_size, size=n_prompt)]
        input_ids = [BOS_ID] + body + [SEP_ID]
        n_answer = int(gen.integers(1, 3))
        answer_ids = [int(t) for t in gen.integers(5, vocab_size, size=n_answer)] + [EOS_ID]
        kind_index = int(gen.integers(N_KINDS))

        sample = forward_sample(params, input_ids, answer_ids, kind_index)
        analytic = params.zeros_like()
        accumulate_gradients(params, sample, analytic, w_gen=1.0, w_cls=1.0)
        numeric = finite_difference(
            params,
            lambda p: combined_loss(p, input_ids, answer_ids, kind_index),
            eps=eps,
        )
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
