"""Minimal decoder-only transformer with hand-written reverse-mode gradients.

Pre-norm blocks (RMS norm, multi-head causal attention with a pluggable
rotary variant, GELU MLP), tied input/output embedding, float64 everywhere.
A fixed seed pins initialization and the data stream, so training traces and
final weights are reproducible bit for bit.

The rotary variant used at inference may differ from the one trained with:
``forward``/``generate`` accept an override, which is how a model trained
with the plain encoding is evaluated with a rescaled one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionRecord, causal_softmax
from .rope import (
    Ntk,
    Pi,
    Rope,
    RopeConfig,
    RotaryVariant,
    Yarn,
    logit_scale,
    rotate_block,
)
from .seeding import derive_seed
from .tasks import SyntheticTask, sample_batch

__all__ = [
    "ModelConfig",
    "TinyModel",
    "TrainingDiverged",
    "param_shapes",
    "init_model",
    "zero_model",
    "forward",
    "loss_and_gradients",
    "train",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
]

RMS_EPS = 1e-6
CHECKPOINT_MAGIC = b"TMDL"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss stayed above 10x its initial value for 100 consecutive steps."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layer_count: int
    head_count: int
    head_dim: int
    mlp_ratio: int
    train_context_length: int
    variant: RotaryVariant
    seed: int
    inference_cap: int = 8192

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.head_dim % 2 != 0 or self.head_dim < 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if self.train_context_length < 8:
            raise ValueError(
                f"train_context_length must be >= 8, got {self.train_context_length}"
            )
        for name in ("layer_count", "head_count", "mlp_ratio", "inference_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")
        if self.variant.config.head_dim != self.head_dim:
            raise ValueError(
                f"variant head_dim {self.variant.config.head_dim} != model head_dim {self.head_dim}"
            )

    @property
    def d_model(self) -> int:
        return self.head_count * self.head_dim

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d_model


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter tensors in declaration order (the checkpoint block order)."""
    d, h = config.d_model, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, d)}
    for l in range(config.layer_count):
        shapes[f"layer{l}.attn_norm"] = (d,)
        shapes[f"layer{l}.wq"] = (d, d)
        shapes[f"layer{l}.wk"] = (d, d)
        shapes[f"layer{l}.wv"] = (d, d)
        shapes[f"layer{l}.wo"] = (d, d)
        shapes[f"layer{l}.mlp_norm"] = (d,)
        shapes[f"layer{l}.w_up"] = (d, h)
        shapes[f"layer{l}.w_down"] = (h, d)
    shapes["final_norm"] = (d,)
    return shapes


@dataclass
class TinyModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TinyModel":
        return TinyModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(config: ModelConfig) -> TinyModel:
    """Seeded scaled-uniform init: Xavier for projections, +-0.02 embedding."""
    rng = np.random.default_rng(derive_seed(config.seed, "init"))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_norm"):
            params[name] = np.ones(shape)
        elif name == "embedding":
            params[name] = rng.uniform(-0.02, 0.02, shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape)
    return TinyModel(config, params)


def zero_model(config: ModelConfig) -> TinyModel:
    """All-zero weights: attention is uniform over each prefix and logits
    are identical across the vocabulary, handy as an analysis baseline."""
    params = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
    return TinyModel(config, params)


def _split_heads(x: np.ndarray, head_count: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, head_count, d // head_count).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _rms(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rms_backward(dy, xhat, r, gain):
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    s = np.sum(dxhat * xhat, axis=-1, keepdims=True)
    dx = (dxhat - xhat * s / xhat.shape[-1]) / r
    return dx, dgain


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x2 * x)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def _check_tokens(config: ModelConfig, tokens: np.ndarray, cap: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"tokens must be one-dimensional, got shape {tokens.shape}")
    if tokens.size < 1:
        raise ValueError("tokens must be non-empty")
    if tokens.size > cap:
        raise ValueError(f"sequence length {tokens.size} exceeds inference cap {cap}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    return tokens


def _forward_batch(
    model: TinyModel,
    tokens: np.ndarray,
    variant: RotaryVariant,
    want_cache: bool,
    want_record: bool,
):
    """Shared forward pass.  Returns (logits, record, cache).

    tokens: (B, n).  Records are only collected for B == 1.
    """
    cfg = model.config
    p = model.params
    b, n = tokens.shape
    positions = np.arange(n)
    scale = logit_scale(variant) / math.sqrt(cfg.head_dim)

    x = p["embedding"][tokens]  # (B, n, D)
    cache = {"tokens": tokens, "layers": []} if want_cache else None
    rec_w, rec_o = [], []

    for l in range(cfg.layer_count):
        xhat1, r1 = _rms(x)
        a_in = xhat1 * p[f"layer{l}.attn_norm"]
        q = a_in @ p[f"layer{l}.wq"]
        k = a_in @ p[f"layer{l}.wk"]
        v = a_in @ p[f"layer{l}.wv"]
        qh = _split_heads(q, cfg.head_count)
        kh = _split_heads(k, cfg.head_count)
        vh = _split_heads(v, cfg.head_count)
        rq = rotate_block(variant, qh, positions)
        rk = rotate_block(variant, kh, positions)
        att_logits = scale * (rq @ rk.swapaxes(-1, -2))
        w = causal_softmax(att_logits)
        oh = w @ vh
        o_merged = _merge_heads(oh)
        x = x + o_merged @ p[f"layer{l}.wo"]

        xhat2, r2 = _rms(x)
        m_in = xhat2 * p[f"layer{l}.mlp_norm"]
        h_pre = m_in @ p[f"layer{l}.w_up"]
        h_act = _gelu(h_pre)
        x = x + h_act @ p[f"layer{l}.w_down"]

        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activations after layer {l}")
        if want_cache:
            cache["layers"].append(
                dict(
                    xhat1=xhat1, r1=r1, a_in=a_in, rq=rq, rk=rk, vh=vh, w=w,
                    o_merged=o_merged, xhat2=xhat2, r2=r2, m_in=m_in,
                    h_pre=h_pre, h_act=h_act,
                )
            )
        if want_record:
            rec_w.append(w[0])
            rec_o.append(oh[0])

    xhatf, rf = _rms(x)
    xf = xhatf * p["final_norm"]
    logits = xf @ p["embedding"].T
    if want_cache:
        cache["xhatf"], cache["rf"], cache["xf"] = xhatf, rf, xf

    record = None
    if want_record:
        record = AttentionRecord(weights=np.stack(rec_w), outputs=np.stack(rec_o))
    return logits, record, cache


def forward(
    model: TinyModel,
    tokens,
    variant: RotaryVariant | None = None,
    inference_cap: int | None = None,
) -> tuple[np.ndarray, AttentionRecord]:
    """Logits for every position plus the per-layer attention record."""
    cfg = model.config
    cap = cfg.inference_cap if inference_cap is None else inference_cap
    tokens = _check_tokens(cfg, tokens, cap)
    variant = cfg.variant if variant is None else variant
    logits, record, _ = _forward_batch(
        model, tokens[np.newaxis], variant, want_cache=False, want_record=True
    )
    return logits[0], record


def loss_and_gradients(
    model: TinyModel,
    batch,
    variant: RotaryVariant | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over the batch plus all parameter grads."""
    cfg = model.config
    p = model.params
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValueError(f"batch must be (B, n) with B >= 1, got shape {batch.shape}")
    if batch.shape[1] < 2:
        raise ValueError("sequences must have at least 2 tokens for next-token loss")
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    variant = cfg.variant if variant is None else variant

    logits, _, cache = _forward_batch(model, batch, variant, want_cache=True, want_record=False)
    b, n, _ = logits.shape
    count = b * (n - 1)

    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - logz
    targets = batch[:, 1:]
    rows = np.arange(b)[:, None]
    cols = np.arange(n - 1)[None, :]
    loss = float(-log_probs[rows, cols, targets].sum() / count)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss at the output head")

    dlogits = np.exp(log_probs)
    dlogits[rows, cols, targets] -= 1.0
    dlogits[:, -1, :] = 0.0
    dlogits /= count

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    scale = logit_scale(variant) / math.sqrt(cfg.head_dim)
    positions = np.arange(n)

    # Tied output head.
    grads["embedding"] += np.einsum("btv,btd->vd", dlogits, cache["xf"])
    dxf = dlogits @ p["embedding"]
    dx, dgf = _rms_backward(dxf, cache["xhatf"], cache["rf"], p["final_norm"])
    grads["final_norm"] += dgf

    for l in reversed(range(cfg.layer_count)):
        c = cache["layers"][l]

        # MLP branch.
        dh_act = dx @ p[f"layer{l}.w_down"].T
        grads[f"layer{l}.w_down"] += np.einsum("bnh,bnd->hd", c["h_act"], dx)
        dh_pre = dh_act * _gelu_grad(c["h_pre"])
        grads[f"layer{l}.w_up"] += np.einsum("bnd,bnh->dh", c["m_in"], dh_pre)
        dm_in = dh_pre @ p[f"layer{l}.w_up"].T
        dx_norm, dg2 = _rms_backward(dm_in, c["xhat2"], c["r2"], p[f"layer{l}.mlp_norm"])
        grads[f"layer{l}.mlp_norm"] += dg2
        dx = dx + dx_norm

        # Attention branch.
        grads[f"layer{l}.wo"] += np.einsum("bnd,bne->de", c["o_merged"], dx)
        doh = _split_heads(dx @ p[f"layer{l}.wo"].T, cfg.head_count)
        dw = doh @ c["vh"].swapaxes(-1, -2)
        dvh = c["w"].swapaxes(-1, -2) @ doh
        # Softmax rows: masked entries have w == 0 and drop out on their own.
        dz = dw - np.einsum("bhij,bhij->bhi", dw, c["w"])[..., np.newaxis]
        dz *= c["w"]
        drq = scale * (dz @ c["rk"])
        drk = scale * (dz.swapaxes(-1, -2) @ c["rq"])
        dqh = rotate_block(variant, drq, positions, inverse=True)
        dkh = rotate_block(variant, drk, positions, inverse=True)
        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        grads[f"layer{l}.wq"] += np.einsum("bnd,bne->de", c["a_in"], dq)
        grads[f"layer{l}.wk"] += np.einsum("bnd,bne->de", c["a_in"], dk)
        grads[f"layer{l}.wv"] += np.einsum("bnd,bne->de", c["a_in"], dv)
        da_in = dq @ p[f"layer{l}.wq"].T + dk @ p[f"layer{l}.wk"].T + dv @ p[f"layer{l}.wv"].T
        dx_norm, dg1 = _rms_backward(da_in, c["xhat1"], c["r1"], p[f"layer{l}.attn_norm"])
        grads[f"layer{l}.attn_norm"] += dg1
        dx = dx + dx_norm

    # Input embedding lookup.
    np.add.at(grads["embedding"], cache["tokens"], dx)
    return loss, grads


def train(
    config: ModelConfig,
    task: SyntheticTask,
    steps: int,
    learning_rate: float,
    batch_size: int,
    momentum: float = 0.0,
    token_budget: int | None = None,
) -> tuple[TinyModel, np.ndarray]:
    """Gradient descent (optional momentum) on the task; returns loss trace.

    A token_budget overrides `steps` with budget // (batch * length), which
    holds the consumed tokens constant when comparing context lengths.
    """
    if token_budget is not None:
        steps = token_budget // (batch_size * config.train_context_length)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if task.vocab_size != config.vocab_size:
        raise ValueError(
            f"task vocab {task.vocab_size} != model vocab {config.vocab_size}"
        )

    model = init_model(config)
    velocity = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    rng = np.random.default_rng(derive_seed(config.seed, "train-data"))
    trace = np.empty(steps)
    initial = None
    diverged_run = 0

    for step in range(steps):
        batch = sample_batch(task, rng, batch_size, config.train_context_length)
        loss, grads = loss_and_gradients(model, batch)
        trace[step] = loss
        if initial is None:
            initial = loss
        if loss > 10.0 * initial:
            diverged_run += 1
            if diverged_run >= 100:
                raise TrainingDiverged(
                    f"loss {loss:.4g} above 10x initial {initial:.4g} for 100 steps"
                )
        else:
            diverged_run = 0
        for name in model.params:
            velocity[name] = momentum * velocity[name] + grads[name]
            model.params[name] -= learning_rate * velocity[name]

    return model, trace


def generate(
    model: TinyModel,
    prompt,
    max_new_tokens: int,
    greedy: bool = True,
    variant: RotaryVariant | None = None,
    sample_seed: int = 0,
) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Decode step by step, returning new tokens and one record per step.

    Each record is the full-context attention of the forward pass that
    produced that step's token, so its final rows are exactly what the
    entropy analysis consumes.
    """
    cfg = model.config
    prompt = _check_tokens(cfg, prompt, cfg.inference_cap)
    if max_new_tokens < 0:
        raise ValueError(f"max_new_tokens must be >= 0, got {max_new_tokens}")
    if prompt.size + max_new_tokens > cfg.inference_cap:
        raise ValueError(
            f"prompt {prompt.size} + {max_new_tokens} new tokens exceeds cap {cfg.inference_cap}"
        )
    rng = np.random.default_rng(sample_seed)
    tokens = prompt
    out: list[int] = []
    records: list[AttentionRecord] = []
    for _ in range(max_new_tokens):
        logits, record = forward(model, tokens, variant=variant)
        records.append(record)
        if greedy:
            nxt = int(np.argmax(logits[-1]))
        else:
            shifted = logits[-1] - logits[-1].max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            nxt = int(rng.choice(cfg.vocab_size, p=probs))
        out.append(nxt)
        tokens = np.append(tokens, nxt)
    return np.array(out, dtype=np.int64), records


# ---------------------------------------------------------------------------
# Checkpoint container: "TMDL" magic, fixed-width header, raw float64 blocks.
# ---------------------------------------------------------------------------

_VARIANT_KINDS = {Rope: 0, Pi: 1, Ntk: 2, Yarn: 3}
_HEADER = struct.Struct("<4sI7IQ")
_VARIANT = struct.Struct("<I6d")


def _pack_variant(variant: RotaryVariant) -> bytes:
    kind = _VARIANT_KINDS[type(variant)]
    extra = [0.0] * 5
    if isinstance(variant, Pi):
        extra[0] = variant.alpha
    elif isinstance(variant, Ntk):
        extra[0] = variant.new_base
    elif isinstance(variant, Yarn):
        extra = [variant.alpha, variant.ramp_low, variant.ramp_high, variant.temperature, 0.0]
    return _VARIANT.pack(kind, variant.config.base, *extra)


def _unpack_variant(blob: bytes, head_dim: int) -> RotaryVariant:
    kind, base, p0, p1, p2, p3, _ = _VARIANT.unpack(blob)
    config = RopeConfig(head_dim=head_dim, base=base)
    if kind == 0:
        return Rope(config)
    if kind == 1:
        return Pi(config, alpha=p0)
    if kind == 2:
        return Ntk(config, new_base=p0)
    if kind == 3:
        return Yarn(config, alpha=p0, ramp_low=p1, ramp_high=p2, temperature=p3)
    raise ValueError(f"unknown variant kind {kind}")


def save_checkpoint(model: TinyModel, path) -> None:
    cfg = model.config
    with open(path, "wb") as fp:
        fp.write(
            _HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                cfg.vocab_size,
                cfg.layer_count,
                cfg.head_count,
                cfg.head_dim,
                cfg.mlp_ratio,
                cfg.train_context_length,
                cfg.inference_cap,
                cfg.seed,
            )
        )
        fp.write(_pack_variant(cfg.variant))
        for name in param_shapes(cfg):
            fp.write(model.params[name].astype("<f8").tobytes())


def load_checkpoint(path) -> TinyModel:
    with open(path, "rb") as fp:
        header = fp.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError("checkpoint truncated in header")
        magic, version, vocab, layers, heads, head_dim, ratio, train_len, cap, seed = (
            _HEADER.unpack(header)
        )
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        variant = _unpack_variant(fp.read(_VARIANT.size), head_dim)
        config = ModelConfig(
            vocab_size=vocab,
            layer_count=layers,
            head_count=heads,
            head_dim=head_dim,
            mlp_ratio=ratio,
            train_context_length=train_len,
            variant=variant,
            seed=seed,
            inference_cap=cap,
        )
        params = {}
        for name, shape in param_shapes(config).items():
            nbytes = 8 * int(np.prod(shape))
            blob = fp.read(nbytes)
            if len(blob) != nbytes:
                raise ValueError(f"checkpoint truncated in block {name}")
            params[name] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        if fp.read(1):
            raise ValueError("trailing bytes after parameter blocks")
    return TinyModel(config, params)
