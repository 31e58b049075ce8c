"""Small decoder-only autoregressive transformer with editable parameter subsets.

Pre-norm blocks, learned positional embeddings, GELU feed-forward, full
double precision. A model is a named dict of parameter tensors, so layer-
restricted editing is just "hand this subset of names to the optimizer".
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    Tensor,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    softmax,
    transpose,
)

CHECKPOINT_FORMAT = "editlab-checkpoint-v1"


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_ctx: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_ctx < 2:
            raise ValueError(f"max_ctx must be >= 2, got {self.max_ctx}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(**d)


def _init_params(cfg: LMConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    # residual-output projections get a depth-scaled init for stable training
    out_std = std / np.sqrt(2.0 * cfg.n_layers)
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": normal((V, D), std),
        "pos_emb": normal((cfg.max_ctx, D), std),
    }
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = ones((D,))
        params[pre + "ln1.b"] = zeros((D,))
        params[pre + "attn.wq"] = normal((D, D), std)
        params[pre + "attn.bq"] = zeros((D,))
        params[pre + "attn.wk"] = normal((D, D), std)
        params[pre + "attn.bk"] = zeros((D,))
        params[pre + "attn.wv"] = normal((D, D), std)
        params[pre + "attn.bv"] = zeros((D,))
        params[pre + "attn.wo"] = normal((D, D), out_std)
        params[pre + "attn.bo"] = zeros((D,))
        params[pre + "ln2.g"] = ones((D,))
        params[pre + "ln2.b"] = zeros((D,))
        params[pre + "ffn.w1"] = normal((D, F), std)
        params[pre + "ffn.b1"] = zeros((F,))
        params[pre + "ffn.w2"] = normal((F, D), out_std)
        params[pre + "ffn.b2"] = zeros((D,))
    params["ln_f.g"] = ones((D,))
    params["ln_f.b"] = zeros((D,))
    params["unembed.w"] = normal((D, V), std)
    params["unembed.b"] = zeros((V,))
    return params


class TinyLM:
    """Decoder-only transformer; trainable unless built from a snapshot."""

    def __init__(self, config: LMConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config)

    def param_names(self) -> list[str]:
        return list(self.params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            if p.requires_grad:
                p.zero_grad()


def snapshot(model: TinyLM) -> TinyLM:
    """Deep, independent, gradient-free copy; later edits never touch it."""
    copies = {name: Tensor(p.data.copy()) for name, p in model.params.items()}
    return TinyLM(model.config, copies)


def param_l2_distance(a: TinyLM, b: TinyLM) -> float:
    total = 0.0
    for name, p in a.params.items():
        d = p.data - b.params[name].data
        total += float((d * d).sum())
    return float(np.sqrt(total))


def _causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _validate_tokens(cfg: LMConfig, ids: np.ndarray):
    t = ids.shape[-1]
    if t < 1 or t > cfg.max_ctx:
        raise ValueError(f"sequence length {t} outside [1, max_ctx={cfg.max_ctx}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise ValueError(f"token id {bad} out of range for vocab_size {cfg.vocab_size}")


def forward_logits(model: TinyLM, tokens) -> Tensor:
    """Pre-softmax logits; [T] tokens -> [T, V], [B, T] tokens -> [B, T, V].

    Row t conditions only on tokens at positions <= t (additive causal mask).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ValueError(f"tokens must be 1-d or 2-d, got shape {ids.shape}")
    _validate_tokens(model.config, ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]

    cfg = model.config
    P = model.params
    B, T = ids.shape
    H = cfg.n_heads
    dh = cfg.d_model // H

    x = gather_rows(P["tok_emb"], ids) + narrow(P["pos_emb"], 0, 0, T)
    mask = Tensor(_causal_mask(T))

    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        h = layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = matmul(h, P[pre + "attn.wq"]) + P[pre + "attn.bq"]
        k = matmul(h, P[pre + "attn.wk"]) + P[pre + "attn.bk"]
        v = matmul(h, P[pre + "attn.wv"]) + P[pre + "attn.bv"]
        # [B, T, D] -> [B, H, T, dh]
        q = transpose(reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = softmax(scores + mask, axis=-1)
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + (matmul(ctx, P[pre + "attn.wo"]) + P[pre + "attn.bo"])

        h = layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        h = gelu(matmul(h, P[pre + "ffn.w1"]) + P[pre + "ffn.b1"])
        x = x + (matmul(h, P[pre + "ffn.w2"]) + P[pre + "ffn.b2"])

    x = layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    logits = matmul(x, P["unembed.w"]) + P["unembed.b"]
    if squeeze:
        logits = reshape(logits, (T, cfg.vocab_size))
    return logits


# -----------------------------------------------------------------------------
# Editable parameter selection
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSelector:
    """Which parameters an edit may touch: everything, one layer's FFN, or a list."""

    kind: str  # "all" | "ffn_layer" | "names"
    layer: int | None = None
    names: tuple[str, ...] = field(default=())

    @staticmethod
    def all() -> "ParamSelector":
        return ParamSelector(kind="all")

    @staticmethod
    def ffn_of_layer(layer: int) -> "ParamSelector":
        return ParamSelector(kind="ffn_layer", layer=layer)

    @staticmethod
    def of_names(names) -> "ParamSelector":
        return ParamSelector(kind="names", names=tuple(names))

    def resolve(self, model: TinyLM) -> list[tuple[str, Tensor]]:
        if self.kind == "all":
            return list(model.params.items())
        if self.kind == "ffn_layer":
            if self.layer is None or not 0 <= self.layer < model.config.n_layers:
                raise ValueError(
                    f"unknown layer index {self.layer} for a {model.config.n_layers}-layer model"
                )
            prefix = f"blocks.{self.layer}.ffn."
            return [(n, p) for n, p in model.params.items() if n.startswith(prefix)]
        if self.kind == "names":
            missing = [n for n in self.names if n not in model.params]
            if missing:
                raise ValueError(f"unknown parameter names: {missing}")
            return [(n, model.params[n]) for n in self.names]
        raise ValueError(f"unknown selector kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "layer": self.layer, "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSelector":
        return cls(kind=d["kind"], layer=d.get("layer"), names=tuple(d.get("names", ())))


def default_editable(cfg: LMConfig) -> ParamSelector:
    """FFN of the penultimate layer: the deepest block that still feeds another block."""
    return ParamSelector.ffn_of_layer(max(cfg.n_layers - 2, 0))


def select_params(model: TinyLM, selector: ParamSelector) -> list[tuple[str, Tensor]]:
    return selector.resolve(model)


class restrict_trainable:
    """Temporarily mark only the given parameter names as requiring grad.

    Keeps the tape (and backward) from tracking frozen parts of the model
    during an edit; original flags are restored on exit.
    """

    def __init__(self, model: TinyLM, names):
        self.model = model
        self.names = set(names)
        self._saved: dict[str, bool] = {}

    def __enter__(self):
        for n, p in self.model.params.items():
            self._saved[n] = p.requires_grad
            p.requires_grad = n in self.names
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return self

    def __exit__(self, exc_type, exc, tb):
        for n, p in self.model.params.items():
            p.requires_grad = self._saved[n]
        return False


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------


def save_checkpoint(model: TinyLM, path, vocab_words: list[str] | None = None):
    """Binary container: config + flat float64 parameter arrays (+ optional vocab)."""
    meta = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict()}
    if vocab_words is not None:
        meta["vocab"] = list(vocab_words)
    arrays = {f"param/{name}": p.data for name, p in model.params.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[TinyLM, list[str] | None]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format {meta.get('format')!r}")
        cfg = LMConfig.from_dict(meta["config"])
        params = {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = Tensor(z[key].copy(), requires_grad=True)
    expected = set(_init_params(cfg))
    if set(params) != expected:
        raise ValueError("checkpoint parameter set does not match its config")
    return TinyLM(cfg, params), meta.get("vocab")
