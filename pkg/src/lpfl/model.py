"""Micro masked language model with LoRA adapters on selected projection matrices.

The encoder is bidirectional, pre-layer-norm, with learned positions, GELU
feed-forward blocks and an output head tied to the token embedding.  Weight
matrices are stored ``(out, in)`` so a linear layer computes ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import wire
from .numerics import Tensor

ROLES = ("query", "key", "value", "output", "ffn_in", "ffn_out")
LP, FP = "LP", "FP"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    lora_rank: int = 8
    lora_targets: tuple[str, ...] = ("query", "value")
    init_std: float = 0.02
    lora_init_std: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    def matrix_shape(self, role: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"ffn_in": (f, d), "ffn_out": (d, f)}.get(role, (d, d))

    def adapted(self) -> list[tuple[int, str]]:
        return [(layer, role) for layer in range(self.n_layers) for role in self.lora_targets]

    def violations(self) -> list[str]:
        out = []
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len", "lora_rank"):
            if getattr(self, name) < 1:
                out.append(f"model.{name}: must be a positive integer")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            out.append("model.d_model: must be divisible by n_heads")
        unknown = set(self.lora_targets) - set(ROLES)
        if unknown:
            out.append(f"model.lora_targets: unknown roles {sorted(unknown)}")
        if not self.lora_targets:
            out.append("model.lora_targets: at least one adapted matrix is required")
        for role in set(self.lora_targets) & set(ROLES):
            d, k = self.matrix_shape(role)
            if self.lora_rank >= min(d, k):
                out.append(f"model.lora_rank: r={self.lora_rank} must be < min(d, k)={min(d, k)} for {role} (LoRA rank constraint r << min(d,k))")
        return out

    def lp_parameter_count(self) -> int:
        r = self.lora_rank
        return sum(r * sum(self.matrix_shape(role)) for _, role in self.adapted())

    def base_parameter_count(self) -> int:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        per_layer = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d
        return v * d + self.max_len * d + self.n_layers * per_layer + 2 * d + v

    def fp_parameter_count(self) -> int:
        return self.base_parameter_count() + self.lp_parameter_count()

    def to_json(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        return cls(**obj)


@dataclass
class LoRAAdapter:
    """``W0 + B @ A`` with ``A: (r, k)`` and ``B: (d, r)``."""

    A: Tensor
    B: Tensor

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise nx.ShapeError(f"incompatible adapter factors A{self.A.shape} B{self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data


def lora_apply(x: Tensor, W0: Tensor, adapter: LoRAAdapter | None) -> Tensor:
    """``x @ (W0 + B A).T`` evaluated as ``x @ W0.T + (x @ A.T) @ B.T``."""
    if x.shape[-1] != W0.shape[1]:
        raise nx.ShapeError(f"input width {x.shape[-1]} != weight columns {W0.shape[1]}")
    out = nx.matmul(x, W0.T)
    if adapter is None:
        return out
    if adapter.shape != W0.shape:
        raise nx.ShapeError(f"adapter shape {adapter.shape} != weight shape {W0.shape}")
    return out + nx.matmul(nx.matmul(x, adapter.A.T), adapter.B.T)


def _weight_name(layer: int, role: str) -> str:
    return f"layers.{layer}.{role}.weight"


def adapter_names(layer: int, role: str) -> tuple[str, str]:
    return f"layers.{layer}.{role}.lora_A", f"layers.{layer}.{role}.lora_B"


@dataclass
class Batch:
    """Right-padded token ids with a boolean validity mask."""

    ids: np.ndarray
    valid: np.ndarray

    @classmethod
    def pad(cls, seqs: Sequence[Sequence[int]], pad_id: int = 0) -> Batch:
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), pad_id, dtype=np.intp)
        valid = np.zeros((len(seqs), width), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            valid[i, : len(s)] = True
        return cls(ids, valid)


@dataclass
class MicroMLM:
    config: ModelConfig
    base: dict[str, Tensor]
    adapters: dict[tuple[int, str], LoRAAdapter]
    mode: str = LP
    mask_id: int = 2
    _attn_scale: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._attn_scale = 1.0 / math.sqrt(self.config.d_model // self.config.n_heads)
        self.set_mode(self.mode)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, mask_id: int = 2) -> MicroMLM:
        bad = config.violations()
        if bad:
            raise ValueError("; ".join(bad))
        rng = np.random.default_rng(seed)
        std, d = config.init_std, config.d_model

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        base: dict[str, np.ndarray] = {
            "embed.token": normal(config.vocab_size, d),
            "embed.position": normal(config.max_len, d),
        }
        for layer in range(config.n_layers):
            for role in ROLES:
                out_dim, in_dim = config.matrix_shape(role)
                base[_weight_name(layer, role)] = normal(out_dim, in_dim)
                base[f"layers.{layer}.{role}.bias"] = np.zeros(out_dim)
            for ln in ("ln1", "ln2"):
                base[f"layers.{layer}.{ln}.gain"] = np.ones(d)
                base[f"layers.{layer}.{ln}.bias"] = np.zeros(d)
        base["final_ln.gain"] = np.ones(d)
        base["final_ln.bias"] = np.zeros(d)
        base["head.bias"] = np.zeros(config.vocab_size)
        # adapters draw from their own stream so base weights don't depend on the target set
        arng = np.random.default_rng([seed, 1])
        adapters = {}
        for layer, role in config.adapted():
            out_dim, in_dim = config.matrix_shape(role)
            a_name, b_name = adapter_names(layer, role)
            adapters[(layer, role)] = LoRAAdapter(
                nx.parameter(arng.normal(0.0, config.lora_init_std, size=(config.lora_rank, in_dim)), a_name),
                nx.parameter(np.zeros((out_dim, config.lora_rank)), b_name),
            )
        return cls(config, {k: nx.parameter(v, k, trainable=False) for k, v in base.items()}, adapters, LP, mask_id)

    # parameter bookkeeping ---------------------------------------------------

    def set_mode(self, mode: str) -> None:
        if mode not in (LP, FP):
            raise ValueError(f"mode must be LP or FP, got {mode!r}")
        self.mode = mode
        for t in self.base.values():
            t.requires_grad = mode == FP

    def adapter_tensors(self) -> dict[str, Tensor]:
        out = {}
        for ad in self.adapters.values():
            out[ad.A.name] = ad.A
            out[ad.B.name] = ad.B
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base, **self.adapter_tensors()}

    def trainable_parameters(self, mode: str | None = None) -> dict[str, Tensor]:
        mode = mode or self.mode
        if mode == LP:
            return self.adapter_tensors()
        if mode == FP:
            return self.parameters()
        raise ValueError(f"unknown mode {mode!r}")

    def state(self, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        params = self.parameters()
        keys = names if names is not None else params.keys()
        return {k: params[k].data.copy() for k in keys}

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.trainable_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, v in state.items():
            if k not in params:
                raise KeyError(f"unknown parameter {k}")
            if params[k].shape != v.shape:
                raise nx.ShapeError(f"shape mismatch for {k}: {v.shape} vs {params[k].shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def replica(self) -> MicroMLM:
        """Independent parameter handles; arrays are shared until an update replaces them."""
        base = {k: Tensor(t.data, name=k) for k, t in self.base.items()}
        adapters = {
            key: LoRAAdapter(Tensor(ad.A.data, True, ad.A.name), Tensor(ad.B.data, True, ad.B.name))
            for key, ad in self.adapters.items()
        }
        return MicroMLM(self.config, base, adapters, self.mode, self.mask_id)

    # forward -----------------------------------------------------------------

    def _linear(self, x: Tensor, layer: int, role: str) -> Tensor:
        w = self.base[_weight_name(layer, role)]
        return lora_apply(x, w, self.adapters.get((layer, role))) + self.base[f"layers.{layer}.{role}.bias"]

    def encode(self, batch: Batch, positions: np.ndarray | None = None) -> Tensor:
        """Hidden states after the final layer norm.

        Without ``positions`` the result is ``(N, T, d)``.  With ``positions``
        (one index per sequence) only those rows are produced, shape
        ``(N, d)``; the last layer then computes queries, the attention output
        and the feed-forward block for those rows alone.
        """
        cfg = self.config
        n, t = batch.ids.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = nx.embedding(self.base["embed.token"], batch.ids) + self.base["embed.position"][:t]
        key_bias = np.where(batch.valid, 0.0, -1e9)[:, None, None, :]
        rows = np.arange(n)

        def heads(z: Tensor, length: int) -> Tensor:
            return nx.transpose(nx.reshape(z, (n, length, h, dh)), (0, 2, 1, 3))

        for layer in range(cfg.n_layers):
            a = nx.layer_norm(x, self.base[f"layers.{layer}.ln1.gain"], self.base[f"layers.{layer}.ln1.bias"])
            last = positions is not None and layer == cfg.n_layers - 1
            if last:
                x = x[rows, positions]
                q = heads(self._linear(a[rows, positions], layer, "query"), 1)
            else:
                q = heads(self._linear(a, layer, "query"), t)
            k = heads(self._linear(a, layer, "key"), t)
            v = heads(self._linear(a, layer, "value"), t)
            att = nx.softmax(nx.matmul(q, k.T) * self._attn_scale + key_bias, axis=-1)
            ctx = nx.transpose(nx.matmul(att, v), (0, 2, 1, 3))
            ctx = nx.reshape(ctx, (n, cfg.d_model) if last else (n, t, cfg.d_model))
            x = x + self._linear(ctx, layer, "output")
            f = nx.layer_norm(x, self.base[f"layers.{layer}.ln2.gain"], self.base[f"layers.{layer}.ln2.bias"])
            x = x + self._linear(nx.gelu(self._linear(f, layer, "ffn_in")), layer, "ffn_out")
        return nx.layer_norm(x, self.base["final_ln.gain"], self.base["final_ln.bias"])

    def vocab_logits(self, hidden: Tensor) -> Tensor:
        return nx.matmul(hidden, self.base["embed.token"].T) + self.base["head.bias"]

    def mask_logits(self, batch: Batch, mask_pos: Sequence[int]) -> Tensor:
        """Vocabulary logits ``(N, V)`` at one mask position per sequence."""
        pos = np.asarray(mask_pos, dtype=np.intp)
        rows = np.arange(len(pos))
        if np.any(batch.ids[rows, pos] != self.mask_id):
            raise ValueError("mask token absent at mask position")
        return self.vocab_logits(self.encode(batch, pos))

    def forward_mask_logits(self, token_ids: Sequence[int], mask_pos: int) -> Tensor:
        if len(token_ids) > self.config.max_len:
            raise ValueError(f"sequence length {len(token_ids)} exceeds max_len {self.config.max_len}")
        if not 0 <= mask_pos < len(token_ids):
            raise ValueError("mask position outside the sequence")
        return self.mask_logits(Batch.pad([token_ids]), [mask_pos])[0]


def trainable_parameters(model: MicroMLM, mode: str) -> tuple[dict[str, Tensor], int, float]:
    """Trainable set for ``mode``, its element count, and the LP/FP count ratio."""
    params = model.trainable_parameters(mode)
    count = sum(t.size for t in params.values())
    lp = sum(t.size for t in model.trainable_parameters(LP).values())
    fp = sum(t.size for t in model.trainable_parameters(FP).values())
    return params, count, lp / fp


def pretrain_base(
    model: MicroMLM,
    corpus: Sequence[Sequence[int]],
    steps: int,
    mask_prob: float = 0.15,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
    salient_ids: Sequence[int] = (),
    salient_prob: float | None = None,
) -> list[float]:
    """Masked-token pretraining of the base weights; adapters stay untouched.

    Tokens listed in ``salient_ids`` are masked with ``salient_prob`` instead
    of ``mask_prob`` (salient-token masking).  Returns the loss per step.
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if not 0 < mask_prob < 1:
        raise ValueError("mask_prob must lie in (0, 1)")
    if salient_prob is not None and not 0 < salient_prob <= 1:
        raise ValueError("salient_prob must lie in (0, 1]")
    salient = np.asarray(sorted(set(salient_ids)), dtype=np.intp)

    def rate(ids: np.ndarray) -> np.ndarray | float:
        if salient_prob is None or not salient.size:
            return mask_prob
        return np.where(np.isin(ids, salient), salient_prob, mask_prob)

    seqs = [list(s[: model.config.max_len]) for s in corpus if len(s)]
    rng = np.random.default_rng(seed)
    params = dict(model.base)
    prev = {k: t.requires_grad for k, t in params.items()}
    for t in params.values():
        t.requires_grad = True
    frozen = model.adapter_tensors()
    for t in frozen.values():
        t.requires_grad = False
    opt = nx.AdamState(lr=lr)
    losses = []
    try:
        for _ in range(steps):
            picks = rng.integers(len(seqs), size=batch_size)
            batch = Batch.pad([seqs[i] for i in picks])
            chosen = (rng.random(batch.ids.shape) < rate(batch.ids)) & batch.valid
            lengths = batch.valid.sum(axis=1)
            for i in np.flatnonzero(~chosen.any(axis=1)):
                chosen[i, rng.integers(lengths[i])] = True
            rows, cols = np.nonzero(chosen)
            targets = batch.ids[rows, cols]
            batch.ids[rows, cols] = model.mask_id
            logits = model.vocab_logits(model.encode(batch)[rows, cols])
            loss = nx.nll_hard(logits, targets)
            nx.adam_step(params, nx.backward(loss), opt)
            losses.append(loss.item())
    finally:
        for k, t in params.items():
            t.requires_grad = prev[k]
        for t in frozen.values():
            t.requires_grad = True
    return losses


def save_checkpoint(model: MicroMLM, path, meta: dict | None = None) -> int:
    """Write config, base weights and adapters to one checksummed container."""
    info = {"kind": "micro-mlm", "config": model.config.to_json(), "mode": model.mode, "mask_id": model.mask_id}
    return wire.save(path, model.state(), {**info, **(meta or {})})


def load_checkpoint(path) -> tuple[MicroMLM, dict]:
    tensors, meta = wire.load(path)
    if meta.get("kind") != "micro-mlm":
        raise wire.WireError("container does not hold a model checkpoint")
    model = MicroMLM.initialize(ModelConfig.from_json(meta["config"]), mask_id=meta["mask_id"])
    model.load_state(tensors)
    model.set_mode(meta["mode"])
    return model, meta
