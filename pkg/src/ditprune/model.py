"""Toy denoising transformer with per-layer gates and optional low-rank deltas.

Each of the L transformer blocks (pre-LN attention + MLP, both with residuals)
is one prunable unit. The forward pass applies, per layer,

    x_{i+1} = x_i + m_i * (layer_i(x_i) - x_i)

so a gate of exactly 0 is a perfect skip and a gate of 1 applies the layer.
Gates may be plain floats (binary masks; zero gates short-circuit) or scalar
autodiff tensors (the learnable-mask path, where gradients flow into the
gate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, NonFiniteLossError
from .task import Batch
from .tensor import (Tensor, add, attention, gate_lerp, gelu, layernorm,
                     linear, matmul, mse, reshape, scale, take_rows, transpose)

LAYER_PARAM_NAMES = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w_up", "b_up", "w_down", "b_down",
)


@dataclass
class ToyDiTConfig:
    depth: int = 8
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    seq_len: int = 16
    in_dim: int = 2
    num_timesteps: int = 100
    num_classes: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("depth, hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.seq_len < 1 or self.in_dim < 1 or self.num_timesteps < 1:
            raise ConfigError("seq_len, in_dim and num_timesteps must be positive")
        if self.mlp_ratio <= 0 or self.num_classes < 0:
            raise ConfigError("mlp_ratio must be positive and num_classes >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDiTConfig":
        return cls(**d)


def sinusoidal_table(num_steps: int, dim: int) -> np.ndarray:
    """Fixed sin/cos timestep embedding table, shape (num_steps, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    args = np.arange(num_steps)[:, None] * freqs[None, :]
    table = np.zeros((num_steps, dim))
    table[:, 0::2] = np.sin(args)[:, : (dim + 1) // 2]
    table[:, 1::2] = np.cos(args)[:, : dim // 2]
    return table


class ToyDiTModel:
    """L gated transformer blocks between an input and an output projection."""

    def __init__(self, config: ToyDiTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.t_table = sinusoidal_table(config.num_timesteps, config.hidden_dim)

    @classmethod
    def init(cls, config: ToyDiTConfig, seed: int = 0) -> "ToyDiTModel":
        """Initialize with 1/sqrt(fan_in) weights and zeroed residual outputs.

        Zeroing wo/w_down/w_out makes every block an exact identity and the
        prediction exactly zero at step 0, which stabilizes early training.
        """
        rng = np.random.default_rng(seed)
        d = config.hidden_dim
        hidden = int(d * config.mlp_ratio)
        params: dict[str, Tensor] = {}

        def w(name: str, shape: tuple[int, ...], std: float | None = None, zero=False):
            if zero:
                data = np.zeros(shape)
            elif std is None:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            params[name] = Tensor(data, requires_grad=True)

        w("w_in", (config.in_dim, d), std=1.0 / math.sqrt(config.in_dim))
        w("b_in", (d,))
        for i in range(config.depth):
            p = f"layers.{i}."
            w(p + "ln1_g", (d,)); params[p + "ln1_g"].data[:] = 1.0
            w(p + "ln1_b", (d,))
            w(p + "wq", (d, d), std=1.0 / math.sqrt(d))
            w(p + "bq", (d,))
            w(p + "wk", (d, d), std=1.0 / math.sqrt(d))
            w(p + "bk", (d,))
            w(p + "wv", (d, d), std=1.0 / math.sqrt(d))
            w(p + "bv", (d,))
            w(p + "wo", (d, d), zero=True)
            w(p + "bo", (d,))
            w(p + "ln2_g", (d,)); params[p + "ln2_g"].data[:] = 1.0
            w(p + "ln2_b", (d,))
            w(p + "w_up", (d, hidden), std=1.0 / math.sqrt(d))
            w(p + "b_up", (hidden,))
            w(p + "w_down", (hidden, d), zero=True)
            w(p + "b_down", (d,))
        w("w_out", (d, config.in_dim), zero=True)
        w("b_out", (config.in_dim,))
        if config.num_classes > 0:
            w("class_table", (config.num_classes, d), std=0.02)
        return cls(config, params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer_param(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def clone(self) -> "ToyDiTModel":
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad)
                  for k, p in self.params.items()}
        return ToyDiTModel(self.config, params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=p.data.dtype)


def plant_identity_layer(model: ToyDiTModel, layer: int) -> None:
    """Craft an exact-identity block by zeroing both residual-branch outputs."""
    for name in ("wo", "bo", "w_down", "b_down"):
        p = model.layer_param(layer, name)
        p.data[:] = 0.0


def extract_submodel(model: ToyDiTModel, retained: list[int]) -> ToyDiTModel:
    """Physically shrunken model containing only the retained layers, in order."""
    cfg = ToyDiTConfig(**{**model.config.to_dict(), "depth": len(retained)})
    params: dict[str, Tensor] = {}
    for name, p in model.params.items():
        if not name.startswith("layers."):
            params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
    for new_i, old_i in enumerate(retained):
        for pname in LAYER_PARAM_NAMES:
            src = model.layer_param(old_i, pname)
            params[f"layers.{new_i}.{pname}"] = Tensor(
                src.data.copy(), requires_grad=src.requires_grad)
    ordered = {}
    ordered["w_in"] = params["w_in"]
    ordered["b_in"] = params["b_in"]
    for i in range(len(retained)):
        for pname in LAYER_PARAM_NAMES:
            key = f"layers.{i}.{pname}"
            ordered[key] = params[key]
    ordered["w_out"] = params["w_out"]
    ordered["b_out"] = params["b_out"]
    if "class_table" in params:
        ordered["class_table"] = params["class_table"]
    return ToyDiTModel(cfg, ordered)


def _normalize_gates(mask, depth: int) -> list:
    if mask is None:
        return [1.0] * depth
    if isinstance(mask, np.ndarray):
        mask = list(mask)
    if len(mask) != depth:
        raise ConfigError(f"mask length {len(mask)} != model depth {depth}")
    gates = []
    for g in mask:
        if isinstance(g, Tensor):
            gates.append(g)
        else:
            g = float(g)
            if not (0.0 <= g <= 1.0):
                raise ConfigError(f"gate value {g} outside [0, 1]")
            gates.append(g)
    return gates


def _linear(x2, w: Tensor, b: Tensor, lora_entry=None, res=None) -> Tensor:
    y = linear(x2, w, b, res=res)
    if lora_entry is not None:
        a_mat, b_mat, alpha = lora_entry  # A: (r, d_in), B: (d_out, r)
        delta = matmul(matmul(x2, transpose(a_mat, (1, 0))), transpose(b_mat, (1, 0)))
        y = add(y, scale(delta, alpha))
    return y


def _block_forward(model: ToyDiTModel, i: int, h2, batch: int, lora):
    cfg = model.config
    heads = cfg.heads
    t_len = cfg.seq_len
    lp = model.layer_param

    def entry(name):
        return None if lora is None else lora.entry(i, name)

    ln1 = layernorm(h2, lp(i, "ln1_g"), lp(i, "ln1_b"))
    q = _linear(ln1, lp(i, "wq"), lp(i, "bq"), entry("wq"))
    k = _linear(ln1, lp(i, "wk"), lp(i, "bk"), entry("wk"))
    v = _linear(ln1, lp(i, "wv"), lp(i, "bv"), entry("wv"))
    ctx = attention(q, k, v, heads, t_len)
    a2 = _linear(ctx, lp(i, "wo"), lp(i, "bo"), entry("wo"), res=h2)
    ln2 = layernorm(a2, lp(i, "ln2_g"), lp(i, "ln2_b"))
    u = gelu(_linear(ln2, lp(i, "w_up"), lp(i, "b_up"), entry("w_up")))
    return _linear(u, lp(i, "w_down"), lp(i, "b_down"), entry("w_down"), res=a2)


def forward(model: ToyDiTModel, tokens, t, labels=None, mask=None, lora=None,
            collect_hidden: bool = False):
    """Run the gated model; returns the noise prediction (B, T, in_dim).

    With collect_hidden=True, also returns the list [x_0, ..., x_L] of hidden
    states flattened to (B*T, hidden_dim); x_i is the input to layer i and
    x_L the final state.
    """
    cfg = model.config
    gates = _normalize_gates(mask, cfg.depth)
    tokens_arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    batch, t_len, in_dim = tokens_arr.shape
    if t_len != cfg.seq_len or in_dim != cfg.in_dim:
        raise ConfigError(f"tokens shape {tokens_arr.shape} does not match config")
    t = np.asarray(t, dtype=np.int64)
    rows = batch * t_len

    x2 = reshape(tokens if isinstance(tokens, Tensor) else Tensor(tokens_arr),
                 (rows, in_dim))
    emb = np.repeat(model.t_table[t], t_len, axis=0)
    h2 = _linear(x2, model.params["w_in"], model.params["b_in"], res=Tensor(emb))
    if labels is not None:
        if cfg.num_classes == 0:
            raise ConfigError("labels given but model is unconditional")
        labels = np.asarray(labels, dtype=np.int64)
        h2 = add(h2, take_rows(model.params["class_table"], np.repeat(labels, t_len)))

    hidden = [h2] if collect_hidden else None
    for i in range(cfg.depth):
        gate = gates[i]
        if isinstance(gate, float) and gate == 0.0:
            if collect_hidden:
                hidden.append(h2)
            continue
        out = _block_forward(model, i, h2, batch, lora)
        if isinstance(gate, float) and gate == 1.0:
            h2 = out
        else:
            h2 = gate_lerp(h2, out, gate)
        if collect_hidden:
            hidden.append(h2)

    p2 = _linear(h2, model.params["w_out"], model.params["b_out"])
    pred = reshape(p2, (batch, t_len, in_dim))
    if collect_hidden:
        return pred, hidden
    return pred


def loss_from_prediction(pred, eps: np.ndarray) -> Tensor:
    """Noise-prediction MSE."""
    return mse(pred, Tensor(eps) if not isinstance(eps, Tensor) else eps)


def diffusion_loss(model: ToyDiTModel, batch: Batch, mask=None, lora=None) -> Tensor:
    """Mean squared error between predicted and true per-token noise."""
    pred, hidden = forward(model, batch.tokens, batch.t, labels=batch.labels,
                           mask=mask, lora=lora, collect_hidden=True)
    loss = loss_from_prediction(pred, batch.eps)
    if not math.isfinite(loss.item()):
        for i, hs in enumerate(hidden):
            if not np.all(np.isfinite(hs.data)):
                raise NonFiniteLossError(
                    f"non-finite loss; first non-finite activation after layer {i - 1}"
                    if i else "non-finite loss; non-finite embedding output")
        if not np.all(np.isfinite(pred.data)):
            raise NonFiniteLossError(
                "non-finite loss; activations finite, output projection overflowed")
        raise NonFiniteLossError("non-finite loss with finite activations")
    return loss


def sample(model: ToyDiTModel, n: int, sample_steps: int, seed: int,
           labels=None, chunk: int = 4096) -> np.ndarray:
    """Deterministic DDIM-style reverse loop; returns n points in data space.

    Each generated point is the final denoised value of one token (token 0)
    of its sequence. Tokens of a sequence can settle on different mixture
    modes, so averaging them would smear points between modes.
    """
    cfg = model.config
    if sample_steps > cfg.num_timesteps:
        raise ConfigError("sample_steps cannot exceed num_timesteps")
    if n == 0:
        return np.zeros((0, cfg.in_dim))
    from .task import linear_beta_schedule  # shared schedule definition
    alpha_bar = np.cumprod(1.0 - linear_beta_schedule(cfg.num_timesteps))
    ts = np.round(np.linspace(cfg.num_timesteps - 1, 0, sample_steps)).astype(int)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cfg.seq_len, cfg.in_dim))
    out = np.empty((n, cfg.in_dim))
    for start in range(0, n, chunk):
        xc = x[start:start + chunk]
        m = len(xc)
        lab = None if labels is None else np.asarray(labels)[start:start + chunk]
        for j, t in enumerate(ts):
            t_vec = np.full(m, t, dtype=np.int64)
            eps_hat = forward(model, xc, t_vec, labels=lab).data
            ab_t = alpha_bar[t]
            x0_hat = (xc - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            if j + 1 < len(ts):
                ab_next = alpha_bar[ts[j + 1]]
                xc = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat
            else:
                xc = x0_hat
        out[start:start + chunk] = xc[:, 0, :]
    return out
