"""Sequence-model backbones: a minimal gated diagonal-SSM block and a causal
attention block, both usable explicitly (fixed depth stack) or implicitly
(weight-tied map iterated to a fixed point).

SSM block, per layer, for iterate z and injected input x:

    proj            = W_z . rmsnorm(z) + W_x . x          (injection shared across layers)
    v, gate, dt_raw, B, C = split(proj)
    dt              = softplus(dt_raw + dt_bias)           per head, > 0
    lambda          = exp(-dt * softplus(a))               per head, in (0, 1)
    state update    h_t = lambda ⊙ h_{t-1} + dt * B v^T    per head, via the scan
    read            y_t = C^T h_t + D ⊙ v                  (h_{t-1} in the explicit stack)
    z_out           = z + W_o (y ⊙ silu(gate))

Iterating the full layer stack in s with the state flowing along t via the
scan is the simultaneous mode; holding the previous token's converged state
fixed and iterating a single position is the sequential mode.  Both target
the same coupled fixed-point equations, and they coincide exactly for
single-token sequences.

The attention variant injects x into the fused QKV projection and carries
converged key/value caches instead of recurrent states.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    broadcast_to,
    clip,
    concat,
    exp,
    gather_rows,
    matmul,
    mul,
    no_grad,
    reshape,
    rms_norm,
    silu,
    slice_last,
    slice_time,
    softmax,
    softplus,
    scan_time,
    transpose,
    tsum,
)
from .solver import RunStats, SolverConfig, solve_fixed_point

INIT_DOMAIN = np.uint64(0x5EED_0001)
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "ssm"  # "ssm" | "attention"
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 4
    d_head: int = 8
    d_state: int = 4
    vocab_size: int = 2
    tie_readout: bool = True
    residual_iterate: bool = True  # z + block(z); disable for contractive toys
    ff_mult: int = 2               # attention feed-forward width multiple
    init_scale: float = 1.0        # multiplier on projection init std

    def __post_init__(self):
        if self.backbone not in ("ssm", "attention"):
            raise ModelError(f"unknown backbone {self.backbone!r}")
        if self.d_model != self.n_heads * self.d_head:
            raise ModelError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})")
        for name in ("d_model", "n_layers", "n_heads", "d_head", "d_state", "vocab_size"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def proj_width(self) -> int:
        # v | gate | dt | B | C
        return 2 * self.d_model + self.n_heads + 2 * self.n_heads * self.d_state

    @property
    def state_channels(self) -> int:
        return self.n_heads * self.d_head * self.d_state


@dataclass
class SequentialState:
    """Converged quantities carried across tokens in sequential mode.

    SSM: per-layer hidden states, shape (B, n_layers, H, d_head, d_state).
    Attention: per-layer key/value caches, each (B, H, t, d_head).
    Mid-iteration values are never stored here.
    """

    position: int = 0
    h: Optional[np.ndarray] = None
    kv: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


class Model:
    """Parameter container; forward passes are free functions over it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def astype(self, dtype) -> "Model":
        cast = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, cast)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    rng = np.random.Generator(np.random.Philox(key=np.array([np.uint64(seed), INIT_DOMAIN],
                                                            dtype=np.uint64)))
    d = config.d_model
    std = config.init_scale / np.sqrt(d)

    def dense(shape, scale=1.0):
        return Tensor((rng.standard_normal(shape) * std * scale).astype(dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["embedding"] = Tensor((rng.standard_normal((config.vocab_size, d)) / np.sqrt(d)).astype(dtype),
                                 requires_grad=True)
    params["final_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    if not config.tie_readout:
        params["readout"] = dense((d, config.vocab_size))

    if config.backbone == "ssm":
        params["w_x"] = dense((d, config.proj_width))
        for i in range(config.n_layers):
            pre = f"layer{i}"
            params[f"{pre}.norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[f"{pre}.w_z"] = dense((d, config.proj_width))
            params[f"{pre}.w_o"] = dense((d, d))
            # softplus(a) uniform in [0.5, 4]: a moderate spread of decay rates
            a = np.log(np.expm1(rng.uniform(0.5, 4.0, size=config.n_heads)))
            params[f"{pre}.a_raw"] = Tensor(a.astype(dtype), requires_grad=True)
            # softplus(dt_raw + bias) centered in [1e-3, 1e-1] at init
            dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=config.n_heads))
            params[f"{pre}.dt_bias"] = Tensor(np.log(np.expm1(dt)).astype(dtype), requires_grad=True)
            params[f"{pre}.d_skip"] = Tensor(np.ones(config.n_heads, dtype=dtype), requires_grad=True)
    else:
        params["w_inp"] = dense((d, 3 * d))
        for i in range(config.n_layers):
            pre = f"layer{i}"
            params[f"{pre}.attn_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[f"{pre}.w_qkv"] = dense((d, 3 * d))
            params[f"{pre}.w_o"] = dense((d, d))
            params[f"{pre}.ff_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[f"{pre}.w_ff1"] = dense((d, config.ff_mult * d))
            params[f"{pre}.w_ff2"] = dense((config.ff_mult * d, d))
    return Model(config, params)


def zero_state(model: Model, batch: int) -> np.ndarray:
    cfg = model.config
    return np.zeros((batch, cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.d_state),
                    dtype=model.dtype)


def embed_tokens(model: Model, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise ModelError("token index outside vocabulary")
    return gather_rows(model.params["embedding"], tokens)


# ---------------------------------------------------------------------------
# SSM cell


def _ssm_layer(model: Model, layer: int, stream: Tensor, h_in_layer, x: Tensor,
               read_prev_state: bool) -> tuple[np.ndarray, Tensor]:
    cfg = model.config
    p = model.params
    B, T, d = stream.shape
    H, C, N = cfg.n_heads, cfg.d_head, cfg.d_state
    CH = cfg.state_channels
    pre = f"layer{layer}"

    u_in = rms_norm(stream, p[f"{pre}.norm"])
    proj = add(matmul(reshape(u_in, (B * T, d)), p[f"{pre}.w_z"]),
               matmul(reshape(x, (B * T, d)), p["w_x"]))
    v = reshape(slice_last(proj, 0, d), (B, T, H, C))
    gate = reshape(slice_last(proj, d, 2 * d), (B, T, d))
    dt_raw = reshape(slice_last(proj, 2 * d, 2 * d + H), (B, T, H))
    b_in = reshape(slice_last(proj, 2 * d + H, 2 * d + H + H * N), (B, T, H, N))
    c_out = reshape(slice_last(proj, 2 * d + H + H * N, cfg.proj_width), (B, T, H, N))

    dt = softplus(add(dt_raw, p[f"{pre}.dt_bias"]))
    # decay in (0,1): exponent clipped away from 0 and overflow
    exponent = clip(mul(dt, softplus(p[f"{pre}.a_raw"])), 1e-6, 60.0)
    lam = exp(mul(exponent, -1.0))
    assert np.all(lam.data > 0.0) and np.all(lam.data < 1.0), "decay left (0,1)"

    write = mul(mul(reshape(v, (B, T, H, C, 1)), reshape(b_in, (B, T, H, 1, N))),
                reshape(dt, (B, T, H, 1, 1)))
    lam_full = broadcast_to(reshape(lam, (B, T, H, 1, 1)), (B, T, H, C, N))

    h0 = h_in_layer if isinstance(h_in_layer, Tensor) else Tensor(h_in_layer)
    states = scan_time(reshape(lam_full, (B, T, CH)), reshape(write, (B, T, CH)),
                       reshape(h0, (B, CH)))
    if read_prev_state:
        h_read = concat([reshape(h0, (B, 1, CH)), slice_time(states, 0, T - 1)], axis=1)
    else:
        h_read = states

    y = tsum(mul(reshape(h_read, (B, T, H, C, N)), reshape(c_out, (B, T, H, 1, N))), axis=-1)
    # per-head feedthrough: without it the pre-update read convention has no
    # path from x_t to y_t at all
    y = add(y, mul(v, reshape(p[f"{pre}.d_skip"], (1, 1, H, 1))))
    gated = mul(reshape(y, (B, T, d)), silu(gate))
    out = reshape(matmul(reshape(gated, (B * T, d)), p[f"{pre}.w_o"]), (B, T, d))
    if cfg.residual_iterate:
        stream_out = add(stream, out)
    else:
        stream_out = out
    return states, stream_out


def cell_step(model: Model, z_prev: Tensor, h_in, x: Tensor,
              read_prev_state: bool = False) -> tuple[np.ndarray, Tensor]:
    """One application of the weight-tied layer stack.

    ``z_prev``/``x`` are (B, T, d); ``h_in`` carries per-layer incoming
    states (B, n_layers, H, d_head, d_state).  Works on a whole sequence
    (states flow along t through the scan) or a single token.  Returns the
    detached final states per layer plus the next iterate.
    """
    cfg = model.config
    if cfg.backbone != "ssm":
        raise ModelError("cell_step requires the ssm backbone")
    z_prev = z_prev if isinstance(z_prev, Tensor) else Tensor(z_prev)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if z_prev.shape != x.shape or z_prev.shape[-1] != cfg.d_model:
        raise ModelError(f"iterate/input shapes disagree: {z_prev.shape} vs {x.shape}")
    h_arr = h_in.data if isinstance(h_in, Tensor) else np.asarray(h_in)
    B = z_prev.shape[0]
    if h_arr.shape != (B, cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.d_state):
        raise ModelError(f"state shape {h_arr.shape} invalid")

    stream = z_prev
    h_out = np.empty_like(h_arr)
    for i in range(cfg.n_layers):
        layer_state = (_tensor_layer_state(h_in, i, B, cfg) if isinstance(h_in, Tensor)
                       else h_arr[:, i])
        states, stream = _ssm_layer(model, i, stream, layer_state, x, read_prev_state)
        h_out[:, i] = states.data[:, -1].reshape(B, cfg.n_heads, cfg.d_head, cfg.d_state)
    return h_out, stream


def cell_step_taped_states(model: Model, z_prev: Tensor, h_in, x: Tensor
                           ) -> tuple[list[Tensor], Tensor]:
    """Like ``cell_step`` but keeps the per-layer state trajectories on the
    tape: returns one (B, T, state_channels) tensor per layer.  Used by the
    state-to-state Jacobian instruments, where gradients must flow through
    the state outputs themselves."""
    cfg = model.config
    if cfg.backbone != "ssm":
        raise ModelError("cell_step requires the ssm backbone")
    z_prev = z_prev if isinstance(z_prev, Tensor) else Tensor(z_prev)
    x = x if isinstance(x, Tensor) else Tensor(x)
    B = z_prev.shape[0]
    stream = z_prev
    taped_states: list[Tensor] = []
    h_arr = h_in.data if isinstance(h_in, Tensor) else np.asarray(h_in)
    for i in range(cfg.n_layers):
        layer_state = (_tensor_layer_state(h_in, i, B, cfg) if isinstance(h_in, Tensor)
                       else h_arr[:, i])
        states, stream = _ssm_layer(model, i, stream, layer_state, x, read_prev_state=False)
        taped_states.append(states)
    return taped_states, stream


def _tensor_layer_state(h: Tensor, layer: int, batch: int, cfg: ModelConfig) -> Tensor:
    flat = reshape(h, (batch, cfg.n_layers, cfg.state_channels))
    sliced = transpose(flat, (0, 2, 1))
    sliced = slice_last(sliced, layer, layer + 1)
    return reshape(sliced, (batch, cfg.n_heads, cfg.d_head, cfg.d_state))


# ---------------------------------------------------------------------------
# attention cell


def attention_backbone_step(model: Model, z_prev: Tensor, x: Tensor,
                            cache: Optional[list[tuple[np.ndarray, np.ndarray]]] = None,
                            return_kv: bool = False):
    """One application of the weight-tied attention stack.

    Causal multi-head self-attention on (z W_qkv + x W_inp) with a residual
    feed-forward block.  With a cache, each layer attends to the cached
    converged keys/values of past tokens plus the current iterate's own.
    """
    cfg = model.config
    if cfg.backbone != "attention":
        raise ModelError("attention_backbone_step requires the attention backbone")
    p = model.params
    z_prev = z_prev if isinstance(z_prev, Tensor) else Tensor(z_prev)
    x = x if isinstance(x, Tensor) else Tensor(x)
    B, T, d = z_prev.shape
    H, dh = cfg.n_heads, cfg.d_head

    stream = z_prev
    kv_out: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        a_in = rms_norm(stream, p[f"{pre}.attn_norm"])
        qkv = add(matmul(reshape(a_in, (B * T, d)), p[f"{pre}.w_qkv"]),
                  matmul(reshape(x, (B * T, d)), p["w_inp"]))
        q = _heads(slice_last(qkv, 0, d), B, T, H, dh)
        k = _heads(slice_last(qkv, d, 2 * d), B, T, H, dh)
        v = _heads(slice_last(qkv, 2 * d, 3 * d), B, T, H, dh)
        if cache is not None:
            k_past, v_past = cache[i]
            k_full = concat([Tensor(k_past), k], axis=2)
            v_full = concat([Tensor(v_past), v], axis=2)
            past = k_past.shape[2]
        else:
            k_full, v_full = k, v
            past = 0
        scores = mul(matmul(q, transpose(k_full, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        S = past + T
        if T > 1:
            mask = np.triu(np.full((T, S), -1e9, dtype=stream.dtype), k=past + 1)
            scores = add(scores, mask[None, None])
        attn = matmul(softmax(scores, axis=-1), v_full)
        merged = reshape(transpose(attn, (0, 2, 1, 3)), (B * T, d))
        stream = add(stream, reshape(matmul(merged, p[f"{pre}.w_o"]), (B, T, d)))

        f_in = rms_norm(stream, p[f"{pre}.ff_norm"])
        hidden = silu(matmul(reshape(f_in, (B * T, d)), p[f"{pre}.w_ff1"]))
        stream = add(stream, reshape(matmul(hidden, p[f"{pre}.w_ff2"]), (B, T, d)))
        if return_kv:
            kv_out.append((k.data.copy(), v.data.copy()))
    if return_kv:
        return stream, kv_out
    return stream


def _heads(t: Tensor, B: int, T: int, H: int, dh: int) -> Tensor:
    return transpose(reshape(t, (B, T, H, dh)), (0, 2, 1, 3))


# ---------------------------------------------------------------------------
# full forwards


def logits_from_iterate(model: Model, z: Tensor) -> Tensor:
    p = model.params
    B, T, d = z.shape
    normed = rms_norm(z, p["final_norm"])
    w = transpose(p["embedding"], (1, 0)) if model.config.tie_readout else p["readout"]
    return reshape(matmul(reshape(normed, (B * T, d)), w), (B, T, model.config.vocab_size))


def iterate_map(model: Model, z: Tensor, x: Tensor, memory) -> Tensor:
    """The map F(z) whose fixed points define the implicit model."""
    if model.config.backbone == "ssm":
        return cell_step(model, z, memory, x)[1]
    return attention_backbone_step(model, z, x, cache=memory)


def empty_memory(model: Model, batch: int):
    if model.config.backbone == "ssm":
        return zero_state(model, batch)
    dh = model.config.d_head
    empty = np.zeros((batch, model.config.n_heads, 0, dh), dtype=model.dtype)
    return [(empty, empty.copy()) for _ in range(model.config.n_layers)]


def explicit_forward(model: Model, tokens: np.ndarray) -> np.ndarray:
    """Fixed-depth stack: one untied-in-depth pass, states read pre-update.

    The depth stack shares the cell with the implicit model (layers are the
    depth), with the iterate stream starting at zero, so explicit and
    implicit variants of a config have identical parameter counts.
    """
    tokens = np.asarray(tokens)
    with no_grad():
        logits = explicit_logits(model, tokens)
    return logits.data


def explicit_logits(model: Model, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens)
    x = embed_tokens(model, tokens)
    B, T = tokens.shape
    z0 = Tensor(np.zeros((B, T, model.config.d_model), dtype=model.dtype))
    if model.config.backbone == "ssm":
        _, z = cell_step(model, z0, zero_state(model, B), x, read_prev_state=True)
    else:
        z = attention_backbone_step(model, z0, x, cache=None)
    return logits_from_iterate(model, z)


def implicit_forward_simultaneous(model: Model, solver_cfg: SolverConfig,
                                  tokens: np.ndarray) -> tuple[np.ndarray, RunStats]:
    """Fixed-point iteration over the whole sequence at once."""
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    with no_grad():
        x = embed_tokens(model, tokens)
        memory = empty_memory(model, B)

        def step(z_arr: np.ndarray) -> np.ndarray:
            return iterate_map(model, Tensor(z_arr), x, memory).data

        z0 = np.zeros((B, T, model.config.d_model), dtype=model.dtype)
        z_star, stats = solve_fixed_point(step, z0, cfg=solver_cfg)
        logits = logits_from_iterate(model, Tensor(z_star)).data
    return logits, stats


def implicit_forward_sequential(model: Model, solver_cfg: SolverConfig, tokens: np.ndarray,
                                state: Optional[SequentialState] = None
                                ) -> tuple[np.ndarray, RunStats, SequentialState]:
    """Per-token fixed-point convergence, carrying only converged state.

    Memory is constant in the iteration count: the inner loop for token t
    sees the converged memory of tokens < t and is free to run as long as
    the solver allows.
    """
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    cfg = model.config
    if state is None:
        state = SequentialState(position=0)
        if cfg.backbone == "ssm":
            state.h = zero_state(model, B)
        else:
            state.kv = empty_memory(model, B)

    logits = np.empty((B, T, cfg.vocab_size), dtype=model.dtype)
    per_token_iters: list[int] = []
    worst_res = 0.0
    all_converged = True
    failure = False
    with no_grad():
        for t in range(T):
            x_t = embed_tokens(model, tokens[:, t:t + 1])
            memory = state.h if cfg.backbone == "ssm" else state.kv

            def step(z_arr: np.ndarray) -> np.ndarray:
                return iterate_map(model, Tensor(z_arr), x_t, memory).data

            z0 = np.zeros((B, 1, cfg.d_model), dtype=model.dtype)
            z_star, stats = solve_fixed_point(step, z0, cfg=solver_cfg)
            per_token_iters.append(stats.iterations)
            worst_res = max(worst_res, stats.final_residual)
            all_converged = all_converged and stats.converged
            failure = failure or stats.numeric_failure
            # one more pass at the converged iterate to extract carried state
            if cfg.backbone == "ssm":
                h_new, _ = cell_step(model, Tensor(z_star), state.h, x_t)
                state.h = h_new
            else:
                _, kv = attention_backbone_step(model, Tensor(z_star), x_t,
                                                cache=state.kv, return_kv=True)
                state.kv = [
                    (np.concatenate([kp, kn], axis=2), np.concatenate([vp, vn], axis=2))
                    for (kp, vp), (kn, vn) in zip(state.kv, kv)
                ]
            logits[:, t] = logits_from_iterate(model, Tensor(z_star)).data[:, 0]
            state.position += 1
    run = RunStats(iterations=max(per_token_iters), final_residual=worst_res,
                   converged=all_converged, numeric_failure=failure,
                   per_token_iters=per_token_iters)
    return logits, run, state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: Optional[dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> None:
    """Binary checkpoint: length-prefixed JSON header + raw little-endian data."""
    tensors: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in sorted(model.params.items())]
    for k in sorted(extra or {}):
        tensors.append((f"extra.{k}", (extra or {})[k]))
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        kind = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = np.ascontiguousarray(arr, dtype=kind).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "meta": meta or {},
        "tensors": manifest,
    }).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header['format_version']}")
        data = f.read()
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    config = ModelConfig(**header["model_config"])
    return config, tensors, header["meta"]


def model_from_checkpoint(path, expect_config: Optional[ModelConfig] = None) -> tuple[Model, dict[str, np.ndarray], dict]:
    """Rebuild a model; a mismatched expected config is a hard error."""
    config, tensors, meta = load_checkpoint(path)
    if expect_config is not None and asdict(expect_config) != asdict(config):
        raise ModelError("checkpoint/config mismatch: refusing to load")
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()
              if not k.startswith("extra.")}
    extra = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    reference = init_model(config, seed=0).params
    if set(params) != set(reference):
        raise ModelError("checkpoint tensor names do not match the configuration")
    for k, v in params.items():
        if v.shape != reference[k].shape:
            raise ModelError(f"checkpoint tensor {k} has shape {v.shape}, expected {reference[k].shape}")
    return Model(config, params), extra, meta
