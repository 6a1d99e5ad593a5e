"""Divided spatial-temporal transformer over pose windows, with an explicit backward pass.

Parameters are a flat ``dict`` of canonical names to arrays, e.g. ``embed.e``,
``e_spe``, ``e_tpe``, ``mask_token``, ``spatial.0.w_q``, ``temporal.1.fc1.w``,
``head.w``. Every attention block follows the same layout::

    a = LN1(z);  z' = z + MHSA(a)          # Q, K, V all from a
    y = LN3(z' + fc2(gelu(fc1(LN2(z')))))

Inputs and outputs are windows of shape ``(B, T, N, 2)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import _kernels as K

ATTENTION_MODES = ("spatial_temporal", "joint", "spatial_only", "temporal_only", "none")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass
class STTConfig:
    dim: int = 128
    spatial_layers: int = 2
    temporal_layers: int = 2
    heads: int = 8
    num_poses: int = 8
    num_joints: int = 17
    mask_ratio: float = 0.15
    attention_mode: str = "spatial_temporal"
    use_spe: bool = True
    use_tpe: bool = True
    ffn_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim ({self.dim}) must be a positive multiple of heads ({self.heads})")
        if self.spatial_layers < 0 or self.temporal_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attention_mode!r}")
        if self.num_poses < 1 or self.num_joints < 1:
            raise ConfigError("num_poses and num_joints must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "STTConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def stacks(self) -> list[tuple[str, int]]:
        """Attention stacks run by forward, in order, as ``(name, depth)``."""
        mode = self.attention_mode
        if mode == "spatial_temporal":
            return [("spatial", self.spatial_layers), ("temporal", self.temporal_layers)]
        if mode == "joint":
            return [("joint", self.spatial_layers + self.temporal_layers)]
        if mode == "spatial_only":
            return [("spatial", self.spatial_layers)]
        if mode == "temporal_only":
            return [("temporal", self.temporal_layers)]
        return []

    @property
    def uses_tpe(self) -> bool:
        return self.use_tpe and any(name in ("temporal", "joint") for name, _ in self.stacks())


def count_attention_flops(config: STTConfig, mode: str | None = None) -> int:
    """Attention score-matrix elements per layer for one window."""
    mode = mode or config.attention_mode
    t, n = config.num_poses, config.num_joints
    return {
        "joint": (t * n) ** 2,
        "spatial_only": t * n * n,
        "temporal_only": n * t * t,
        "spatial_temporal": t * n * n + n * t * t,
        "none": 0,
    }[mode]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng, shape, std=INIT_STD):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _layer_shapes(c: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln1.gamma": (c,),
        "ln1.beta": (c,),
        "w_q": (c, c),
        "w_k": (c, c),
        "w_v": (c, c),
        "ln2.gamma": (c,),
        "ln2.beta": (c,),
        "fc1.w": (c, hidden),
        "fc1.b": (hidden,),
        "fc2.w": (hidden, c),
        "fc2.b": (c,),
        "ln3.gamma": (c,),
        "ln3.beta": (c,),
    }


def param_shapes(config: STTConfig) -> dict[str, tuple[int, ...]]:
    c = config.dim
    shapes = {"embed.e": (c, 2), "mask_token": (c,)}
    if config.use_spe:
        shapes["e_spe"] = (config.num_joints, c)
    if config.uses_tpe:
        shapes["e_tpe"] = (config.num_poses, c)
    for name, depth in config.stacks():
        for i in range(depth):
            for k, shape in _layer_shapes(c, c * config.ffn_ratio).items():
                shapes[f"{name}.{i}.{k}"] = shape
    shapes["head.w"] = (c, 2)
    shapes["head.b"] = (2,)
    return shapes


def init_params(config: STTConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) weights; zero biases and position tables; unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "b") or name in ("e_spe", "e_tpe"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = arr.astype(dtype)
    return params


def num_parameters(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# attention block
# ---------------------------------------------------------------------------


def _split_heads(x, groups, length, heads):
    d = x.shape[-1] // heads
    return np.ascontiguousarray(x.reshape(groups, length, heads, d).transpose(0, 2, 1, 3)).reshape(
        groups * heads, length, d
    )


def _merge_heads(x, groups, length, heads):
    d = x.shape[-1]
    return x.reshape(groups, heads, length, d).transpose(0, 2, 1, 3).reshape(groups * length, heads * d)


def attention_layer(z: np.ndarray, p: dict, prefix: str, heads: int, eps: float = 1e-5, cache: list | None = None):
    """One block on ``z`` of shape ``(G, L, C)``: G independent sequences of length L."""
    g, length, c = z.shape
    zf = z.reshape(g * length, c)
    a, a_hat, a_rstd = K.layer_norm_fwd(zf, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"], eps)
    w_qkv = np.concatenate([p[prefix + "w_q"], p[prefix + "w_k"], p[prefix + "w_v"]], axis=1)
    qkv = a @ w_qkv
    qh = _split_heads(qkv[:, :c], g, length, heads)
    kh = _split_heads(qkv[:, c : 2 * c], g, length, heads)
    vh = _split_heads(qkv[:, 2 * c :], g, length, heads)
    scale = 1.0 / math.sqrt(c // heads)
    oh, att = K.attention_fwd(qh, kh, vh, scale)
    zh = _merge_heads(oh, g, length, heads) + zf
    b, b_hat, b_rstd = K.layer_norm_fwd(zh, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"], eps)
    h1 = b @ p[prefix + "fc1.w"] + p[prefix + "fc1.b"]
    act, tanh_h1 = K.gelu_fwd(h1)
    u = act @ p[prefix + "fc2.w"] + p[prefix + "fc2.b"] + zh
    y, y_hat, y_rstd = K.layer_norm_fwd(u, p[prefix + "ln3.gamma"], p[prefix + "ln3.beta"], eps)
    if cache is not None:
        cache.append((prefix, (g, length, c), a, a_hat, a_rstd, w_qkv, qh, kh, vh, att, scale,
                      b, b_hat, b_rstd, h1, tanh_h1, act, y_hat, y_rstd))
    return y.reshape(g, length, c)


def attention_layer_backward(dy: np.ndarray, p: dict, entry, heads: int, grads: dict) -> np.ndarray:
    (prefix, (g, length, c), a, a_hat, a_rstd, w_qkv, qh, kh, vh, att, scale,
     b, b_hat, b_rstd, h1, tanh_h1, act, y_hat, y_rstd) = entry
    dy = dy.reshape(g * length, c)
    du, grads[prefix + "ln3.gamma"], grads[prefix + "ln3.beta"] = K.layer_norm_bwd(
        dy, y_hat, y_rstd, p[prefix + "ln3.gamma"]
    )
    grads[prefix + "fc2.w"] = act.T @ du
    grads[prefix + "fc2.b"] = du.sum(axis=0)
    dh1 = K.gelu_bwd(du @ p[prefix + "fc2.w"].T, h1, tanh_h1)
    grads[prefix + "fc1.w"] = b.T @ dh1
    grads[prefix + "fc1.b"] = dh1.sum(axis=0)
    dzh, grads[prefix + "ln2.gamma"], grads[prefix + "ln2.beta"] = K.layer_norm_bwd(
        dh1 @ p[prefix + "fc1.w"].T, b_hat, b_rstd, p[prefix + "ln2.gamma"]
    )
    dzh += du
    doh = _split_heads(dzh, g, length, heads)
    dqh, dkh, dvh = K.attention_bwd(doh, qh, kh, vh, att, scale)
    dqkv = np.concatenate(
        [_merge_heads(dqh, g, length, heads), _merge_heads(dkh, g, length, heads), _merge_heads(dvh, g, length, heads)],
        axis=1,
    )
    dw = a.T @ dqkv
    grads[prefix + "w_q"], grads[prefix + "w_k"], grads[prefix + "w_v"] = dw[:, :c], dw[:, c : 2 * c], dw[:, 2 * c :]
    dz, grads[prefix + "ln1.gamma"], grads[prefix + "ln1.beta"] = K.layer_norm_bwd(
        dqkv @ w_qkv.T, a_hat, a_rstd, p[prefix + "ln1.gamma"]
    )
    dz += dzh
    return dz.reshape(g, length, c)


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------


def sample_mask(shape, mask_ratio: float, seed) -> np.ndarray:
    """I.i.d. Bernoulli(mask_ratio) joint mask of ``shape`` (B, T, N)."""
    return np.random.default_rng(seed).random(shape) < mask_ratio


def embed_joints(x, params, config: STTConfig, *, training=False, seed=None, mask=None):
    """Project coordinates to C dims, add the spatial position table, swap masked slots for the mask token.

    Returns ``(Z, mask)`` where ``mask`` is a boolean ``(B, T, N)`` array,
    all False outside training.
    """
    dtype = params["embed.e"].dtype
    x = np.asarray(x, dtype=dtype)
    b, t, n, _ = x.shape
    z = x @ params["embed.e"].T
    if training:
        if mask is None:
            mask = sample_mask((b, t, n), config.mask_ratio, seed)
        z[mask] = params["mask_token"]
    else:
        mask = np.zeros((b, t, n), dtype=bool)
    if "e_spe" in params:
        z += params["e_spe"]
    return z, mask


def _stack_layers(z, params, config, name, depth, cache):
    for i in range(depth):
        z = attention_layer(z, params, f"{name}.{i}.", config.heads, config.ln_eps, cache)
    return z


def spatial_pass(z, params, config: STTConfig, depth=None, cache=None):
    """Attention over joints inside each frame: ``(B, T, N, C)`` -> same."""
    b, t, n, c = z.shape
    depth = config.spatial_layers if depth is None else depth
    return _stack_layers(z.reshape(b * t, n, c), params, config, "spatial", depth, cache).reshape(b, t, n, c)


def temporal_pass(z, params, config: STTConfig, depth=None, cache=None):
    """Add the temporal position table, then attend over frames for each joint separately."""
    b, t, n, c = z.shape
    depth = config.temporal_layers if depth is None else depth
    if "e_tpe" in params:
        z = z + params["e_tpe"][None, :, None, :]
    zt = np.ascontiguousarray(z.transpose(0, 2, 1, 3)).reshape(b * n, t, c)
    zt = _stack_layers(zt, params, config, "temporal", depth, cache)
    return np.ascontiguousarray(zt.reshape(b, n, t, c).transpose(0, 2, 1, 3))


def joint_pass(z, params, config: STTConfig, depth=None, cache=None):
    """Full attention over all T*N tokens of a window."""
    b, t, n, c = z.shape
    depth = config.spatial_layers + config.temporal_layers if depth is None else depth
    if "e_tpe" in params:
        z = z + params["e_tpe"][None, :, None, :]
    return _stack_layers(z.reshape(b, t * n, c), params, config, "joint", depth, cache).reshape(b, t, n, c)


_PASSES = {"spatial": spatial_pass, "temporal": temporal_pass, "joint": joint_pass}


def head_rec(z, params):
    return z @ params["head.w"] + params["head.b"]


def _check_input(x, config):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (config.num_poses, config.num_joints, 2):
        raise ConfigError(
            f"expected windows of shape (B, {config.num_poses}, {config.num_joints}, 2), got {x.shape}"
        )
    return x


def forward(x, params, config: STTConfig, *, training=False, seed=None, mask=None, cache: dict | None = None):
    """Reconstruct normalized windows from (motion-embedded) windows.

    ``x`` is ``(B, T, N, 2)`` or a single ``(T, N, 2)`` window; the output has
    the same shape as ``x``. Pass a dict as ``cache`` to keep what
    :func:`backward` needs.
    """
    squeeze = np.ndim(x) == 3
    x = _check_input(x, config)
    z, mask = embed_joints(x, params, config, training=training, seed=seed, mask=mask)
    layer_cache = [] if cache is not None else None
    for name, depth in config.stacks():
        z = _PASSES[name](z, params, config, depth, layer_cache)
    out = head_rec(z, params)
    if cache is not None:
        cache.update(x=np.asarray(x, dtype=z.dtype), mask=mask, z_out=z, layers=layer_cache)
    return out[0] if squeeze else out


def backward(dout, params, config: STTConfig, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/d(output)``."""
    grads: dict[str, np.ndarray] = {}
    z_out = cache["z_out"]
    b, t, n, c = z_out.shape
    dout = np.asarray(dout, dtype=z_out.dtype).reshape(b, t, n, 2)
    grads["head.w"] = z_out.reshape(-1, c).T @ dout.reshape(-1, 2)
    grads["head.b"] = dout.reshape(-1, 2).sum(axis=0)
    dz = dout @ params["head.w"].T

    layers = list(cache["layers"])
    tpe_grad = None
    for name, depth in reversed(config.stacks()):
        entries = [layers.pop() for _ in range(depth)]
        if name == "spatial":
            dzs = dz.reshape(b * t, n, c)
            for e in entries:
                dzs = attention_layer_backward(dzs, params, e, config.heads, grads)
            dz = dzs.reshape(b, t, n, c)
        elif name == "temporal":
            dzt = np.ascontiguousarray(dz.transpose(0, 2, 1, 3)).reshape(b * n, t, c)
            for e in entries:
                dzt = attention_layer_backward(dzt, params, e, config.heads, grads)
            dz = np.ascontiguousarray(dzt.reshape(b, n, t, c).transpose(0, 2, 1, 3))
        else:
            dzj = dz.reshape(b, t * n, c)
            for e in entries:
                dzj = attention_layer_backward(dzj, params, e, config.heads, grads)
            dz = dzj.reshape(b, t, n, c)
        if name in ("temporal", "joint") and "e_tpe" in params:
            g = dz.sum(axis=(0, 2))
            tpe_grad = g if tpe_grad is None else tpe_grad + g
    if "e_tpe" in params:
        grads["e_tpe"] = tpe_grad if tpe_grad is not None else np.zeros_like(params["e_tpe"])

    mask = cache["mask"]
    if "e_spe" in params:
        grads["e_spe"] = dz.sum(axis=(0, 1))
    grads["mask_token"] = dz[mask].sum(axis=0)
    keep = ~mask
    grads["embed.e"] = dz[keep].T @ cache["x"][keep]
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, params: dict, config: STTConfig, extra: dict | None = None) -> None:
    """Write params as float64 arrays plus the config JSON into one ``.npz`` archive."""
    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}
    meta = {"config": config.to_dict(), **(extra or {})}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | os.PathLike, dtype=np.float64):
    """Return ``(params, config, meta)``; shapes are checked against the config."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k].astype(dtype) for k in data.files if k != "__meta__"}
    config = STTConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"checkpoint does not match its config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: expected shape {shape}, found {params[name].shape}")
    return params, config, meta
