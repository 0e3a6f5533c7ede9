"""Soft-token embedding and a GPT-style causal transformer in numpy.

Forward and backward passes are written out by hand.  ``backward`` returns
gradients for every parameter tensor and for the model input (soft token
distributions or raw embeddings), which is what lets trajectory training
push gradients through fed-back predictions.

Blocks are pre-layer-norm: ``h += attn(ln1(h)); h += mlp(ln2(h))`` followed
by a final layer norm and a ``d x V`` output head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ContractError, ParseError
from .quantizer import TokenSpec

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
FORMAT_VERSION = 1
MAGIC = b"SOFTTRAJ-CHECKPOINT\n"


@dataclass(frozen=True)
class ModelConfig:
    V: int = 64
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 512

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if min(self.V, self.d, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ConfigurationError("model dimensions must be positive")


class ModelParams:
    """Named parameter tensors plus the config they were built for.

    ``version`` increases on every in-place update so that activation caches
    from an older forward pass can be detected.
    """

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)
        self.version = 0
        expected = param_shapes(config)
        if list(self.tensors) != list(expected):
            raise ContractError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def touch(self):
        self.version += 1

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def param_shapes(cfg: ModelConfig) -> dict:
    V, d = cfg.V, cfg.d
    shapes = {"embed": (V, d), "pos": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        shapes.update({
            f"h{i}.ln1.g": (d,), f"h{i}.ln1.b": (d,),
            f"h{i}.attn.w_qkv": (d, 3 * d), f"h{i}.attn.b_qkv": (3 * d,),
            f"h{i}.attn.w_out": (d, d), f"h{i}.attn.b_out": (d,),
            f"h{i}.ln2.g": (d,), f"h{i}.ln2.b": (d,),
            f"h{i}.mlp.w_in": (d, 4 * d), f"h{i}.mlp.b_in": (4 * d,),
            f"h{i}.mlp.w_out": (4 * d, d), f"h{i}.mlp.b_out": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head.w": (d, V), "head.b": (V,)})
    return shapes


def param_family(name: str) -> str:
    if name == "embed":
        return "embedding"
    if name == "pos":
        return "positional"
    if name.startswith("head."):
        return "head"
    if ".attn." in name:
        return "attention"
    if ".mlp." in name:
        return "feed-forward"
    return "layer-norm"


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            t = np.ones(shape)
        elif leaf.startswith("b"):
            t = np.zeros(shape)
        elif name.endswith("attn.w_out") or name.endswith("mlp.w_out"):
            t = rng.normal(0.0, resid_std, shape)
        else:
            t = rng.normal(0.0, 0.02, shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(cfg, tensors)


def zeros_like(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# primitives

def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    return dx, dg, db


def _gelu(u):
    th = np.tanh(GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + th), th


def _gelu_grad(u, th):
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _wgrad(x, dy):
    # sum over all leading axes of x^T dy
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(0)


# ---------------------------------------------------------------------------
# model

def soft_embed(p, E):
    """Expected embedding ``E^T p`` of distribution(s) ``p`` (last axis V)."""
    p = np.asarray(p)
    E = np.asarray(E)
    if p.shape[-1] != E.shape[0]:
        raise ContractError(f"distribution length {p.shape[-1]} != vocabulary {E.shape[0]}")
    return p @ E


def forward_embeddings(params: ModelParams, emb, keep_cache=True):
    """Run the transformer on ``(B, S, d)`` embeddings; return ``(logits, cache)``."""
    cfg = params.config
    emb = np.asarray(emb, dtype=params.dtype)
    squeeze = emb.ndim == 2
    if squeeze:
        emb = emb[None]
    B, S, d = emb.shape
    if d != cfg.d:
        raise ContractError(f"embedding width {d} != model width {cfg.d}")
    if S > cfg.max_len:
        raise ContractError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    H = cfg.n_heads
    Dh = d // H
    scale = 1.0 / math.sqrt(Dh)
    causal = np.tril(np.ones((S, S), dtype=bool))

    h = emb + params["pos"][:S]
    layers = []
    for i in range(cfg.n_layers):
        P = f"h{i}."
        n1, ln1 = _ln_fwd(h, params[P + "ln1.g"], params[P + "ln1.b"])
        qkv = n1 @ params[P + "attn.w_qkv"] + params[P + "attn.b_qkv"]
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
                   for j in range(3))
        att = (q @ k.transpose(0, 1, 3, 2)) * scale
        att = np.where(causal, att, -np.inf)
        A = softmax(att)
        o = (A @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        h = h + o @ params[P + "attn.w_out"] + params[P + "attn.b_out"]
        n2, ln2 = _ln_fwd(h, params[P + "ln2.g"], params[P + "ln2.b"])
        u = n2 @ params[P + "mlp.w_in"] + params[P + "mlp.b_in"]
        gu, th = _gelu(u)
        h = h + gu @ params[P + "mlp.w_out"] + params[P + "mlp.b_out"]
        if keep_cache:
            layers.append(dict(n1=n1, ln1=ln1, q=q, k=k, v=v, A=A, o=o,
                               n2=n2, ln2=ln2, u=u, th=th, gu=gu))
    nf, lnf = _ln_fwd(h, params["lnf.g"], params["lnf.b"])
    logits = nf @ params["head.w"] + params["head.b"]
    cache = None
    if keep_cache:
        cache = dict(version=params.version, layers=layers, nf=nf, lnf=lnf,
                     shape=(B, S), squeeze=squeeze, probs=None)
    if squeeze:
        logits = logits[0]
    return logits, cache


def forward(params: ModelParams, probs, keep_cache=True):
    """Soft-embed ``(B, S, V)`` distributions and run the transformer.

    Returns ``(logits, cache)``; next-token distributions are
    ``softmax(logits)``.  Output at position ``t`` depends only on inputs at
    positions ``<= t``.
    """
    probs = np.asarray(probs, dtype=params.dtype)
    logits, cache = forward_embeddings(params, soft_embed(probs, params["embed"]), keep_cache)
    if cache is not None:
        cache["probs"] = probs if probs.ndim == 3 else probs[None]
    return logits, cache


def forward_incremental(params: ModelParams, probs, state=None):
    """Append ``(B, n, V)`` input distributions to a key/value cache.

    Returns ``(logits, state)`` with logits for the new positions only.
    Numerically equivalent to re-running ``forward`` on the whole prefix,
    at the cost of the new positions alone.
    """
    cfg = params.config
    probs = np.asarray(probs, dtype=params.dtype)
    B, n, _ = probs.shape
    S0 = 0 if state is None else state["S"]
    S = S0 + n
    if S > cfg.max_len:
        raise ContractError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    d, H = cfg.d, cfg.n_heads
    Dh = d // H
    scale = 1.0 / math.sqrt(Dh)
    visible = np.arange(S)[None, :] <= (S0 + np.arange(n))[:, None]
    h = soft_embed(probs, params["embed"]) + params["pos"][S0:S]
    keys, vals = [], []
    for i in range(cfg.n_layers):
        P = f"h{i}."
        n1, _ = _ln_fwd(h, params[P + "ln1.g"], params[P + "ln1.b"])
        qkv = n1 @ params[P + "attn.w_qkv"] + params[P + "attn.b_qkv"]
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(B, n, H, Dh).transpose(0, 2, 1, 3)
                   for j in range(3))
        if state is not None:
            k = np.concatenate([state["k"][i], k], axis=2)
            v = np.concatenate([state["v"][i], v], axis=2)
        keys.append(k)
        vals.append(v)
        att = np.where(visible, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        o = (softmax(att) @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        h = h + o @ params[P + "attn.w_out"] + params[P + "attn.b_out"]
        n2, _ = _ln_fwd(h, params[P + "ln2.g"], params[P + "ln2.b"])
        gu, _ = _gelu(n2 @ params[P + "mlp.w_in"] + params[P + "mlp.b_in"])
        h = h + gu @ params[P + "mlp.w_out"] + params[P + "mlp.b_out"]
    nf, _ = _ln_fwd(h, params["lnf.g"], params["lnf.b"])
    logits = nf @ params["head.w"] + params["head.b"]
    return logits, {"k": keys, "v": vals, "S": S}


def backward(params: ModelParams, dlogits, cache, input_only=False):
    """Gradients of a scalar loss given its gradient w.r.t. the logits.

    Returns ``(grads, dinput)``: ``grads`` maps every parameter name to an
    array of the same shape; ``dinput`` is the gradient w.r.t. the input
    distributions when the cache came from ``forward``, or w.r.t. the
    embeddings when it came from ``forward_embeddings``.  With
    ``input_only`` the parameter gradients are skipped and ``grads`` is None.
    """
    if cache is None or "layers" not in cache:
        raise ContractError("backward needs the cache from a forward pass with keep_cache=True")
    if cache["version"] != params.version:
        raise ContractError("stale cache: parameters changed since the forward pass")
    cfg = params.config
    B, S = cache["shape"]
    d, H = cfg.d, cfg.n_heads
    Dh = d // H
    scale = 1.0 / math.sqrt(Dh)
    dlogits = np.asarray(dlogits, dtype=params.dtype)
    if cache["squeeze"] and dlogits.ndim == 2:
        dlogits = dlogits[None]
    if dlogits.shape != (B, S, cfg.V):
        raise ContractError(f"dlogits shape {dlogits.shape} != {(B, S, cfg.V)}")

    g = _GradSink(not input_only)
    g["head.w"] = lambda: _wgrad(cache["nf"], dlogits)
    g["head.b"] = lambda: _bgrad(dlogits)
    dnf = dlogits @ params["head.w"].T
    dh, g["lnf.g"], g["lnf.b"] = _ln_bwd(dnf, params["lnf.g"], cache["lnf"])

    for i in reversed(range(cfg.n_layers)):
        P = f"h{i}."
        c = cache["layers"][i]
        # feed-forward
        g[P + "mlp.w_out"] = lambda: _wgrad(c["gu"], dh)
        g[P + "mlp.b_out"] = lambda: _bgrad(dh)
        if "gg" not in c:     # reused across repeated backward sweeps
            c["gg"] = _gelu_grad(c["u"], c["th"])
        du = (dh @ params[P + "mlp.w_out"].T) * c["gg"]
        g[P + "mlp.w_in"] = lambda: _wgrad(c["n2"], du)
        g[P + "mlp.b_in"] = lambda: _bgrad(du)
        dn2 = du @ params[P + "mlp.w_in"].T
        dx, g[P + "ln2.g"], g[P + "ln2.b"] = _ln_bwd(dn2, params[P + "ln2.g"], c["ln2"])
        dh = dh + dx
        # attention
        g[P + "attn.w_out"] = lambda: _wgrad(c["o"], dh)
        g[P + "attn.b_out"] = lambda: _bgrad(dh)
        do = (dh @ params[P + "attn.w_out"].T).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = do @ c["v"].transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        datt = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = datt @ c["k"]
        dk = datt.transpose(0, 1, 3, 2) @ c["q"]
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(B, S, d) for t in (dq, dk, dv)], axis=-1)
        g[P + "attn.w_qkv"] = lambda: _wgrad(c["n1"], dqkv)
        g[P + "attn.b_qkv"] = lambda: _bgrad(dqkv)
        dn1 = dqkv @ params[P + "attn.w_qkv"].T
        dx, g[P + "ln1.g"], g[P + "ln1.b"] = _ln_bwd(dn1, params[P + "ln1.g"], c["ln1"])
        dh = dh + dx

    demb = dh
    g["pos"] = lambda: _pos_grad(params["pos"], demb)
    probs = cache["probs"]
    if probs is not None:
        g["embed"] = lambda: _wgrad(probs, demb)
        dinput = demb @ params["embed"].T
    else:
        g["embed"] = lambda: np.zeros_like(params["embed"])
        dinput = demb
    grads = {name: g.store[name] for name in params} if not input_only else None
    if cache["squeeze"]:
        dinput = dinput[0]
    return grads, dinput


class _GradSink:
    """Collects parameter gradients, evaluating them only when wanted."""

    def __init__(self, active):
        self.active = active
        self.store = {}

    def __setitem__(self, name, value):
        if self.active:
            self.store[name] = value() if callable(value) else value


def _pos_grad(pos, demb):
    out = np.zeros_like(pos)
    out[:demb.shape[1]] = demb.sum(0)
    return out


def step_autoregressive(history, params: ModelParams):
    """Next-step distribution given a ``(S, V)`` or ``(B, S, V)`` history."""
    history = np.asarray(history)
    if history.shape[-2] == 0:
        raise ContractError("history must be non-empty")
    logits, _ = forward(params, history, keep_cache=False)
    return softmax(logits[..., -1, :].astype(np.float64))


def one_hot(tokens, V, dtype=np.float32):
    tokens = np.asarray(tokens)
    out = np.zeros(tokens.shape + (V,), dtype=dtype)
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ModelParams, spec: TokenSpec, mu_range, sigma_range,
                    meta=None) -> None:
    """Write a self-describing checkpoint.

    Layout: a magic line, ``key: value`` header lines, one
    ``tensor <name> <shape> <offset> <nbytes>`` line per tensor, an
    ``end-header`` line, then the tensors as little-endian float32 rows.
    """
    cfg = params.config
    fields = {"format_version": FORMAT_VERSION, **asdict(cfg),
              "token_V": spec.V, "token_lo": float(spec.lo), "token_hi": float(spec.hi),
              "mu_lo": float(mu_range[0]), "mu_hi": float(mu_range[1]),
              "sigma_lo": float(sigma_range[0]), "sigma_hi": float(sigma_range[1])}
    for k, v in (meta or {}).items():
        fields[f"meta.{k}"] = v
    lines = [f"{k}: {_fmt(v)}" for k, v in fields.items()]
    blobs, offset = [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end-header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(MAGIC + header + b"".join(blobs))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def load_checkpoint(path):
    """Return ``(params, spec, mu_range, sigma_range, meta)``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ParseError(f"{path}: not a checkpoint file", line=1)
    end = data.find(b"end-header\n")
    if end < 0:
        raise ParseError(f"{path}: truncated header")
    header = data[len(MAGIC):end].decode("ascii").splitlines()
    body = data[end + len(b"end-header\n"):]
    fields, meta, specs = {}, {}, []
    for lineno, line in enumerate(header, start=2):
        if line.startswith("tensor "):
            _, name, shape, off, n = line.split(" ")
            shape = tuple(int(s) for s in shape.split(",") if s)
            specs.append((name, shape, int(off), int(n)))
            continue
        if ": " not in line:
            raise ParseError(f"bad header line {line!r}", line=lineno)
        k, v = line.split(": ", 1)
        if k.startswith("meta."):
            meta[k[5:]] = _parse_scalar(v)
        else:
            fields[k] = _parse_scalar(v)
    if fields.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {fields.get('format_version')}")
    cfg = ModelConfig(V=fields["V"], d=fields["d"], n_layers=fields["n_layers"],
                      n_heads=fields["n_heads"], max_len=fields["max_len"])
    tensors = {}
    for name, shape, off, n in specs:
        arr = np.frombuffer(body[off:off + n], dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ParseError(f"{path}: tensor {name} has wrong byte count")
        tensors[name] = arr.reshape(shape).astype(np.float32)
    params = ModelParams(cfg, tensors)
    spec = TokenSpec(fields["token_V"], fields["token_lo"], fields["token_hi"])
    return (params, spec, (fields["mu_lo"], fields["mu_hi"]),
            (fields["sigma_lo"], fields["sigma_hi"]), meta)
