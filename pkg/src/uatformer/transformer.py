"""Single-block Transformer: scaled dot-product attention, multi-head
attention, position-wise FFN, sinusoidal positional encoding and the
composed block.

Token sequences are arrays of shape ``(n, d)``. Every forward function also
accepts a leading batch axis ``(B, n, d)``.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .linalg import ShapeError, layer_norm, matmul, relu, softmax_rows


@dataclass
class HeadParams:
    wq: np.ndarray  # d x d_k
    wk: np.ndarray  # d x d_k
    wv: np.ndarray  # d x d_v


@dataclass
class MhaParams:
    heads: List[HeadParams]
    wo: np.ndarray  # (h * d_v) x d_out

    @property
    def d_in(self) -> int:
        return self.heads[0].wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.heads[0].wq.shape[1]

    @property
    def d_v(self) -> int:
        return self.heads[0].wv.shape[1]

    @property
    def d_out(self) -> int:
        return self.wo.shape[1]

    def validate(self):
        if not self.heads:
            raise ShapeError("multi-head attention needs at least one head")
        d, dk, dv = self.d_in, self.d_k, self.d_v
        for j, hp in enumerate(self.heads):
            if hp.wq.shape != (d, dk) or hp.wk.shape != (d, dk) or hp.wv.shape != (d, dv):
                raise ShapeError(
                    f"head {j} shapes {hp.wq.shape}, {hp.wk.shape}, {hp.wv.shape} "
                    f"inconsistent with d={d}, d_k={dk}, d_v={dv}"
                )
        if self.wo.shape[0] != len(self.heads) * dv:
            raise ShapeError(f"wo has {self.wo.shape[0]} rows, expected h*d_v={len(self.heads) * dv}")


@dataclass
class FfnParams:
    w1: np.ndarray  # d x d_ff
    b1: np.ndarray  # d_ff
    w2: np.ndarray  # d_ff x d
    b2: np.ndarray  # d

    def validate(self):
        d, dff = self.w1.shape
        if dff < 1:
            raise ShapeError("FFN hidden dimension must be >= 1")
        if self.b1.shape != (dff,) or self.w2.shape != (dff, d) or self.b2.shape != (d,):
            raise ShapeError(
                f"FFN shapes do not chain: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )


@dataclass
class BlockParams:
    """All parameters of one Transformer block.

    With ``use_layernorm`` set, normalization is applied after each sublayer
    (post-LN) and the four ``ln*`` vectors must be present.
    """

    mha: MhaParams
    ffn: FfnParams
    use_residual: bool = True
    use_layernorm: bool = False
    scale_dim: Optional[int] = None
    ln1_gain: Optional[np.ndarray] = None
    ln1_bias: Optional[np.ndarray] = None
    ln2_gain: Optional[np.ndarray] = None
    ln2_bias: Optional[np.ndarray] = None
    ln_eps: float = field(default=1e-5)

    def __post_init__(self):
        if self.scale_dim is None:
            self.scale_dim = self.mha.d_k
        self.validate()

    def validate(self):
        self.mha.validate()
        self.ffn.validate()
        if self.scale_dim < 1:
            raise ShapeError("scale_dim must be >= 1")
        d_out = self.mha.d_out
        if self.ffn.w1.shape[0] != d_out:
            raise ShapeError(f"FFN input dim {self.ffn.w1.shape[0]} != attention output dim {d_out}")
        if self.use_residual and d_out != self.mha.d_in:
            raise ShapeError(f"residual needs d_out == d_in, got {d_out} vs {self.mha.d_in}")
        if self.use_layernorm:
            for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                v = getattr(self, name)
                if v is None or v.shape != (d_out,):
                    raise ShapeError(f"{name} must be a vector of length {d_out}")

    @property
    def n_heads(self) -> int:
        return len(self.mha.heads)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Ordered name -> array mapping (the arrays themselves, not copies)."""
        out = {}
        for j, hp in enumerate(self.mha.heads):
            out[f"head{j}.wq"] = hp.wq
            out[f"head{j}.wk"] = hp.wk
            out[f"head{j}.wv"] = hp.wv
        out["wo"] = self.mha.wo
        out["ffn.w1"] = self.ffn.w1
        out["ffn.b1"] = self.ffn.b1
        out["ffn.w2"] = self.ffn.w2
        out["ffn.b2"] = self.ffn.b2
        if self.use_layernorm:
            out["ln1.gain"] = self.ln1_gain
            out["ln1.bias"] = self.ln1_bias
            out["ln2.gain"] = self.ln2_gain
            out["ln2.bias"] = self.ln2_bias
        return out

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "BlockParams":
        """New BlockParams with the same flags and the given arrays."""
        heads = [
            HeadParams(arrays[f"head{j}.wq"], arrays[f"head{j}.wk"], arrays[f"head{j}.wv"])
            for j in range(self.n_heads)
        ]
        ffn = FfnParams(arrays["ffn.w1"], arrays["ffn.b1"], arrays["ffn.w2"], arrays["ffn.b2"])
        ln = {}
        if self.use_layernorm:
            ln = dict(
                ln1_gain=arrays["ln1.gain"], ln1_bias=arrays["ln1.bias"],
                ln2_gain=arrays["ln2.gain"], ln2_bias=arrays["ln2.bias"],
            )
        return replace(self, mha=MhaParams(heads, arrays["wo"]), ffn=ffn, **ln)

    def copy(self) -> "BlockParams":
        return self.with_arrays({k: v.copy() for k, v in self.named_arrays().items()})


def _check_tokens(x, d) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != d or x.shape[-2] < 1:
        raise ShapeError(f"token sequence of shape {x.shape} does not match model dimension {d}")
    return x


def attention_weights(q, k, scale_dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query shape {q.shape} and key shape {k.shape} differ in width")
    if scale_dim < 1:
        raise ShapeError("scale_dim must be >= 1")
    return softmax_rows(matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(scale_dim))


def self_attention(x, head: HeadParams, scale_dim: int) -> np.ndarray:
    x = _check_tokens(x, head.wq.shape[0])
    q, k, v = matmul(x, head.wq), matmul(x, head.wk), matmul(x, head.wv)
    return matmul(attention_weights(q, k, scale_dim), v)


def multi_head_attention(x, p: MhaParams, scale_dim: int) -> np.ndarray:
    zs = [self_attention(x, hp, scale_dim) for hp in p.heads]
    return matmul(np.concatenate(zs, axis=-1), p.wo)


def position_wise_ffn(z, p: FfnParams) -> np.ndarray:
    z = _check_tokens(z, p.w1.shape[0])
    return matmul(relu(matmul(z, p.w1) + p.b1), p.w2) + p.b2


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table of shape ``(n, d)``; ``d`` must be even."""
    if d % 2:
        raise ShapeError(f"positional encoding requires an even dimension, got d={d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def transformer_block(x, p: BlockParams) -> np.ndarray:
    """Attention sublayer followed by the position-wise FFN.

    ``a = MHA(x) [+ x]``, ``y = FFN(a) [+ a]``; with layernorm on, each sum is
    normalized afterwards.
    """
    x = _check_tokens(x, p.mha.d_in)
    a = multi_head_attention(x, p.mha, p.scale_dim)
    if p.use_residual:
        a = a + x
    if p.use_layernorm:
        a = layer_norm(a, p.ln1_gain, p.ln1_bias, p.ln_eps)[0]
    y = position_wise_ffn(a, p.ffn)
    if p.use_residual:
        y = y + a
    if p.use_layernorm:
        y = layer_norm(y, p.ln2_gain, p.ln2_bias, p.ln_eps)[0]
    return y


def query_attention(xq, context, head: HeadParams, scale_dim: int):
    """Attention row of a query token prepended to a shared context.

    For each row ``xq[b]`` this is row 0 of the attention computed on the
    sequence ``[xq[b]; context]``. Returns ``(weights, z)`` where ``weights``
    has shape ``(B, 1 + m)`` (self weight first) and ``z`` is ``(B, d_v)``.
    """
    q = matmul(xq, head.wq)
    k_self = matmul(xq, head.wk)
    k_ctx = matmul(context, head.wk)
    scores = np.concatenate(
        [(q * k_self).sum(axis=-1, keepdims=True), matmul(q, k_ctx.T)], axis=-1
    ) / np.sqrt(scale_dim)
    w = softmax_rows(scores)
    z = w[:, :1] * matmul(xq, head.wv) + matmul(w[:, 1:], matmul(context, head.wv))
    return w, z


def transformer_block_query(xq, context, p: BlockParams) -> np.ndarray:
    """Block output at position 0 for every sequence ``[xq[b]; context]``.

    Equivalent to ``transformer_block(np.vstack([xq[b], context]), p)[0]``
    but the context projections are computed once for the whole batch, and
    the other positions (which position 0 does not depend on) are skipped.
    """
    xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
    context = np.asarray(context, dtype=np.float64)
    d = p.mha.d_in
    if xq.shape[-1] != d or context.ndim != 2 or context.shape[-1] != d:
        raise ShapeError(f"query {xq.shape} / context {context.shape} do not match d={d}")
    zs = [query_attention(xq, context, hp, p.scale_dim)[1] for hp in p.mha.heads]
    a = matmul(np.concatenate(zs, axis=-1), p.mha.wo)
    if p.use_residual:
        a = a + xq
    if p.use_layernorm:
        a = layer_norm(a, p.ln1_gain, p.ln1_bias, p.ln_eps)[0]
    y = position_wise_ffn(a, p.ffn)
    if p.use_residual:
        y = y + a
    if p.use_layernorm:
        y = layer_norm(y, p.ln2_gain, p.ln2_bias, p.ln_eps)[0]
    return y


def identity_ffn(d: int, signed: bool = True) -> FfnParams:
    """FFN weights that pass their input through unchanged.

    With ``signed`` the hidden layer holds ``relu(z)`` and ``relu(-z)`` so the
    map is exact for inputs of any sign; otherwise ``w1 = w2 = I`` which is
    the identity on nonnegative inputs only.
    """
    eye = np.eye(d)
    if signed:
        return FfnParams(np.hstack([eye, -eye]), np.zeros(2 * d), np.vstack([eye, -eye]), np.zeros(d))
    return FfnParams(eye.copy(), np.zeros(d), eye.copy(), np.zeros(d))


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_block_params(
    d: int,
    n_heads: int,
    d_ff: int,
    rng: np.random.Generator,
    d_k: Optional[int] = None,
    d_v: Optional[int] = None,
    use_residual: bool = True,
    use_layernorm: bool = False,
    random_biases: bool = False,
) -> BlockParams:
    """Glorot-uniform initialization; ``d_k = d_v = d // n_heads`` by default.

    ``random_biases`` also randomizes biases and layernorm gains, which is
    what gradient checks want (zeros hide bugs).
    """
    d_k = d_k or max(d // n_heads, 1)
    d_v = d_v or max(d // n_heads, 1)
    heads = [HeadParams(_glorot(rng, d, d_k), _glorot(rng, d, d_k), _glorot(rng, d, d_v)) for _ in range(n_heads)]
    wo = _glorot(rng, n_heads * d_v, d)
    if random_biases:
        b1, b2 = rng.uniform(-0.5, 0.5, d_ff), rng.uniform(-0.5, 0.5, d)
    else:
        b1, b2 = np.zeros(d_ff), np.zeros(d)
    ffn = FfnParams(_glorot(rng, d, d_ff), b1, _glorot(rng, d_ff, d), b2)
    ln = {}
    if use_layernorm:
        if random_biases:
            ln = dict(
                ln1_gain=rng.uniform(0.5, 1.5, d), ln1_bias=rng.uniform(-0.5, 0.5, d),
                ln2_gain=rng.uniform(0.5, 1.5, d), ln2_bias=rng.uniform(-0.5, 0.5, d),
            )
        else:
            ln = dict(ln1_gain=np.ones(d), ln1_bias=np.zeros(d), ln2_gain=np.ones(d), ln2_bias=np.zeros(d))
    return BlockParams(MhaParams(heads, wo), ffn, use_residual=use_residual, use_layernorm=use_layernorm, **ln)
