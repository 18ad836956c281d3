"""Vision-LSTM attention over bottleneck voxels.

Each bottleneck voxel is one token of dimension C. Tokens pass through a
shared projection plus learnable positional embeddings, then a stack of
mLSTM blocks scanning in alternating directions. The stack output is turned
into a per-voxel softmax over channels that gates the original features.

The mLSTM cell keeps a d x d matrix memory ``C``, a normalizer vector ``n``
and a log-domain stabilizer ``m``; the input gate is exponential and the
forget gate is a sigmoid, both evaluated relative to ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import ContractViolation, Tensor
from .tensor import functional as F


@dataclass
class TokenSequence:
    tokens: Tensor               # [B, N, C]
    extent: tuple[int, int, int]


@dataclass
class MlstmState:
    C: Tensor   # [B, d, d]
    n: Tensor   # [B, d]
    m: Tensor   # [B]

    @classmethod
    def zeros(cls, batch: int, d: int, dtype=None) -> "MlstmState":
        return cls(Tensor(np.zeros((batch, d, d)), dtype=dtype),
                   Tensor(np.zeros((batch, d)), dtype=dtype),
                   Tensor(np.zeros(batch), dtype=dtype))

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in (self.C, self.n, self.m))


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def flatten_tokens(f: Tensor) -> Tensor:
    """[B,C,D,H,W] -> [B, D*H*W, C], token index d*H*W + h*W + w."""
    B, C, D, H, W = f.shape
    return F.reshape(F.transpose(f, (0, 2, 3, 4, 1)), (B, D * H * W, C))


def detokenize(t: TokenSequence | Tensor, extent: tuple[int, int, int] | None = None) -> Tensor:
    tokens = t.tokens if isinstance(t, TokenSequence) else t
    extent = extent or t.extent
    D, H, W = extent
    B, N, C = tokens.shape
    if N != D * H * W:
        raise ContractViolation(f"detokenize: {N} tokens do not fill extent {extent}")
    return F.transpose(F.reshape(tokens, (B, D, H, W, C)), (0, 4, 1, 2, 3))


class Tokenizer(Module):
    def __init__(self, channels: int, n_tokens: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.proj = Linear(channels, channels, rng=rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(n_tokens, channels)))

    def forward(self, f: Tensor) -> TokenSequence:
        N = int(np.prod(f.shape[2:]))
        if self.pos_embed.shape != (N, f.shape[1]):
            raise ContractViolation(
                f"tokenizer built for {self.pos_embed.shape} tokens, input gives ({N}, {f.shape[1]})")
        tokens = F.add(self.proj(flatten_tokens(f)), self.pos_embed)
        return TokenSequence(tokens, tuple(f.shape[2:]))


def tokenize(f: Tensor, tokenizer: Tokenizer) -> TokenSequence:
    return tokenizer(f)


# ---------------------------------------------------------------------------
# mLSTM cell
# ---------------------------------------------------------------------------

def mlstm_step(state: MlstmState, q: Tensor, k: Tensor, v: Tensor,
               i_pre: Tensor, f_pre: Tensor, o_pre: Tensor) -> tuple[Tensor, MlstmState]:
    """One stabilized matrix-memory update and read-out.

    Shapes: q, k, v are [B, d]; the gate pre-activations are [B].
    """
    B, d = q.shape
    if k.shape != (B, d) or v.shape != (B, d):
        raise ContractViolation(f"mlstm_step: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    k = F.mul(k, 1.0 / np.sqrt(d))
    log_f = F.log_sigmoid(f_pre)
    log_f_m = F.add(log_f, state.m)
    m_new = F.maximum(log_f_m, i_pre)
    i_gate = F.exp(F.sub(i_pre, m_new))
    f_gate = F.exp(F.sub(log_f_m, m_new))

    outer = F.matmul(F.reshape(v, (B, d, 1)), F.reshape(k, (B, 1, d)))
    C_new = F.add(F.mul(F.reshape(f_gate, (B, 1, 1)), state.C),
                  F.mul(F.reshape(i_gate, (B, 1, 1)), outer))
    n_new = F.add(F.mul(F.reshape(f_gate, (B, 1)), state.n),
                  F.mul(F.reshape(i_gate, (B, 1)), k))

    num = F.reshape(F.matmul(C_new, F.reshape(q, (B, d, 1))), (B, d))
    den = F.maximum(F.abs(F.sum(F.mul(n_new, q), axis=1)), 1.0)
    h_tilde = F.div(num, F.reshape(den, (B, 1)))
    h = F.mul(F.reshape(F.sigmoid(o_pre), (B, 1)), h_tilde)
    return h, MlstmState(C_new, n_new, m_new)


class ViLBlock(Module):
    """Pre-norm mLSTM block with residual connection over a token sequence."""

    def __init__(self, channels: int, inner: int | None = None, direction: str = "forward",
                 rng=None, forget_bias: float = 3.0):
        if direction not in ("forward", "backward"):
            raise ContractViolation(f"unknown scan direction {direction!r}")
        rng = rng or np.random.default_rng(0)
        inner = inner or channels
        self.inner = inner
        self.direction = direction
        self.norm = LayerNorm(channels)
        self.q = Linear(channels, inner, rng=rng)
        self.k = Linear(channels, inner, rng=rng)
        self.v = Linear(channels, inner, rng=rng)
        self.gates = Linear(channels, 3, rng=rng, init_scale=0.1)   # input, forget, output
        self.gates.bias.data[1] = forget_bias
        self.out = Linear(inner, channels, rng=rng, init_scale=0.5)

    def forward(self, t: TokenSequence | Tensor, direction: str | None = None,
                state: MlstmState | None = None, return_state: bool = False):
        tokens = t.tokens if isinstance(t, TokenSequence) else t
        direction = direction or self.direction
        if direction not in ("forward", "backward"):
            raise ContractViolation(f"unknown scan direction {direction!r}")
        B, N, _ = tokens.shape
        xn = self.norm(tokens)
        q, k, v = self.q(xn), self.k(xn), self.v(xn)
        gates = self.gates(xn)
        if state is None:
            state = MlstmState.zeros(B, self.inner, tokens.dtype)
        order = range(N) if direction == "forward" else range(N - 1, -1, -1)
        hs: list[Tensor | None] = [None] * N
        for n in order:
            h, state = mlstm_step(state, q[:, n], k[:, n], v[:, n],
                                  gates[:, n, 0], gates[:, n, 1], gates[:, n, 2])
            hs[n] = h
        out = F.add(tokens, self.out(F.stack(hs, axis=1)))
        if isinstance(t, TokenSequence):
            out = TokenSequence(out, t.extent)
        return (out, state) if return_state else out


def vil_block(t: TokenSequence, block: ViLBlock, direction: str = "forward") -> TokenSequence:
    return block(t, direction)


class ViLStack(Module):
    """Tokenizer -> alternating-direction ViL blocks -> final layer norm."""

    def __init__(self, channels: int, n_tokens: int, n_blocks: int = 2, inner: int | None = None,
                 rng=None):
        rng = rng or np.random.default_rng(0)
        self.tokenizer = Tokenizer(channels, n_tokens, rng)
        self.blocks = [ViLBlock(channels, inner, "forward" if i % 2 == 0 else "backward", rng)
                       for i in range(n_blocks)]
        self.norm = LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        seq = self.tokenizer(x)
        for block in self.blocks:
            seq = block(seq)
        return detokenize(TokenSequence(self.norm(seq.tokens), seq.extent))


def vila_gate(x: Tensor, stack: ViLStack) -> Tensor:
    """``x * softmax_C(stack(x)) + x``."""
    gate = F.softmax(stack(x), axis=1)
    return F.add(F.mul(x, gate), x)


class ViLA(Module):
    def __init__(self, channels: int, n_tokens: int, n_blocks: int = 2, inner: int | None = None,
                 rng=None):
        self.stack = ViLStack(channels, n_tokens, n_blocks, inner, rng)

    def forward(self, x: Tensor) -> Tensor:
        return vila_gate(x, self.stack)
