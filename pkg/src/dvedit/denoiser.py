"""Content denoiser, structure adapter and motion module, plus their composition.

The three parameter sets are separate ``nn.Module`` objects so that each can be
trained, frozen, hashed and swapped on its own. The content UNet exposes two
hooks in its forward pass: decoder-side residuals from a structure adapter and
temporal blocks from a motion module. Both hooks are zero at initialization,
so a freshly attached adapter or motion module leaves predictions unchanged.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffusion import make_linear_schedule
from .text import PROMPT_LENGTH, VOCAB, TextCondition

_EXACT_BATCHING = contextvars.ContextVar("exact_batching", default=False)


@contextlib.contextmanager
def exact_batching(enabled: bool = True) -> Iterator[None]:
    """Run convolutions through a batch-invariant im2col + GEMM path.

    The default oneDNN kernels pick different blocking for different batch
    sizes, so a frame convolved alone and inside a 16-frame batch can differ in
    the last bit. Inference entry points enable this mode so that per-frame and
    per-clip predictions are bit-comparable. Training leaves it off.
    """
    token = _EXACT_BATCHING.set(enabled)
    try:
        yield
    finally:
        _EXACT_BATCHING.reset(token)


def _per_sample_matmul(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for ``x`` of shape ``(N, M, K)``, one GEMM per sample.

    Folded or batched GEMMs may pick a different kernel as N changes (a batch
    of one, or M = 1, takes other paths). Each sample is copied to a fresh,
    aligned buffer so every call sees identical shapes, strides and alignment.
    """
    wt = weight.t()
    return torch.stack([x[i].clone(memory_format=torch.contiguous_format) @ wt for i in range(x.shape[0])])


class Conv2d(nn.Conv2d):
    def forward(self, x: Tensor) -> Tensor:
        if not _EXACT_BATCHING.get():
            return super().forward(x)
        n, _, h, w = x.shape
        k, s, p = self.kernel_size[0], self.stride[0], self.padding[0]
        h_out, w_out = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        cols = F.unfold(x, k, padding=p, stride=s).transpose(1, 2)
        out = _per_sample_matmul(cols, self.weight.reshape(self.out_channels, -1))
        if self.bias is not None:
            out = out + self.bias
        return out.transpose(1, 2).reshape(n, self.out_channels, h_out, w_out).contiguous()


class Linear(nn.Linear):
    def forward(self, x: Tensor) -> Tensor:
        if not _EXACT_BATCHING.get() or x.dim() != 3:
            return super().forward(x)
        out = _per_sample_matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class GroupNorm(nn.GroupNorm):
    def forward(self, x: Tensor) -> Tensor:
        if not _EXACT_BATCHING.get():
            return super().forward(x)
        # With 1x1 maps the kernel's memory-format choice depends on the batch size.
        return torch.cat([super(GroupNorm, self).forward(x[i : i + 1].clone(memory_format=torch.contiguous_format)) for i in range(x.shape[0])])


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def sinusoidal_embedding(positions: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 192
    widths: tuple[int, int] = (48, 64)
    attention_heads: int = 4
    embed_dim: int = 32
    time_dim: int = 128
    groups: int = 8
    vocab_size: int = len(VOCAB)
    prompt_length: int = PROMPT_LENGTH
    structure_channels: int = 1
    patch: int = 8
    hint_width: int = 32
    num_frames: int = 16
    motion_heads: int = 4
    motion_ff_mult: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != 2:
            raise ValueError("the toy UNet has exactly two resolution levels")
        if max(self.widths) > 64:
            raise ValueError("desk-scale widths are capped at 64 channels")
        for w in self.widths:
            if w % self.groups or w % self.attention_heads or w % self.motion_heads:
                raise ValueError(f"width {w} must divide by groups and head counts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = GroupNorm(groups, in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = GroupNorm(groups, out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        # temb has one row per sample, or a single row shared by the whole batch
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial tokens attend to the text-condition embedding."""

    def __init__(self, ch: int, context_dim: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = GroupNorm(groups, ch)
        self.to_q = Linear(ch, ch, bias=False)
        self.to_k = Linear(context_dim, ch, bias=False)
        self.to_v = Linear(context_dim, ch, bias=False)
        self.to_out = Linear(ch, ch)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        n, c, h, w = x.shape
        d = c // self.heads
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(tokens).reshape(n, h * w, self.heads, d).transpose(1, 2)
        k = self.to_k(context).reshape(context.shape[0], -1, self.heads, d).transpose(1, 2)
        v = self.to_v(context).reshape(context.shape[0], -1, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, h * w, c)
        return x + self.to_out(out).transpose(1, 2).reshape(n, c, h, w)


class _Encoder(nn.Module):
    """Timestep MLP plus the downsampling half of the UNet.

    Shared by the content UNet and the structure adapter, which starts as a
    copy of the content encoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        w0, w1 = config.widths
        g = config.groups
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim // 2, config.time_dim), nn.SiLU(), nn.Linear(config.time_dim, config.time_dim)
        )
        self.conv_in = Conv2d(config.latent_channels, w0, 3, padding=1)
        self.down0_res = ResBlock(w0, w0, config.time_dim, g)
        self.down0_attn = CrossAttention(w0, config.embed_dim, config.attention_heads, g)
        self.downsample = Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down1_res = ResBlock(w1, w1, config.time_dim, g)
        self.down1_attn = CrossAttention(w1, config.embed_dim, config.attention_heads, g)
        self.mid = ResBlock(w1, w1, config.time_dim, g)

    def time_embedding(self, t: Tensor, dtype: torch.dtype) -> Tensor:
        half = self.time_mlp[0].in_features
        return self.time_mlp(sinusoidal_embedding(t, half).to(dtype))

    def run(self, h: Tensor, temb: Tensor, context: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        skip0 = self.down0_attn(self.down0_res(h, temb), context)
        skip1 = self.down1_attn(self.down1_res(self.downsample(skip0), temb), context)
        return skip0, skip1, self.mid(skip1, temb)


class ContentUNet(_Encoder):
    """Two-level text-conditioned UNet over single latent frames (the content weights)."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__(config)
        self.config = config
        w0, w1 = config.widths
        g = config.groups
        self.token_embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        self.up1_res = ResBlock(2 * w1, w1, config.time_dim, g)
        self.up1_attn = CrossAttention(w1, config.embed_dim, config.attention_heads, g)
        self.upsample = Conv2d(w1, w0, 3, padding=1)
        self.up0_res = ResBlock(2 * w0, w0, config.time_dim, g)
        self.up0_attn = CrossAttention(w0, config.embed_dim, config.attention_heads, g)
        self.out_norm = GroupNorm(g, w0)
        self.conv_out = Conv2d(w0, config.latent_channels, 3, padding=1)
        # The latent has more channels than the trunk is wide. The noise the
        # trunk cannot represent is carried by a gain on x_t: per channel and
        # timestep (skip_gain), modulated per location by the trunk (skip_gate).
        self.skip_gain = nn.Linear(config.time_dim, config.latent_channels)
        self.skip_gate = zero_module(Conv2d(w0, config.latent_channels, 3, padding=1))

    def embed(self, tokens: Tensor) -> Tensor:
        return self.token_embedding(tokens)

    def forward(
        self,
        x: Tensor,
        t: Union[int, Tensor],
        context: Tensor,
        residuals: Optional[tuple[Tensor, Tensor, Tensor]] = None,
        motion: Optional[MotionModule] = None,
        num_frames: int = 1,
    ) -> Tensor:
        """Predict noise for a batch of frames.

        Args:
            x: latents ``(N, C, h, w)``; with ``motion`` the batch is ``B * num_frames``
                frames laid out clip-major.
            t: one timestep shared by the batch, or a ``(N,)`` tensor.
            context: token ids ``(N|1, L)`` or embeddings ``(N|1, L, D)``.
            residuals: adapter outputs added to skip0, skip1 and the mid block.
            motion: temporal blocks on the coarse decoder level and on the latent output.
        """
        if not context.is_floating_point():
            context = self.embed(context)
        context = context.to(x.dtype)
        t = _timestep_tensor(t, x.shape[0])
        temb = self.time_embedding(t, x.dtype)
        skip0, skip1, h = self.run(self.conv_in(x), temb, context)
        if residuals is not None:
            r0, r1, rmid = residuals
            skip0, skip1, h = skip0 + r0, skip1 + r1, h + rmid
        h = self.up1_attn(self.up1_res(torch.cat([h, skip1], dim=1), temb), context)
        if motion is not None:
            h = motion.blocks[0](h, num_frames)
        h = self.upsample(F.interpolate(h, size=skip0.shape[-2:], mode="nearest"))
        h = self.up0_attn(self.up0_res(torch.cat([h, skip0], dim=1), temb), context)
        h = F.silu(self.out_norm(h))
        gain = self.skip_gain(F.silu(temb))[:, :, None, None] + self.skip_gate(h)
        eps = self.conv_out(h) + gain * x
        if motion is not None:
            eps = motion.refine_noise(x, eps, t.expand(x.shape[0]), num_frames)
        return eps

    def output_head(self) -> list[nn.Module]:
        return [self.conv_out, self.skip_gain, self.skip_gate]


def _timestep_tensor(t: Union[int, Tensor], batch: int) -> Tensor:
    if isinstance(t, Tensor) and t.dim() > 0:
        if t.shape[0] != batch:
            raise ValueError(f"{t.shape[0]} timesteps for a batch of {batch}")
        return t
    # A shared timestep is embedded once and broadcast, keeping results batch-invariant.
    return torch.tensor([int(t)])


class StructureAdapter(_Encoder):
    """ControlNet-style branch: encoder copy plus a hint encoder and zero projections."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__(config)
        self.config = config
        w0, w1 = config.widths
        hint_in = config.structure_channels * config.patch**2
        self.hint = nn.Sequential(
            Conv2d(hint_in, config.hint_width, 3, padding=1),
            nn.SiLU(),
            Conv2d(config.hint_width, config.hint_width, 3, padding=1),
            nn.SiLU(),
            zero_module(Conv2d(config.hint_width, w0, 3, padding=1)),
        )
        self.zero_skip0 = zero_module(Conv2d(w0, w0, 1))
        self.zero_skip1 = zero_module(Conv2d(w1, w1, 1))
        self.zero_mid = zero_module(Conv2d(w1, w1, 1))

    @classmethod
    def from_content(cls, content: ContentUNet) -> StructureAdapter:
        """Adapter whose encoder copy starts from the content encoder weights."""
        adapter = cls(content.config)
        own = adapter.state_dict()
        state = {k: v.detach().clone() for k, v in content.state_dict().items() if k in own}
        adapter.load_state_dict(state, strict=False)
        return adapter

    def injection_projections(self) -> list[nn.Module]:
        return [self.hint[-1], self.zero_skip0, self.zero_skip1, self.zero_mid]

    def forward(self, x: Tensor, t: Union[int, Tensor], context: Tensor, structure: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Residuals for skip0, skip1 and mid given pixel-resolution ``structure`` maps ``(N, S, H, W)``."""
        hint = F.pixel_unshuffle(structure.to(x.dtype), self.config.patch)
        t = _timestep_tensor(t, x.shape[0])
        temb = self.time_embedding(t, x.dtype)
        skip0, skip1, mid = self.run(self.conv_in(x) + self.hint(hint), temb, context.to(x.dtype))
        return self.zero_skip0(skip0), self.zero_skip1(skip1), self.zero_mid(mid)


class TemporalBlock(nn.Module):
    """Self-attention along the frame axis at every spatial location."""

    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.to_qkv = Linear(dim, 3 * dim, bias=False)
        self.to_out = zero_module(Linear(dim, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(Linear(dim, ff_mult * dim), nn.GELU(), zero_module(Linear(ff_mult * dim, dim)))

    def forward(self, x: Tensor, num_frames: int) -> Tensor:
        nf, c, h, w = x.shape
        if nf % num_frames:
            raise ValueError(f"batch of {nf} frames is not a whole number of {num_frames}-frame clips")
        b = nf // num_frames
        seq = x.reshape(b, num_frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, num_frames, c)
        pos = sinusoidal_embedding(torch.arange(num_frames), c).to(x.dtype)
        hs = self.norm1(seq) + pos
        q, k, v = self.to_qkv(hs).chunk(3, dim=-1)
        d = c // self.heads
        q, k, v = (u.reshape(-1, num_frames, self.heads, d).transpose(1, 2) for u in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, num_frames, c)
        seq = seq + self.to_out(out)
        seq = seq + self.ff(self.norm2(seq))
        return seq.reshape(b, h * w, num_frames, c).permute(0, 2, 3, 1).reshape(nf, c, h, w)


class LatentTemporalBlock(nn.Module):
    """Temporal attention at latent width whose update is linear in its input.

    Queries and keys come from the normalized input; values do not, so the
    update ``W_o (sum_g A_fg v_g - v_f)`` scales with the input and uniform
    attention reduces it to "frame average minus own frame".
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_qk = Linear(dim, 2 * dim, bias=False)
        self.to_v = Linear(dim, dim, bias=False)
        self.to_out = zero_module(Linear(dim, dim, bias=False))
        # Start as similarity attention (non-local means across frames): queries
        # and keys are the normalized input and values the input itself.
        with torch.no_grad():
            eye = torch.eye(dim)
            self.to_qk.weight.copy_(torch.cat([eye, eye]))
            self.to_v.weight.copy_(eye)

    def forward(self, x: Tensor, num_frames: int) -> Tensor:
        """Return the update for ``x`` ``(B * F, C, h, w)``; exactly zero while ``to_out`` is zero."""
        nf, c, h, w = x.shape
        if nf % num_frames:
            raise ValueError(f"batch of {nf} frames is not a whole number of {num_frames}-frame clips")
        b = nf // num_frames
        seq = x.reshape(b, num_frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, num_frames, c)
        pos = sinusoidal_embedding(torch.arange(num_frames), c).to(x.dtype)
        q, k = self.to_qk(self.norm(seq) + pos).chunk(2, dim=-1)
        v = self.to_v(seq)
        d = c // self.heads
        q, k, v = (u.reshape(-1, num_frames, self.heads, d).transpose(1, 2) for u in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ v - v).transpose(1, 2).reshape(-1, num_frames, c)
        out = self.to_out(out)
        return out.reshape(b, h * w, num_frames, c).permute(0, 2, 3, 1).reshape(nf, c, h, w)


class MotionModule(nn.Module):
    """Two temporal transformer blocks: one on the coarse decoder features, one on
    the full-width latent prediction.

    The trunk is far narrower than the 192-channel latent, so cross-frame
    agreement at fine detail has to be established at latent width. The latent
    block works on ``u = x / sqrt(1 - a) - eps``, which is the clean-latent
    estimate scaled by ``sqrt(a / (1 - a))``: agreeing across frames means the
    same thing at every timestep, and a change to ``u`` is exactly the negated
    change to ``eps``. This needs the schedule's cumulative alphas, kept as a
    buffer.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), alpha_bars: Optional[Sequence[float]] = None):
        super().__init__()
        self.config = config
        if alpha_bars is None:
            alpha_bars = make_linear_schedule().alpha_bars
        self.register_buffer("alpha_bars", torch.tensor([float(a) for a in alpha_bars]))
        if config.latent_channels % config.motion_heads:
            raise ValueError("latent_channels must divide by motion_heads")
        self.blocks = nn.ModuleList(
            [
                TemporalBlock(config.widths[1], config.motion_heads, config.motion_ff_mult),
                LatentTemporalBlock(config.latent_channels, config.motion_heads),
            ]
        )

    def output_projections(self) -> list[nn.Module]:
        coarse, latent = self.blocks
        return [coarse.to_out, coarse.ff[-1], latent.to_out]

    def refine_noise(self, x: Tensor, eps: Tensor, t: Tensor, num_frames: int) -> Tensor:
        """Correct per-frame noise predictions ``eps`` at ``x`` (timesteps ``t``, ``(N,)``)."""
        a = self.alpha_bars.to(x.dtype)[t][:, None, None, None]
        return eps - self.blocks[1](x / (1 - a).sqrt() - eps, num_frames)


PART_NAMES = ("content", "structure", "motion")


def named_tensors(module: nn.Module) -> list[tuple[str, Tensor]]:
    return [(name, t.detach()) for name, t in module.state_dict().items()]


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over names, shapes and float32 little-endian values."""
    h = hashlib.sha256()
    for name, t in named_tensors(module):
        h.update(name.encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def architecture_signature(module: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(t.shape)) for name, t in named_tensors(module)]


class SignatureMismatchError(ValueError):
    pass


class MissingModuleError(ValueError):
    pass


def check_signature(expected: nn.Module, actual: nn.Module) -> None:
    a, b = architecture_signature(expected), architecture_signature(actual)
    for (na, sa), (nb, sb) in zip(a, b):
        if na != nb or sa != sb:
            raise SignatureMismatchError(f"first differing parameter: {na} {sa} vs {nb} {sb}")
    if len(a) != len(b):
        raise SignatureMismatchError(f"parameter count differs: {len(a)} vs {len(b)}")


@dataclass
class ModelBundle:
    content: ContentUNet
    structure: Optional[StructureAdapter] = None
    motion: Optional[MotionModule] = None
    frozen: dict[str, bool] = field(default_factory=lambda: {"content": True, "structure": False, "motion": False})
    reports: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("structure", "motion"):
            part = getattr(self, name)
            if part is not None and part.config != self.content.config:
                raise SignatureMismatchError(f"{name} was built for {part.config}, content is {self.content.config}")

    @property
    def config(self) -> ModelConfig:
        return self.content.config

    def parts(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in PART_NAMES if getattr(self, name) is not None}

    def hashes(self) -> dict[str, str]:
        return {name: parameter_hash(m) for name, m in self.parts().items()}

    def signature(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "content": [[n, list(s)] for n, s in architecture_signature(self.content)],
        }

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise MissingModuleError(f"bundle has no {name} module")


def swap_content(bundle: ModelBundle, new_content: ContentUNet) -> ModelBundle:
    """Replace the content weights; structure and motion parts are shared, not copied."""
    check_signature(bundle.content, new_content)
    if new_content.config != bundle.config:
        raise SignatureMismatchError(f"config differs: {new_content.config} vs {bundle.config}")
    reports = [r for r in bundle.reports if r.get("stage") != "I"]
    return ModelBundle(new_content, bundle.structure, bundle.motion, dict(bundle.frozen), reports)


ConditionLike = Union[TextCondition, Tensor]


def condition_context(content: ContentUNet, c: ConditionLike) -> Tensor:
    """Embedding ``(1|N, L, D)`` for a condition, token tensor or ready embedding."""
    if isinstance(c, TextCondition):
        c = c.tensor()
    if c.is_floating_point():
        return c if c.dim() == 3 else c.unsqueeze(0)
    if c.dim() == 1:
        c = c.unsqueeze(0)
    if int(c.min()) < 0 or int(c.max()) >= content.config.vocab_size:
        raise ValueError("token id outside the vocabulary")
    return content.embed(c)


def _check_frame(content: ContentUNet, x: Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != content.config.latent_channels:
        raise ValueError(f"expected latent frames (N, {content.config.latent_channels}, h, w), got {tuple(x.shape)}")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"latent spatial size {tuple(x.shape[-2:])} must be even")


def _check_structure(config: ModelConfig, x: Tensor, s: Tensor) -> None:
    expected = (config.structure_channels, x.shape[-2] * config.patch, x.shape[-1] * config.patch)
    if s.dim() != 4 or tuple(s.shape[1:]) != expected or s.shape[0] != x.shape[0]:
        raise ValueError(f"structure maps {tuple(s.shape)} incompatible with latents {tuple(x.shape)}; need (N, *{expected})")


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


@torch.no_grad()
def predict_noise_image(content: ContentUNet, x_t: Tensor, t: int, c: ConditionLike) -> Tensor:
    """Content-only noise prediction for one frame ``(C, h, w)`` or a batch of frames."""
    x, single = _as_batch(x_t)
    _check_frame(content, x)
    with exact_batching():
        eps = content(x, t, condition_context(content, c))
    return eps[0] if single else eps


@torch.no_grad()
def predict_noise_structured(
    content: ContentUNet, adapter: StructureAdapter, x_t: Tensor, t: int, c: ConditionLike, s: Tensor
) -> Tensor:
    """Noise prediction with adapter residuals; ``s`` is ``(S, H, W)`` per frame."""
    x, single = _as_batch(x_t)
    s = s.unsqueeze(0) if single else s
    _check_frame(content, x)
    _check_structure(content.config, x, s)
    with exact_batching():
        context = condition_context(content, c)
        residuals = adapter(x, t, context, s)
        eps = content(x, t, context, residuals=residuals)
    return eps[0] if single else eps


@torch.no_grad()
def predict_noise_video(
    bundle: ModelBundle, x_t: Tensor, t: int, c: ConditionLike, s: Optional[Tensor] = None
) -> Tensor:
    """Noise prediction for a clip ``(F, C, h, w)`` or a batch of clips ``(B, F, C, h, w)``.

    Spatial layers run per frame (with adapter residuals when ``s`` is given),
    temporal blocks run across frames at every spatial location.
    """
    single = x_t.dim() == 4
    x = x_t.unsqueeze(0) if single else x_t
    b, nf = x.shape[:2]
    frames = x.reshape(b * nf, *x.shape[2:])
    _check_frame(bundle.content, frames)
    residuals = None
    with exact_batching():
        context = condition_context(bundle.content, c)
        if context.shape[0] == b and b > 1:
            context = context.repeat_interleave(nf, dim=0)
        if s is not None:
            bundle.require("structure")
            s = s.unsqueeze(0) if single else s
            if s.shape[:2] != (b, nf):
                raise ValueError(f"structure sequence {tuple(s.shape)} does not match {b} clip(s) of {nf} frames")
            s = s.reshape(b * nf, *s.shape[2:])
            _check_structure(bundle.config, frames, s)
            residuals = bundle.structure(frames, t, context, s)
        eps = bundle.content(frames, t, context, residuals=residuals, motion=bundle.motion, num_frames=nf)
    eps = eps.reshape(x.shape)
    return eps[0] if single else eps
