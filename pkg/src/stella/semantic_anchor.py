"""Behavioral signatures, prompt text and the prompt distillation module.

Each component window is summarized by a small signature (stats, a coarse
trend category and its strongest autocorrelation lags), rendered into a
fixed template, embedded with a frozen encoder and distilled into a handful
of prompt vectors by cross-attention with learned queries. A second query
set distills a dataset description into the corpus prior.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraLinear
from .numerics import masked_softmax

Tensor = torch.Tensor

TREND_CATEGORIES = ("strongly decreasing", "slightly decreasing", "stable",
                    "slightly increasing", "strongly increasing")
SLIGHT, STRONG = 0.05, 0.25
KINDS = ("trend", "seasonal", "residual")


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


@dataclass
class BehavioralSignature:
    min: float
    max: float
    mean: float
    var: float
    slope: float
    trend_category: str
    top_lags: list[tuple[int, float]] = field(default_factory=list)
    length: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_lags"] = [[int(k), float(r)] for k, r in self.top_lags]
        return d


def trend_category(normalized_slope: float) -> str:
    if normalized_slope <= -STRONG:
        return TREND_CATEGORIES[0]
    if normalized_slope <= -SLIGHT:
        return TREND_CATEGORIES[1]
    if normalized_slope < SLIGHT:
        return TREND_CATEGORIES[2]
    if normalized_slope < STRONG:
        return TREND_CATEGORIES[3]
    return TREND_CATEGORIES[4]


def autocorrelations(z: np.ndarray) -> np.ndarray:
    """Sample ACF at lags 1..S-1 for each row of an N x S array (NaN rows when constant)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = z - z.mean(axis=1, keepdims=True)
    den = np.sum(d * d, axis=1)
    s = z.shape[1]
    out = np.empty((z.shape[0], s - 1))
    for k in range(1, s):
        out[:, k - 1] = np.sum(d[:, :-k] * d[:, k:], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = out / den[:, None]
    out[den == 0] = np.nan
    return out


def extract_signatures(z: np.ndarray, k: int = 3) -> list[BehavioralSignature]:
    """Vectorized signatures for every row of an N x S array."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, s = z.shape
    if s < 3:
        raise ValueError(f"signature needs at least 3 steps, got {s}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    lo, hi, mu = z.min(axis=1), z.max(axis=1), z.mean(axis=1)
    var = z.var(axis=1)
    t = np.arange(s, dtype=np.float64)
    tc = t - t.mean()
    # row-wise reduction rather than a matmul so a row's slope does not depend on batch size
    slope = ((z - mu[:, None]) * tc).sum(axis=1) / np.sum(tc * tc)
    span = hi - lo
    rho = autocorrelations(z)
    sigs = []
    for i in range(n):
        if span[i] == 0:
            sigs.append(BehavioralSignature(lo[i], hi[i], mu[i], 0.0, 0.0, "stable", [], s))
            continue
        norm_slope = slope[i] / (span[i] / s)
        order = np.argsort(-np.abs(rho[i]), kind="stable")[:k]
        lags = [(int(j + 1), float(np.clip(rho[i, j], -1.0, 1.0))) for j in order]
        sigs.append(BehavioralSignature(float(lo[i]), float(hi[i]), float(mu[i]), float(var[i]),
                                        float(slope[i]), trend_category(norm_slope), lags, s))
    return sigs


def extract_signature(z: np.ndarray, k: int = 3) -> BehavioralSignature:
    return extract_signatures(np.asarray(z)[None, :], k)[0]


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------


def fmt(x: float) -> str:
    """Four significant digits; negative zero printed as 0."""
    s = f"{float(x):.4g}"
    return "0" if s == "-0" else s


def _lag_sentence(lag: int, r: float) -> str:
    strength = "strong" if abs(r) >= 0.7 else "moderate" if abs(r) >= 0.3 else "weak"
    sign = "positive" if r >= 0 else "negative"
    return f"Lag {lag} shows {strength} {sign} autocorrelation of {fmt(r)}."


def render_fbp_text(sig: BehavioralSignature, kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown component kind {kind!r}")
    parts = [
        f"The {kind} component is {sig.trend_category} over {sig.length} steps.",
        f"Its minimum is {fmt(sig.min)}, maximum {fmt(sig.max)}, mean {fmt(sig.mean)} "
        f"and variance {fmt(sig.var)}.",
        f"The fitted slope is {fmt(sig.slope)} per step.",
    ]
    if sig.top_lags:
        parts.extend(_lag_sentence(lag, r) for lag, r in sig.top_lags)
    else:
        parts.append("No autocorrelation structure is present.")
    return " ".join(parts)


def render_csp_text(domain: str | None = None, frequency: str | None = None,
                    n_channels: int | None = None) -> str:
    domain = domain or "unknown"
    frequency = frequency or "unknown"
    channels = str(n_channels) if n_channels is not None else "unknown"
    return (f"This dataset comes from the {domain} domain. "
            f"Observations are sampled every {frequency}. "
            f"Each record holds {channels} channels.")


# ---------------------------------------------------------------------------
# Frozen text encoder
# ---------------------------------------------------------------------------

BASE_WORDS = """
the a an of is are and or with per over its it this each from every
component trend seasonal residual dataset domain record holds channels channel
observations sampled steps step minimum maximum mean variance fitted slope
lag lags shows strong moderate weak positive negative autocorrelation no structure
present strongly slightly decreasing increasing stable unknown hour hours min day
days week minute minutes temperature finance health weather energy traffic
electricity economics
""".split()
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class FrozenTextEncoder(nn.Module):
    """Whitespace/punctuation tokenizer with byte fallback and a seeded, frozen table.

    Ids 0..255 are raw bytes, 256 is padding, known words start at 257.
    Texts are padded (or truncated) to ``max_tokens`` so that batch shapes do
    not depend on content.
    """

    PAD = 256

    def __init__(self, d_model: int, vocab_size: int = 4096, max_tokens: int = 128,
                 seed: int = 0, extra_words: tuple[str, ...] = ()):
        super().__init__()
        words = list(dict.fromkeys(w.lower() for w in (*BASE_WORDS, *extra_words)))
        if 257 + len(words) > vocab_size:
            raise ValueError("vocabulary does not fit in the embedding table")
        self.vocab = {w: 257 + i for i, w in enumerate(words)}
        self.vocab_size, self.max_tokens = vocab_size, max_tokens
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("table", torch.randn(vocab_size, d_model, generator=g,
                                                  dtype=torch.float64).float())

    def tokenize(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        ids: list[int] = []
        for piece in _TOKEN_RE.findall(text):
            wid = self.vocab.get(piece.lower())
            if wid is None:
                ids.extend(piece.encode("utf-8"))
            else:
                ids.append(wid)
        return ids

    def encode(self, texts: list[str]) -> tuple[Tensor, Tensor]:
        """Padded ids (N x max_tokens) and a validity mask."""
        ids = torch.full((len(texts), self.max_tokens), self.PAD, dtype=torch.long)
        for i, text in enumerate(texts):
            tok = self.tokenize(text)[: self.max_tokens]
            ids[i, : len(tok)] = torch.tensor(tok, dtype=torch.long)
        return ids, ids != self.PAD

    def embed(self, texts: list[str]) -> tuple[Tensor, Tensor]:
        ids, valid = self.encode(texts)
        return self.table[ids], valid


def embed_text(text: str, enc: FrozenTextEncoder) -> tuple[Tensor, Tensor]:
    """Keys and values of an unpadded text; they coincide before projection."""
    e = enc.table[torch.tensor(enc.tokenize(text), dtype=torch.long)]
    return e, e


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


class CrossAttention(nn.Module):
    """Single-head attention from learned queries to projected text embeddings.

    Keys and values use low-rank adapters over frozen projections. When the
    module serves several groups of queries at once, ``allowed`` carries the
    block-diagonal structure.
    """

    def __init__(self, d_model: int, r: int = 32, alpha: float = 64.0, dropout: float = 0.1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.d_model = d_model
        self.k_proj = LoraLinear(d_model, d_model, r, alpha, dropout, generator=generator)
        self.v_proj = LoraLinear(d_model, d_model, r, alpha, dropout, generator=generator)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, allowed: Tensor) -> tuple[Tensor, Tensor]:
        scores = q @ k.transpose(-1, -2) / self.d_model ** 0.5
        attn = masked_softmax(scores, allowed)
        return attn @ v, attn

    def forward(self, q: Tensor, e: Tensor, allowed: Tensor) -> tuple[Tensor, Tensor]:
        """``q``: N x G x D, ``e``: N x L x D, ``allowed``: N x G x L."""
        return self.attend(q, self.k_proj(e), self.v_proj(e), allowed)

    def forward_ids(self, q: Tensor, table: Tensor, ids: Tensor,
                    allowed: Tensor) -> tuple[Tensor, Tensor]:
        """Same as :meth:`forward` on ``table[ids]``, projecting each vocabulary row once."""
        return self.attend(q, F.embedding(ids, self.k_proj(table)),
                           F.embedding(ids, self.v_proj(table)), allowed)


def block_diagonal_mask(query_groups: list[int], key_valid: list[Tensor]) -> Tensor:
    """N x sum(G) x sum(L): group ``i`` of queries sees only keys of block ``i``."""
    n = key_valid[0].shape[0]
    lens = [kv.shape[1] for kv in key_valid]
    mask = torch.zeros(n, sum(query_groups), sum(lens), dtype=torch.bool)
    qo = ko = 0
    for g, kv in zip(query_groups, key_valid):
        mask[:, qo:qo + g, ko:ko + kv.shape[1]] = kv[:, None, :]
        qo += g
        ko += kv.shape[1]
    return mask


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class SequenceLayout:
    segments: tuple[Segment, ...]

    @property
    def total(self) -> int:
        return sum(s.length for s in self.segments)

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def get(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(f"layout has no segment {name!r}")

    def slice(self, x: Tensor, name: str) -> Tensor:
        if x.shape[1] != self.total:
            raise ValueError(f"sequence length {x.shape[1]} does not match layout total {self.total}")
        s = self.get(name)
        return x[:, s.offset:s.offset + s.length]

    def to_dict(self) -> list[dict]:
        return [asdict(s) for s in self.segments]


def assemble_input(csp: Tensor | None, fbps: dict[str, Tensor] | None,
                   tokens: dict[str, Tensor]) -> tuple[Tensor, SequenceLayout]:
    """``[CSP; FBP_T; E_T; FBP_S; E_S; FBP_R; E_R]`` with absent parts skipped."""
    parts: list[tuple[str, Tensor]] = []
    if csp is not None:
        parts.append(("csp", csp))
    for kind in KINDS:
        if fbps is not None:
            parts.append((f"fbp_{kind}", fbps[kind]))
        parts.append((f"tokens_{kind}", tokens[kind]))
    d = {p.shape[-1] for _, p in parts}
    n = {p.shape[0] for _, p in parts}
    if len(d) != 1 or len(n) != 1:
        raise ValueError(f"inconsistent segment shapes: {[tuple(p.shape) for _, p in parts]}")
    segs, off = [], 0
    for name, p in parts:
        segs.append(Segment(name, off, p.shape[1]))
        off += p.shape[1]
    return torch.cat([p for _, p in parts], dim=1), SequenceLayout(tuple(segs))


@dataclass
class SemanticAnchors:
    csp: Tensor | None  # B x G_csp x D
    fbp: dict[str, Tensor] | None  # each (B*C) x G_fbp x D
    attention: dict[str, Tensor] = field(default_factory=dict)


class SemanticAnchorModule(nn.Module):
    def __init__(self, d_model: int, fbp_len: int = 6, csp_len: int = 10, top_k: int = 3,
                 lora_r: int = 32, lora_alpha: float = 64.0, lora_dropout: float = 0.1,
                 max_tokens: int = 128, text_seed: int = 0, use_fbp: bool = True,
                 use_csp: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        self.d_model, self.fbp_len, self.csp_len, self.top_k = d_model, fbp_len, csp_len, top_k
        self.use_fbp, self.use_csp = use_fbp, use_csp
        self.encoder = FrozenTextEncoder(d_model, max_tokens=max_tokens, seed=text_seed)
        scale = d_model ** -0.5
        self.queries = nn.ParameterDict({
            k: nn.Parameter(torch.randn(fbp_len, d_model, generator=generator) * scale) for k in KINDS
        })
        self.fbp_attn = CrossAttention(d_model, lora_r, lora_alpha, lora_dropout, generator)
        self.query_data = nn.Parameter(torch.randn(csp_len, d_model, generator=generator) * scale)
        self.csp_attn = CrossAttention(d_model, lora_r, lora_alpha, lora_dropout, generator)

    def component_texts(self, component: Tensor, kind: str) -> tuple[list[BehavioralSignature], list[str]]:
        """Signatures and texts for a B x S x C component, ordered b-major as (B*C)."""
        b, s, c = component.shape
        rows = component.detach().double().permute(0, 2, 1).reshape(b * c, s).cpu().numpy()
        sigs = extract_signatures(rows, self.top_k)
        return sigs, [render_fbp_text(sig, kind) for sig in sigs]

    def distill_fbp(self, texts: dict[str, list[str]]) -> tuple[dict[str, Tensor], Tensor]:
        ids, valids = zip(*(self.encoder.encode(texts[k]) for k in KINDS))
        ids = torch.cat(ids, dim=1)
        table = self.encoder.table.to(self.query_data.dtype)
        allowed = block_diagonal_mask([self.fbp_len] * 3, list(valids))
        q = torch.cat([self.queries[k] for k in KINDS], dim=0).expand(ids.shape[0], -1, -1)
        out, attn = self.fbp_attn.forward_ids(q, table, ids, allowed)
        split = out.split(self.fbp_len, dim=1)
        return dict(zip(KINDS, split)), attn

    def distill_csp(self, text: str, batch: int) -> tuple[Tensor, Tensor]:
        ids, valid = self.encoder.encode([text])
        table = self.encoder.table.to(self.query_data.dtype)
        allowed = valid[:, None, :].expand(1, self.csp_len, -1)
        out, attn = self.csp_attn.forward_ids(self.query_data[None], table, ids, allowed)
        return out.expand(batch, -1, -1), attn

    def forward(self, components: dict[str, Tensor], corpus_text: str) -> SemanticAnchors:
        b, _, c = components["trend"].shape
        csp = fbp = None
        attention = {}
        if self.use_csp:
            csp, attention["csp"] = self.distill_csp(corpus_text, b)
        if self.use_fbp:
            texts = {k: self.component_texts(components[k], k)[1] for k in KINDS}
            fbp, attention["fbp"] = self.distill_fbp(texts)
        return SemanticAnchors(csp, fbp, attention)


def broadcast_channels(csp: Tensor, n_channels: int) -> Tensor:
    """B x G x D -> (B*C) x G x D, repeating each instance's prior for its channels."""
    return csp.repeat_interleave(n_channels, dim=0)
