"""Frozen dual-encoder gateway.

A matched pair of encoders maps images to one global vector plus a grid of
patch vectors, and text to per-token embeddings plus a summary (CLS)
vector. Encoders are frozen: they never receive parameter updates. The
text side must stay differentiable with respect to an *injected* token
embedding (the pseudo-word token), because that is the only path training
gradients take through it.

Toy encoders (seeded, deterministic, tiny) make the full pipeline runnable
on a laptop; the adapter base classes document the contract a real
pretrained backbone has to satisfy.
"""

from __future__ import annotations

import abc
import hashlib
import re
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .views import SYNTH_VOCABULARY

__all__ = [
    "EncoderProfile",
    "VisualFeatures",
    "ActionEmbedding",
    "PromptSequence",
    "PLACEHOLDER",
    "tokenize",
    "default_vocabulary",
    "ToyVisionEncoder",
    "ToyTextEncoder",
    "VisionEncoderBase",
    "TextEncoderBase",
    "PretrainedVisionAdapter",
    "PretrainedTextAdapter",
    "build_toy_encoders",
    "toy_profile",
    "paper_scale_profile",
]

PLACEHOLDER = "[*]"

_TOKEN_RE = re.compile(r"\[\*\]|[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


_PROMPT_WORDS = ("photo", "of", "and")


def default_vocabulary() -> tuple[str, ...]:
    return tuple(sorted(SYNTH_VOCABULARY | set(_PROMPT_WORDS)))


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    d: int
    g: int
    seed: int = 0
    frozen: bool = True

    @property
    def m(self) -> int:
        """Token count of the vision side: g*g patches plus one global."""
        return self.g * self.g + 1


def toy_profile(d: int = 32, g: int = 4, seed: int = 0) -> EncoderProfile:
    return EncoderProfile(name="toy", d=d, g=g, seed=seed)


def paper_scale_profile() -> EncoderProfile:
    # the scale a ViT-L/14 dual encoder exposes: 16x16 patch grid + global
    return EncoderProfile(name="pretrained-vit-l", d=1024, g=16)


@dataclass(frozen=True)
class VisualFeatures:
    global_vec: np.ndarray  # (d,)
    patches: np.ndarray  # (g*g, d), row-major over the patch grid
    grid: int

    def __post_init__(self):
        if not (np.isfinite(self.global_vec).all() and np.isfinite(self.patches).all()):
            raise ValueError("visual features contain non-finite entries")
        if self.patches.shape[0] != self.grid * self.grid:
            raise ValueError("patch count does not match the grid")


@dataclass(frozen=True)
class ActionEmbedding:
    vec: np.ndarray  # (d,)

    def __post_init__(self):
        if not np.isfinite(self.vec).all():
            raise ValueError("action embedding contains non-finite entries")


@dataclass(frozen=True)
class PromptSequence:
    """Token ids with exactly one placeholder slot for a continuous embedding."""

    token_ids: tuple[int, ...]
    placeholder_pos: int
    injected: Tensor | None = None

    def inject(self, vec: Tensor) -> "PromptSequence":
        return replace(self, injected=vec)


def _seeded_matrix(rng: np.random.Generator, shape, scale: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


def _single_head_attention(x: Tensor, wq, wk, wv, wo, sharpness: float = 1.0) -> Tensor:
    # undamped logits keep the summary content-selective: a strong token can
    # capture the mixing weights instead of being averaged away
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    scores = ad.matmul(q, ad.transpose(k))
    if sharpness != 1.0:
        scores = ad.mul(scores, sharpness)
    return ad.matmul(ad.matmul(ad.softmax(scores, axis=-1), v), wo)


class VisionEncoderBase(abc.ABC):
    """Contract for the image side of an encoder pair."""

    profile: EncoderProfile

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> VisualFeatures:
        """Map an image to one global vector plus grid patch vectors."""

    def weights_checksum(self) -> str:
        return _checksum(self._weight_arrays())

    def _weight_arrays(self) -> list[np.ndarray]:
        return []


class TextEncoderBase(abc.ABC):
    """Contract for the text side of an encoder pair."""

    profile: EncoderProfile

    @abc.abstractmethod
    def encode_text(self, text: str) -> tuple[np.ndarray, ActionEmbedding]:
        """Return (per-token embeddings, summary vector) for a string."""

    @abc.abstractmethod
    def encode_prompt(self, seq: PromptSequence) -> Tensor:
        """Encode a prompt with an injected embedding; differentiable in it."""

    def weights_checksum(self) -> str:
        return _checksum(self._weight_arrays())

    def _weight_arrays(self) -> list[np.ndarray]:
        return []


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()


class ToyVisionEncoder(VisionEncoderBase):
    """Patch flattening + seeded projection + one frozen mixing layer.

    Accepts exactly ``resolution`` x ``resolution`` RGB inputs so that the
    patch flattening is shape-stable; callers resize beforehand.
    """

    def __init__(self, d: int = 32, g: int = 4, seed: int = 0, resolution: int = 64,
                 dtype=np.float64):
        if resolution % g != 0:
            raise ValueError(f"resolution {resolution} not divisible into a {g}x{g} grid")
        self.profile = EncoderProfile(name="toy", d=d, g=g, seed=seed)
        self.resolution = resolution
        self.dtype = np.dtype(dtype)
        ppx = resolution // g
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x76697369]))
        s = 1.0 / np.sqrt(d)
        self._proj = _seeded_matrix(rng, (ppx * ppx * 3, d), 1.0 / np.sqrt(ppx * ppx * 3), dtype)
        # keep the input-independent embeddings small so image content, not a
        # shared constant, dominates the output features
        self._global = _seeded_matrix(rng, (d,), 0.1 * s, dtype)
        self._pos = _seeded_matrix(rng, (g * g + 1, d), 0.1 * s, dtype)
        self._wq = _seeded_matrix(rng, (d, d), s, dtype)
        self._wk = _seeded_matrix(rng, (d, d), s, dtype)
        self._wv = _seeded_matrix(rng, (d, d), s, dtype)
        self._wo = _seeded_matrix(rng, (d, d), s, dtype)

    def _weight_arrays(self):
        return [self._proj, self._global, self._pos,
                self._wq, self._wk, self._wv, self._wo]

    def encode_image(self, image: np.ndarray) -> VisualFeatures:
        g, d, res = self.profile.g, self.profile.d, self.resolution
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != (res, res):
            raise ValueError(
                f"expected a {res}x{res}x3 image for the {g}x{g} patch grid, "
                f"got {image.shape}"
            )
        ppx = res // g
        centered = (image.astype(self.dtype) - 0.5) * 2.0  # [0,1] -> [-1,1]
        patches = (
            centered
            .reshape(g, ppx, g, ppx, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(g * g, ppx * ppx * 3)
        )
        tokens = np.concatenate([self._global[None, :], patches @ self._proj], axis=0)
        tokens = tokens + self._pos
        with ad.no_grad():
            mixed = _single_head_attention(
                Tensor(tokens), Tensor(self._wq), Tensor(self._wk),
                Tensor(self._wv), Tensor(self._wo),
            )
        out = tokens + mixed.data
        return VisualFeatures(global_vec=out[0].copy(), patches=out[1:].copy(), grid=g)


class ToyTextEncoder(TextEncoderBase):
    """Seeded embedding table + one frozen self-attention layer.

    The summary vector is the first position after mixing. Unknown words map
    to a reserved UNK id. ``encode_prompt`` runs the same forward pass but
    keeps the injected embedding in the autodiff graph.
    """

    CLS_ID = 0
    UNK_ID = 1
    PLACEHOLDER_ID = 2

    def __init__(self, d: int = 32, seed: int = 0, vocabulary: tuple[str, ...] | None = None,
                 max_len: int = 64, dtype=np.float64, attn_sharpness: float = 1.0):
        words = default_vocabulary() if vocabulary is None else tuple(vocabulary)
        self.profile = EncoderProfile(name="toy", d=d, g=0, seed=seed)
        self.max_len = max_len
        self.attn_sharpness = attn_sharpness
        self.dtype = np.dtype(dtype)
        self._word_to_id = {w: i + 3 for i, w in enumerate(words)}
        self._id_to_token = ["[cls]", "[unk]", PLACEHOLDER] + list(words)
        vocab_size = len(self._id_to_token)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x74657874]))
        s = 1.0 / np.sqrt(d)
        self._embed = _seeded_matrix(rng, (vocab_size, d), s, dtype)
        self._pos = _seeded_matrix(rng, (max_len, d), s, dtype)
        self._wq = _seeded_matrix(rng, (d, d), s, dtype)
        self._wk = _seeded_matrix(rng, (d, d), s, dtype)
        self._wv = _seeded_matrix(rng, (d, d), s, dtype)
        self._wo = _seeded_matrix(rng, (d, d), s, dtype)

    def _weight_arrays(self):
        return [self._embed, self._pos, self._wq, self._wk, self._wv, self._wo]

    # tokenization ----------------------------------------------------
    def token_ids(self, text: str) -> list[int]:
        ids = [self.CLS_ID]
        for tok in tokenize(text):
            if tok == PLACEHOLDER:
                ids.append(self.PLACEHOLDER_ID)
            else:
                ids.append(self._word_to_id.get(tok, self.UNK_ID))
        return ids

    def decode(self, token_ids) -> str:
        return " ".join(self._id_to_token[i] for i in token_ids if i != self.CLS_ID)

    def prompt_sequence(self, text: str) -> PromptSequence:
        ids = self.token_ids(text)
        slots = [i for i, t in enumerate(ids) if t == self.PLACEHOLDER_ID]
        if len(slots) != 1:
            raise ValueError(
                f"prompt must contain exactly one {PLACEHOLDER} slot, found {len(slots)}"
            )
        return PromptSequence(token_ids=tuple(ids), placeholder_pos=slots[0])

    # encoding --------------------------------------------------------
    def _forward(self, rows: Tensor) -> Tensor:
        length = rows.shape[0]
        if length > self.max_len:
            raise ValueError(f"sequence of {length} tokens exceeds max length {self.max_len}")
        x = ad.add(rows, Tensor(self._pos[:length]))
        mixed = _single_head_attention(
            x, Tensor(self._wq), Tensor(self._wk), Tensor(self._wv), Tensor(self._wo),
            sharpness=self.attn_sharpness,
        )
        out = ad.add(x, mixed)
        return ad.reshape(ad.narrow(out, 0, 0, 1), (self.profile.d,))

    def encode_text(self, text: str) -> tuple[np.ndarray, ActionEmbedding]:
        if not text or not tokenize(text):
            raise ValueError("cannot encode empty text")
        ids = self.token_ids(text)
        rows = self._embed[ids]
        with ad.no_grad():
            cls = self._forward(Tensor(rows)).data
        return rows.copy(), ActionEmbedding(vec=cls.copy())

    def encode_prompt(self, seq: PromptSequence) -> Tensor:
        if seq.injected is None:
            raise ValueError("prompt placeholder has not been filled")
        vec = ad.as_tensor(seq.injected)
        if vec.shape != (self.profile.d,):
            raise ValueError(f"injected embedding has shape {vec.shape}, expected ({self.profile.d},)")
        ids = list(seq.token_ids)
        pos = seq.placeholder_pos
        parts = []
        if pos > 0:
            parts.append(Tensor(self._embed[ids[:pos]]))
        parts.append(ad.reshape(vec, (1, self.profile.d)))
        if pos + 1 < len(ids):
            parts.append(Tensor(self._embed[ids[pos + 1 :]]))
        rows = ad.concat(parts, axis=0)
        return self._forward(rows)


class PretrainedVisionAdapter(VisionEncoderBase):
    """Skeleton for plugging in a real pretrained vision backbone.

    Subclasses load their weights and implement ``encode_image`` so that it
    returns one global vector plus ``g*g`` patch vectors of width ``d``
    matching the declared profile (a ViT-L/14-scale backbone yields
    m = 257 tokens of width d = 1024). ``patch_projection`` selects whether
    patch features are taken before or after the backbone's final projection.
    """

    def __init__(self, profile: EncoderProfile, patch_projection: str = "post"):
        if patch_projection not in ("pre", "post"):
            raise ValueError("patch_projection must be 'pre' or 'post'")
        self.profile = profile
        self.patch_projection = patch_projection

    def encode_image(self, image: np.ndarray) -> VisualFeatures:
        raise NotImplementedError("subclass with loaded weights required")


class PretrainedTextAdapter(TextEncoderBase):
    """Skeleton for a pretrained text backbone; see PretrainedVisionAdapter."""

    def __init__(self, profile: EncoderProfile):
        self.profile = profile

    def encode_text(self, text: str):
        raise NotImplementedError("subclass with loaded weights required")

    def encode_prompt(self, seq: PromptSequence) -> Tensor:
        raise NotImplementedError("subclass with loaded weights required")


def build_toy_encoders(
    d: int = 32, g: int = 4, seed: int = 0, resolution: int = 64, dtype=np.float64
) -> tuple[ToyVisionEncoder, ToyTextEncoder]:
    """Construct a matched (vision, text) pair sharing width d and root seed."""
    vision = ToyVisionEncoder(d=d, g=g, seed=seed, resolution=resolution, dtype=dtype)
    text = ToyTextEncoder(d=d, seed=seed, dtype=dtype)
    return vision, text
