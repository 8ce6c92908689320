"""Context/target attention masking and a forward-only attention block.

The information-flow contract: queries from context views may attend only
to context-view keys, while target-view queries attend to every key. The
implementation gathers the allowed keys *before* the softmax, so context
outputs are bit-identical under any change to target tokens; masking by
additive -inf would only make them approximately so.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgio import write_pgm

CONTEXT = "context"
TARGET = "target"


@dataclass(frozen=True)
class TokenSet:
    """Per-view camera + image tokens with a context/target flag per view.

    Flattened token order (used by masks): view-major, camera token first,
    then that view's image tokens.
    """

    camera_tokens: np.ndarray  # (V, C)
    image_tokens: np.ndarray  # (V, L, C)
    is_context: np.ndarray  # (V,) bool

    def __post_init__(self):
        cam = np.asarray(self.camera_tokens, dtype=np.float64)
        img = np.asarray(self.image_tokens, dtype=np.float64)
        flags = np.asarray(self.is_context, dtype=bool)
        if cam.ndim != 2 or img.ndim != 3 or cam.shape[0] != img.shape[0]:
            raise ValueError("camera_tokens must be (V, C) and image_tokens (V, L, C)")
        if cam.shape[1] != img.shape[2]:
            raise ValueError("camera and image token widths differ")
        if flags.shape != (cam.shape[0],):
            raise ValueError("is_context must have one flag per view")
        if not np.any(flags):
            raise ValueError("need at least one context view")
        if not (np.all(np.isfinite(cam)) and np.all(np.isfinite(img))):
            raise ValueError("tokens must be finite")
        object.__setattr__(self, "camera_tokens", cam)
        object.__setattr__(self, "image_tokens", img)
        object.__setattr__(self, "is_context", flags)

    @property
    def n_views(self) -> int:
        return self.camera_tokens.shape[0]

    @property
    def tokens_per_view(self) -> int:
        return 1 + self.image_tokens.shape[1]

    @property
    def width(self) -> int:
        return self.camera_tokens.shape[1]

    def flattened(self) -> np.ndarray:
        v, l, c = self.image_tokens.shape
        out = np.empty((v, l + 1, c))
        out[:, 0, :] = self.camera_tokens
        out[:, 1:, :] = self.image_tokens
        return out.reshape(v * (l + 1), c)

    def view_flags(self) -> list[str]:
        return [CONTEXT if f else TARGET for f in self.is_context]

    @staticmethod
    def from_flat(flat: np.ndarray, n_views: int, is_context: np.ndarray) -> "TokenSet":
        per = flat.shape[0] // n_views
        arr = flat.reshape(n_views, per, -1)
        return TokenSet(arr[:, 0, :], arr[:, 1:, :], is_context)


@dataclass(frozen=True)
class AttentionWeights:
    """Fixed projection matrices; this block is forward-only by design."""

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray

    def __post_init__(self):
        c = self.w_query.shape[0]
        for name in ("w_query", "w_key", "w_value"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (c, c):
                raise ValueError(f"{name} must be square and match the others")
            object.__setattr__(self, name, m)

    @staticmethod
    def random(width: int, rng: np.random.Generator) -> "AttentionWeights":
        s = 1.0 / np.sqrt(width)
        return AttentionWeights(
            rng.normal(0.0, s, (width, width)),
            rng.normal(0.0, s, (width, width)),
            rng.normal(0.0, s, (width, width)),
        )


def build_attention_mask(view_flags: list[str], tokens_per_view: int) -> np.ndarray:
    """Boolean (N, N) mask over flattened tokens; True = attention allowed.

    Context-view query rows allow only context-view key columns; target-view
    query rows allow every column.
    """
    if tokens_per_view < 1:
        raise ValueError("tokens_per_view must be >= 1")
    flags = []
    for f in view_flags:
        if f not in (CONTEXT, TARGET):
            raise ValueError(f"view flag must be {CONTEXT!r} or {TARGET!r}, got {f!r}")
        flags.append(f == CONTEXT)
    if not any(flags):
        raise ValueError("need at least one context view")
    per_token = np.repeat(np.array(flags, dtype=bool), tokens_per_view)
    n = per_token.size
    mask = np.ones((n, n), dtype=bool)
    mask[np.ix_(per_token, ~per_token)] = False
    return mask


def masked_multiview_attention(
    tokens: TokenSet,
    mask: np.ndarray,
    weights: AttentionWeights,
    layers: int = 1,
) -> TokenSet:
    """Scaled dot-product attention with key exclusion before the softmax.

    Disallowed keys are never touched, so their values cannot leak into the
    output even at the bit level. Multiple layers reapply the same block to
    the previous output.
    """
    x = tokens.flattened()
    n, c = x.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} tokens")
    if not np.all(np.any(mask, axis=1)):
        raise ValueError("every query row needs at least one allowed key")
    if layers < 1:
        raise ValueError("layers must be >= 1")

    patterns, row_groups = np.unique(mask, axis=0, return_inverse=True)
    scale = 1.0 / np.sqrt(c)
    for _ in range(layers):
        q = x @ weights.w_query
        k = x @ weights.w_key
        v = x @ weights.w_value
        out = np.empty_like(x)
        for gi in range(patterns.shape[0]):
            rows = np.nonzero(row_groups == gi)[0]
            allowed = np.nonzero(patterns[gi])[0]
            scores = (q[rows] @ k[allowed].T) * scale
            scores -= np.max(scores, axis=1, keepdims=True)
            e = np.exp(scores)
            attn = e / np.sum(e, axis=1, keepdims=True)
            out[rows] = attn @ v[allowed]
        x = out
    return TokenSet.from_flat(x, tokens.n_views, tokens.is_context)


def mask_to_pgm(mask: np.ndarray, path) -> None:
    """Write the mask as a PGM image (white = allowed) for documentation."""
    write_pgm(path, np.asarray(mask, dtype=bool))
