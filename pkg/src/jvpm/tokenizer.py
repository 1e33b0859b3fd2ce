"""Frozen temporal patch tokenizer.

A clip of ``F = 4N + 1`` frames is cut into temporal blocks ``[1, 4, 4, ...]``
(first frame alone, then consecutive groups of four).  Each block is averaged
over its frames, split into ``P x P`` patches and every flattened patch is
mapped to ``D`` dims by a seeded projection with orthonormal columns.  Tokens
are ordered block-major, then view, then raster.  There is no bias, so the map
is linear in pixel intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SUPPORTED_FRAMES = (5, 9, 13, 17, 21)

# 1-based frame indices inside a 17-frame horizon
SUBSAMPLE_TABLE = {
    2: (1, 1, 17, 17, 17),
    5: (1, 6, 10, 14, 17),
    9: (1, 3, 5, 7, 9, 11, 13, 15, 17),
    17: tuple(range(1, 18)),
}


class FrameCountError(ValueError):
    pass


def check_frame_count(f: int) -> int:
    if f not in SUPPORTED_FRAMES:
        raise FrameCountError(
            f"clip must have 4N+1 frames (one of {SUPPORTED_FRAMES}), got {f}"
        )
    return f


def subsample_indices(frame_count: int, horizon: int = 17) -> tuple[int, ...]:
    """1-based indices of the frames kept from a ``horizon``-frame window.

    The 2-frame setting is padded by repetition to five frames.  Only the
    17-frame horizon has tabulated sparse settings; for any supported horizon
    ``frame_count == horizon`` keeps every frame.
    """
    if frame_count == horizon and horizon in SUPPORTED_FRAMES:
        return tuple(range(1, horizon + 1))
    if horizon != 17 or frame_count not in SUBSAMPLE_TABLE:
        raise FrameCountError(
            f"unsupported frame count {frame_count} for horizon {horizon}; "
            f"sparse settings {sorted(SUBSAMPLE_TABLE)} need horizon 17"
        )
    return SUBSAMPLE_TABLE[frame_count]


def temporal_blocks(f: int) -> list[slice]:
    check_frame_count(f)
    return [slice(0, 1)] + [slice(1 + 4 * i, 5 + 4 * i) for i in range((f - 1) // 4)]


@dataclass(frozen=True)
class ClipSpec:
    frame_count: int = 17
    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 32
    views: int = 1
    seed: int = 0

    def __post_init__(self):
        check_frame_count(self.frame_count)
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"frame {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.patch * self.patch < self.dim:
            raise ValueError(f"patch dim {self.patch ** 2} < token dim {self.dim}: no orthonormal projection")

    @property
    def n_blocks(self) -> int:
        return (self.frame_count - 1) // 4 + 1

    @property
    def tokens_per_block(self) -> int:
        return self.views * (self.height // self.patch) * (self.width // self.patch)

    @property
    def n_tokens(self) -> int:
        return self.n_blocks * self.tokens_per_block


@dataclass(frozen=True)
class Tokenizer:
    spec: ClipSpec = field(default_factory=ClipSpec)

    @cached_property
    def projection(self) -> np.ndarray:
        """(P*P, D) with orthonormal columns; read-only."""
        p2 = self.spec.patch ** 2
        rng = np.random.default_rng(self.spec.seed)
        q, r = np.linalg.qr(rng.normal(size=(p2, self.spec.dim)))
        q = q * np.sign(np.diag(r))  # unique QR
        q.setflags(write=False)
        return q

    def _frames(self, frames, lead: int) -> np.ndarray:
        """Coerce to (..., views, H, W) float, scaled to [0, 1]."""
        s = self.spec
        x = np.asarray(frames, dtype=np.float64)
        if s.views == 1 and x.ndim == lead + 2:
            x = x[..., None, :, :]
        if x.ndim != lead + 3 or x.shape[-3:] != (s.views, s.height, s.width):
            raise ValueError(
                f"frames of shape {np.shape(frames)} do not match views={s.views}, {s.height}x{s.width}"
            )
        return x / 255.0

    def _patchify(self, img: np.ndarray) -> np.ndarray:
        """(..., views, H, W) -> (..., views*h*w, P*P)."""
        p = self.spec.patch
        *lead, v, hh, ww = img.shape
        x = img.reshape(*lead, v, hh // p, p, ww // p, p)
        x = np.moveaxis(x, -3, -2)  # (..., v, h, w, p, p)
        return x.reshape(*lead, v * (hh // p) * (ww // p), p * p)

    def encode_clips(self, clips) -> np.ndarray:
        """(B, F, [views,] H, W) -> (B, n_tokens, D)."""
        s = self.spec
        clips = np.asarray(clips)
        if clips.ndim < 2 or clips.shape[1] != s.frame_count:
            got = clips.shape[1] if clips.ndim >= 2 else None
            raise FrameCountError(f"expected {s.frame_count} frames (4N+1 rule) per clip, got {got}")
        x = self._frames(clips, lead=2)
        blocks = np.stack([x[:, b].mean(axis=1) for b in temporal_blocks(s.frame_count)], axis=1)
        tokens = self._patchify(blocks) @ self.projection  # (B, nb, tpb, D)
        return tokens.reshape(clips.shape[0], s.n_tokens, s.dim)

    def encode_clip(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        check_frame_count(len(frames))
        if len(frames) != self.spec.frame_count:
            raise FrameCountError(f"expected {self.spec.frame_count} frames, got {len(frames)}")
        return self.encode_clips(frames[None])[0]

    def encode_frames(self, frames) -> np.ndarray:
        """(B, [views,] H, W) -> (B, tokens_per_block, D); first-frame latent targets."""
        x = self._frames(frames, lead=1)
        return self._patchify(x) @ self.projection

    def encode_first_frame(self, frame) -> np.ndarray:
        return self.encode_frames(np.asarray(frame)[None])[0]
